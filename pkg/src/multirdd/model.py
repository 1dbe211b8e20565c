"""Core data model: treatment rules, neighborhoods, study tables, and the
objects produced by matching and weighting.

All types are immutable after construction (frozen dataclasses holding
read-only pandas/numpy data) and safe to share across threads.  Operations
elsewhere in the package are pure functions of these objects.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "Comparator",
    "RunningVariableDef",
    "RuleClause",
    "TreatmentRule",
    "RuleSet",
    "NeighborhoodSpec",
    "OutcomeDef",
    "StudyFrame",
    "DesignView",
    "MatchedSample",
    "BalanceLine",
    "WeightSolution",
    "ValidationIssue",
    "ValidationReport",
    "validate_frame",
    "strip_outcomes",
]


class Comparator(str, Enum):
    """Clause comparison against the cutoff.

    ``AT_OR_BELOW`` treats a value equal to the cutoff as triggering; on a
    discrete grade grid this reproduces "grade below 4" with cutoff 3.9.
    ``STRICTLY_BELOW`` is the open-interval form.
    """

    AT_OR_BELOW = "at-or-below"
    STRICTLY_BELOW = "strictly-below"


@dataclass(frozen=True)
class RunningVariableDef:
    id: str
    description: str = ""


@dataclass(frozen=True)
class RuleClause:
    running_variable: str
    cutoff: float
    comparator: Comparator = Comparator.AT_OR_BELOW

    def __post_init__(self):
        if not math.isfinite(self.cutoff):
            raise ValueError(f"cutoff for {self.running_variable!r} must be finite")
        object.__setattr__(self, "comparator", Comparator(self.comparator))


@dataclass(frozen=True)
class TreatmentRule:
    """Conjunction of cutoff clauses; the unit is assigned iff all hold."""

    rule_id: int
    clauses: tuple[RuleClause, ...]

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))
        if not self.clauses:
            raise ValueError(f"rule {self.rule_id} has no clauses")
        seen = [c.running_variable for c in self.clauses]
        if len(set(seen)) != len(seen):
            raise ValueError(f"rule {self.rule_id} references a running variable twice")

    def clause_for(self, running_variable: str) -> RuleClause:
        for c in self.clauses:
            if c.running_variable == running_variable:
                return c
        raise KeyError(running_variable)


@dataclass(frozen=True)
class RuleSet:
    """All treatment rules; rules compose by OR into a single treatment.

    ``grid_resolution``, when set, declares that running values live on a
    discrete grid (e.g. 0.1 for school grades).  Comparisons then snap values
    to integer grid units, which removes float artifacts like 3.8999999.
    """

    rules: tuple[TreatmentRule, ...]
    running_variables: tuple[RunningVariableDef, ...]
    grid_resolution: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "running_variables", tuple(self.running_variables))
        if not self.rules:
            raise ValueError("a RuleSet needs at least one rule")
        ids = [rv.id for rv in self.running_variables]
        if len(set(ids)) != len(ids):
            raise ValueError("running variable ids must be unique")
        rule_ids = [r.rule_id for r in self.rules]
        if len(set(rule_ids)) != len(rule_ids):
            raise ValueError("rule ids must be unique")
        declared = set(ids)
        for rule in self.rules:
            for clause in rule.clauses:
                if clause.running_variable not in declared:
                    raise ValueError(
                        f"rule {rule.rule_id} references undeclared running "
                        f"variable {clause.running_variable!r}"
                    )
        if self.grid_resolution is not None and not self.grid_resolution > 0:
            raise ValueError("grid_resolution must be positive")

    @property
    def variable_ids(self) -> tuple[str, ...]:
        return tuple(rv.id for rv in self.running_variables)

    @property
    def shared_variables(self) -> dict[str, tuple[int, ...]]:
        """Map running-variable id -> ids of the rules that reference it."""
        out: dict[str, list[int]] = {}
        for rule in self.rules:
            for clause in rule.clauses:
                out.setdefault(clause.running_variable, []).append(rule.rule_id)
        return {k: tuple(v) for k, v in out.items()}

    def rule(self, rule_id: int) -> TreatmentRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)

    def snap(self, values: np.ndarray) -> np.ndarray:
        """Snap running values to integer grid units (or pass through)."""
        if self.grid_resolution is None:
            return np.asarray(values, dtype=float)
        return np.rint(np.asarray(values, dtype=float) / self.grid_resolution)

    def snap_scalar(self, value: float) -> float:
        if self.grid_resolution is None:
            return float(value)
        return float(np.rint(value / self.grid_resolution))

    def to_dict(self) -> dict:
        return {
            "running_variables": [
                {"id": rv.id, "description": rv.description}
                for rv in self.running_variables
            ],
            "rules": [
                {
                    "rule_id": r.rule_id,
                    "clauses": [
                        {
                            "running_variable": c.running_variable,
                            "cutoff": c.cutoff,
                            "comparator": c.comparator.value,
                        }
                        for c in r.clauses
                    ],
                }
                for r in self.rules
            ],
            "grid_resolution": self.grid_resolution,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RuleSet":
        return cls(
            rules=tuple(
                TreatmentRule(
                    rule_id=int(r["rule_id"]),
                    clauses=tuple(
                        RuleClause(
                            running_variable=c["running_variable"],
                            cutoff=float(c["cutoff"]),
                            comparator=Comparator(c.get("comparator", "at-or-below")),
                        )
                        for c in r["clauses"]
                    ),
                )
                for r in d["rules"]
            ),
            running_variables=tuple(
                RunningVariableDef(id=rv["id"], description=rv.get("description", ""))
                for rv in d["running_variables"]
            ),
            grid_resolution=d.get("grid_resolution"),
        )


ClauseKey = tuple[int, str]  # (rule_id, running_variable)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Per-clause lower/upper half-widths around the cutoffs.

    ``half_widths[(rule_id, running_variable)] = (below, above)``; the
    neighborhood interval for that clause is the closed
    ``[cutoff - below, cutoff + above]``.
    """

    half_widths: Mapping[ClauseKey, tuple[float, float]]

    def __post_init__(self):
        clean: dict[ClauseKey, tuple[float, float]] = {}
        for key, (lo, hi) in dict(self.half_widths).items():
            rule_id, var = key
            lo, hi = float(lo), float(hi)
            if lo < 0 or hi < 0 or not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"half-widths for {key} must be finite and >= 0")
            clean[(int(rule_id), str(var))] = (lo, hi)
        object.__setattr__(self, "half_widths", clean)

    def covers(self, rules: RuleSet) -> bool:
        return all(
            (rule.rule_id, clause.running_variable) in self.half_widths
            for rule in rules.rules
            for clause in rule.clauses
        )

    def interval(self, rules: RuleSet, rule_id: int, running_variable: str) -> tuple[float, float]:
        clause = rules.rule(rule_id).clause_for(running_variable)
        below, above = self.half_widths[(rule_id, running_variable)]
        return clause.cutoff - below, clause.cutoff + above

    def expanded(self, growth: Mapping[ClauseKey, tuple[float, float]]) -> "NeighborhoodSpec":
        """New spec with half-widths grown by the given per-clause amounts.

        Negative growth shrinks; the result is floored at zero half-width.
        """
        new = dict(self.half_widths)
        for key, (dlo, dhi) in growth.items():
            lo, hi = new[key]
            new[key] = (max(0.0, lo + dlo), max(0.0, hi + dhi))
        return NeighborhoodSpec(new)

    def contains_spec(self, other: "NeighborhoodSpec") -> bool:
        """True if every interval of ``other`` lies inside this one's."""
        for key, (olo, ohi) in other.half_widths.items():
            lo, hi = self.half_widths.get(key, (-1.0, -1.0))
            if olo > lo + 1e-12 or ohi > hi + 1e-12:
                return False
        return True

    def max_half_width(self) -> float:
        return max(max(lo, hi) for lo, hi in self.half_widths.values())

    def to_dict(self) -> dict:
        return {
            "half_widths": [
                {"rule_id": rid, "running_variable": var, "below": lo, "above": hi}
                for (rid, var), (lo, hi) in sorted(self.half_widths.items())
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NeighborhoodSpec":
        return cls(
            {
                (int(e["rule_id"]), e["running_variable"]): (
                    float(e["below"]),
                    float(e["above"]),
                )
                for e in d["half_widths"]
            }
        )


@dataclass(frozen=True)
class OutcomeDef:
    name: str
    kind: str  # "binary" | "real"
    period: str = ""

    def __post_init__(self):
        if self.kind not in ("binary", "real"):
            raise ValueError(f"outcome kind must be binary or real, got {self.kind!r}")


class StudyFrame:
    """Unit-level table plus the column roles the analysis relies on.

    Columns are partitioned into: a unit id, running variables, primary
    covariates X (each tagged ``exact-match`` or ``mean-balance``), secondary
    covariates X_test, outcome columns (each with a kind and measurement
    period), and an optional binary sample flag.
    """

    def __init__(
        self,
        data: pd.DataFrame,
        unit_id: str,
        running: Sequence[str],
        exact_match: Sequence[str] = (),
        mean_balance: Sequence[str] = (),
        x_test: Sequence[str] = (),
        outcomes: Sequence[OutcomeDef] = (),
        sample_flag: str | None = None,
        categorical_levels: Mapping[str, Sequence] | None = None,
    ):
        self.unit_id = unit_id
        self.running = tuple(running)
        self.exact_match = tuple(exact_match)
        self.mean_balance = tuple(mean_balance)
        self.x_test = tuple(x_test)
        self.outcomes = tuple(outcomes)
        self.sample_flag = sample_flag
        declared = (
            [unit_id]
            + list(self.running)
            + list(self.exact_match)
            + list(self.mean_balance)
            + list(self.x_test)
            + [o.name for o in self.outcomes]
            + ([sample_flag] if sample_flag else [])
        )
        missing = [c for c in declared if c not in data.columns]
        if missing:
            raise ValueError(f"declared columns missing from data: {missing}")
        self.data = data.reset_index(drop=True)
        if categorical_levels is None:
            categorical_levels = {
                c: tuple(sorted(pd.unique(self.data[c].dropna()), key=repr))
                for c in self.exact_match
            }
        self.categorical_levels = {k: tuple(v) for k, v in categorical_levels.items()}

    @property
    def outcome_names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.outcomes)

    @property
    def n(self) -> int:
        return len(self.data)

    def outcome(self, name: str) -> OutcomeDef:
        for o in self.outcomes:
            if o.name == name:
                return o
        raise KeyError(name)

    def subset(self, mask_or_index) -> "StudyFrame":
        sub = self.data.loc[mask_or_index]
        return StudyFrame(
            sub,
            unit_id=self.unit_id,
            running=self.running,
            exact_match=self.exact_match,
            mean_balance=self.mean_balance,
            x_test=self.x_test,
            outcomes=self.outcomes,
            sample_flag=self.sample_flag,
            categorical_levels=self.categorical_levels,
        )


class DesignView:
    """Outcome-stripped view of a StudyFrame.

    Design-stage operations (assignment, neighborhood selection, matching)
    take this type; the outcome columns are physically absent, so reading one
    through the view is impossible by construction.
    """

    def __init__(self, frame: StudyFrame):
        keep = (
            [frame.unit_id]
            + list(frame.running)
            + list(frame.exact_match)
            + list(frame.mean_balance)
            + list(frame.x_test)
            + ([frame.sample_flag] if frame.sample_flag else [])
        )
        # dict.fromkeys keeps order while dropping duplicate role assignments
        keep = list(dict.fromkeys(keep))
        self.data = frame.data[keep].copy()
        self.unit_id = frame.unit_id
        self.running = frame.running
        self.exact_match = frame.exact_match
        self.mean_balance = frame.mean_balance
        self.x_test = frame.x_test
        self.sample_flag = frame.sample_flag
        self.categorical_levels = dict(frame.categorical_levels)

    @property
    def n(self) -> int:
        return len(self.data)

    def unit_ids(self) -> pd.Series:
        return self.data[self.unit_id]

    def running_values(self, var: str) -> np.ndarray:
        return self.data[var].to_numpy(dtype=float)

    def exact_key_frame(self) -> pd.DataFrame:
        return self.data[list(self.exact_match)]


def strip_outcomes(frame: StudyFrame) -> DesignView:
    """Return the outcome-free design view of ``frame``."""
    return DesignView(frame)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    locus: str = ""


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def __str__(self) -> str:
        if self.ok:
            return "frame valid"
        return "\n".join(f"[{i.code}] {i.message} ({i.locus})" for i in self.issues)


def validate_frame(frame: StudyFrame, rules: RuleSet) -> ValidationReport:
    """Check every frame invariant against the rule set.

    The report lists all violations found; an empty report means the frame is
    accepted for analysis.
    """
    issues: list[ValidationIssue] = []
    df = frame.data

    dup = df[frame.unit_id][df[frame.unit_id].duplicated()]
    if len(dup):
        issues.append(
            ValidationIssue(
                "duplicate-id",
                f"{len(dup)} duplicated unit id value(s), e.g. {dup.iloc[0]!r}",
                locus=f"column {frame.unit_id}",
            )
        )

    for rv in rules.variable_ids:
        if rv not in frame.running:
            issues.append(
                ValidationIssue(
                    "missing-running-variable",
                    f"rule set requires running variable {rv!r} but the frame "
                    "does not declare it",
                    locus=f"column {rv}",
                )
            )
        elif rv not in df.columns:
            issues.append(
                ValidationIssue(
                    "missing-column", f"declared running variable {rv!r} absent",
                    locus=f"column {rv}",
                )
            )

    numeric_cols = [c for c in frame.running if c in df.columns]
    numeric_cols += [c for c in frame.mean_balance if c in df.columns]
    for col in numeric_cols:
        if not pd.api.types.is_numeric_dtype(df[col]):
            issues.append(
                ValidationIssue("non-numeric", f"column {col!r} must be numeric",
                                locus=f"column {col}")
            )

    check_missing = (
        list(frame.running) + list(frame.exact_match) + list(frame.mean_balance)
        + list(frame.x_test)
    )
    for col in dict.fromkeys(check_missing):
        if col not in df.columns:
            continue
        n_missing = int(df[col].isna().sum())
        if n_missing:
            row = int(df.index[df[col].isna()][0])
            issues.append(
                ValidationIssue(
                    "missing-value",
                    f"column {col!r} has {n_missing} missing value(s); "
                    "imputation is not performed",
                    locus=f"column {col}, first at row {row}",
                )
            )

    for col, levels in frame.categorical_levels.items():
        if col not in df.columns:
            continue
        observed = set(pd.unique(df[col].dropna()))
        extra = observed - set(levels)
        if extra:
            issues.append(
                ValidationIssue(
                    "undeclared-level",
                    f"column {col!r} has value(s) outside the declared level "
                    f"set: {sorted(extra, key=repr)[:5]}",
                    locus=f"column {col}",
                )
            )

    for o in frame.outcomes:
        if o.name not in df.columns:
            continue
        if o.kind == "binary":
            vals = set(pd.unique(df[o.name].dropna()))
            if not vals <= {0, 1, 0.0, 1.0, False, True}:
                issues.append(
                    ValidationIssue(
                        "non-binary-outcome",
                        f"outcome {o.name!r} declared binary but takes other values",
                        locus=f"column {o.name}",
                    )
                )

    if frame.sample_flag and frame.sample_flag in df.columns:
        vals = set(pd.unique(df[frame.sample_flag].dropna()))
        if not vals <= {0, 1, 0.0, 1.0, False, True}:
            issues.append(
                ValidationIssue(
                    "non-binary-flag",
                    f"sample flag {frame.sample_flag!r} must be binary",
                    locus=f"column {frame.sample_flag}",
                )
            )

    return ValidationReport(tuple(issues))


@dataclass(frozen=True)
class BalanceLine:
    """Achieved mean imbalance of one balance function in a matched sample."""

    function: str
    tolerance: float
    reference: float
    treated_dev: float
    control_dev: float

    @property
    def within(self) -> bool:
        return self.treated_dev <= self.tolerance + 1e-9 and (
            self.control_dev <= self.tolerance + 1e-9
        )


@dataclass(frozen=True)
class MatchedSample:
    """Treated-control pairs plus the balance certificate that produced them."""

    pairs: tuple[tuple[object, object], ...]  # (treated_id, control_id)
    stratum_keys: tuple[tuple, ...]
    balance: tuple[BalanceLine, ...]
    solver_info: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((t, c) for t, c in self.pairs))
        object.__setattr__(self, "stratum_keys", tuple(tuple(k) for k in self.stratum_keys))
        object.__setattr__(self, "balance", tuple(self.balance))
        if len(self.stratum_keys) != len(self.pairs):
            raise ValueError("one stratum key per pair required")

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def treated_ids(self) -> list:
        return [t for t, _ in self.pairs]

    def control_ids(self) -> list:
        return [c for _, c in self.pairs]

    def check(self) -> list[str]:
        """O(pairs) invariant check; returns a list of violations (empty = ok)."""
        problems = []
        seen = set()
        for t, c in self.pairs:
            for u in (t, c):
                if u in seen:
                    problems.append(f"unit {u!r} appears in more than one pair")
                seen.add(u)
        for line in self.balance:
            if not line.within:
                problems.append(
                    f"imbalance of {line.function} exceeds tolerance "
                    f"({line.treated_dev:.3g}/{line.control_dev:.3g} > {line.tolerance:.3g})"
                )
        return problems

    def to_dict(self) -> dict:
        return {
            "pairs": [[t, c] for t, c in self.pairs],
            "stratum_keys": [list(k) for k in self.stratum_keys],
            "balance": [
                {
                    "function": b.function,
                    "tolerance": b.tolerance,
                    "reference": b.reference,
                    "treated_dev": b.treated_dev,
                    "control_dev": b.control_dev,
                }
                for b in self.balance
            ],
            "solver_info": dict(self.solver_info),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MatchedSample":
        return cls(
            pairs=tuple((t, c) for t, c in d["pairs"]),
            stratum_keys=tuple(tuple(k) for k in d["stratum_keys"]),
            balance=tuple(
                BalanceLine(
                    function=b["function"],
                    tolerance=float(b["tolerance"]),
                    reference=float(b["reference"]),
                    treated_dev=float(b["treated_dev"]),
                    control_dev=float(b["control_dev"]),
                )
                for b in d["balance"]
            ),
            solver_info=dict(d.get("solver_info", {})),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "pair_id": range(len(self.pairs)),
                "treated_id": [t for t, _ in self.pairs],
                "control_id": [c for _, c in self.pairs],
                "stratum_key": ["|".join(map(str, k)) for k in self.stratum_keys],
            }
        )


@dataclass(frozen=True)
class WeightSolution:
    """Nonnegative control weights with optimality diagnostics.

    Weights sum to one within 1e-10; values within -1e-12 of zero are clamped
    to exactly zero on construction.  ``objective`` is the stored
    sum-of-squared deviations from the uniform weight.
    """

    unit_ids: tuple
    weights: np.ndarray
    objective: float
    constraint_slacks: tuple[float, ...]
    kkt_residual: float
    dual: tuple[float, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        if np.any(w < -1e-12):
            raise ValueError("weights must be >= -1e-12 before clamping")
        w[w < 0] = 0.0
        total = w.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"weights must sum to 1 within 1e-10 (got {total!r})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "constraint_slacks", tuple(float(s) for s in self.constraint_slacks))
        object.__setattr__(self, "dual", tuple(float(v) for v in self.dual))
        object.__setattr__(self, "notes", tuple(self.notes))

    def recomputed_objective(self) -> float:
        u = 1.0 / len(self.weights)
        return float(np.sum((self.weights - u) ** 2))

    def to_dict(self) -> dict:
        return {
            "unit_ids": list(self.unit_ids),
            "weights": [float(v) for v in self.weights],
            "objective": self.objective,
            "constraint_slacks": list(self.constraint_slacks),
            "kkt_residual": self.kkt_residual,
            "dual": list(self.dual),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WeightSolution":
        return cls(
            unit_ids=tuple(d["unit_ids"]),
            weights=np.asarray(d["weights"], dtype=float),
            objective=float(d["objective"]),
            constraint_slacks=tuple(d["constraint_slacks"]),
            kkt_residual=float(d["kkt_residual"]),
            dual=tuple(d.get("dual", ())),
            notes=tuple(d.get("notes", ())),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": list(self.unit_ids), "weight": self.weights})


def dump_json(obj: Mapping, path) -> None:
    """Write a report dict as deterministic, diff-friendly JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
