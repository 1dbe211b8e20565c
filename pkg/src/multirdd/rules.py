"""Treatment assignment and neighborhood membership for every unit.

A unit triggers rule j when all of the rule's clauses hold, and is treated
when any rule triggers.  Neighborhood membership per rule is the product of
closed intervals around the rule's cutoffs; overall membership is again the
OR across rules.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .model import Comparator, DesignView, NeighborhoodSpec, RuleSet

__all__ = ["AssignmentTable", "assign", "neighborhood_membership", "assignment_table"]


class AssignmentTable:
    """Per-unit Z/N indicators, overall and per rule."""

    def __init__(self, unit_ids: pd.Series, z: dict[int, np.ndarray] | None,
                 n: dict[int, np.ndarray] | None):
        self.unit_ids = unit_ids.reset_index(drop=True)
        self.z_by_rule = {} if z is None else {j: np.asarray(v, bool) for j, v in z.items()}
        self.n_by_rule = {} if n is None else {j: np.asarray(v, bool) for j, v in n.items()}

    @property
    def z(self) -> np.ndarray:
        if not self.z_by_rule:
            raise ValueError("assignment columns not computed")
        return np.logical_or.reduce(list(self.z_by_rule.values()))

    @property
    def in_neighborhood(self) -> np.ndarray:
        if not self.n_by_rule:
            raise ValueError("neighborhood columns not computed")
        return np.logical_or.reduce(list(self.n_by_rule.values()))

    def triggering_rules(self, i: int) -> set[int]:
        return {j for j, v in self.z_by_rule.items() if v[i]}

    def neighborhood_rules(self, i: int) -> set[int]:
        return {j for j, v in self.n_by_rule.items() if v[i]}

    def merged(self, other: "AssignmentTable") -> "AssignmentTable":
        z = dict(self.z_by_rule) or dict(other.z_by_rule)
        n = dict(self.n_by_rule) or dict(other.n_by_rule)
        return AssignmentTable(self.unit_ids, z, n)

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"unit_id": self.unit_ids})
        for j in sorted(self.z_by_rule):
            out[f"z_rule_{j}"] = self.z_by_rule[j].astype(int)
        if self.z_by_rule:
            out["z"] = self.z.astype(int)
        for j in sorted(self.n_by_rule):
            out[f"n_rule_{j}"] = self.n_by_rule[j].astype(int)
        if self.n_by_rule:
            out["n"] = self.in_neighborhood.astype(int)
        return out

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _clause_holds(values: np.ndarray, cutoff: float, comparator: Comparator,
                  rules: RuleSet) -> np.ndarray:
    v = rules.snap(values)
    c = rules.snap_scalar(cutoff)
    if rules.grid_resolution is not None:
        # integer grid units: exact comparisons
        if comparator is Comparator.AT_OR_BELOW:
            return v <= c
        return v < c
    if comparator is Comparator.AT_OR_BELOW:
        return v <= c
    return v < c


def assign(view: DesignView, rules: RuleSet) -> AssignmentTable:
    """Evaluate every rule's assignment indicator on the view."""
    z = {}
    for rule in rules.rules:
        hold = np.ones(view.n, dtype=bool)
        for clause in rule.clauses:
            hold &= _clause_holds(
                view.running_values(clause.running_variable),
                clause.cutoff, clause.comparator, rules,
            )
        z[rule.rule_id] = hold
    return AssignmentTable(view.unit_ids(), z, None)


def neighborhood_membership(
    view: DesignView, rules: RuleSet, nbhd: NeighborhoodSpec
) -> AssignmentTable:
    """Evaluate per-rule neighborhood membership (closed intervals)."""
    if not nbhd.covers(rules):
        raise ValueError("neighborhood spec does not cover every clause of the rules")
    n = {}
    for rule in rules.rules:
        inside = np.ones(view.n, dtype=bool)
        for clause in rule.clauses:
            lo, hi = nbhd.interval(rules, rule.rule_id, clause.running_variable)
            v = rules.snap(view.running_values(clause.running_variable))
            lo_s, hi_s = rules.snap_scalar(lo), rules.snap_scalar(hi)
            inside &= (v >= lo_s) & (v <= hi_s)
        n[rule.rule_id] = inside
    return AssignmentTable(view.unit_ids(), None, n)


def assignment_table(
    view: DesignView, rules: RuleSet, nbhd: NeighborhoodSpec
) -> AssignmentTable:
    """Z and N columns together."""
    return assign(view, rules).merged(neighborhood_membership(view, rules, nbhd))
