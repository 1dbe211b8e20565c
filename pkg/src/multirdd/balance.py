"""Balance diagnostics and the two tests used for neighborhood selection:
the permutational t-test on matched-pair differences and the exact
cross-match test for multivariate balance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, sparse

__all__ = [
    "BalanceFunction",
    "BalanceFunctionSet",
    "standardized_differences",
    "permutational_t_test",
    "optimal_nonbipartite_matching",
    "cross_match_test",
    "cross_match_null",
    "CrossMatchResult",
    "mahalanobis_distances",
]


# ---------------------------------------------------------------------------
# balance functions

@dataclass(frozen=True)
class BalanceFunction:
    """A named transformation of the covariates used in balance constraints.

    kind: "raw" (the column itself), "indicator" (column == level),
    "square" (column squared), "product" (product of two columns).
    """

    name: str
    kind: str
    columns: tuple[str, ...]
    level: object = None

    def __post_init__(self):
        if self.kind not in ("raw", "indicator", "square", "product"):
            raise ValueError(f"unknown balance function kind {self.kind!r}")
        object.__setattr__(self, "columns", tuple(self.columns))
        n_needed = 2 if self.kind == "product" else 1
        if len(self.columns) != n_needed:
            raise ValueError(f"{self.kind} balance function needs {n_needed} column(s)")

    def evaluate(self, df: pd.DataFrame) -> np.ndarray:
        if self.kind == "raw":
            return df[self.columns[0]].to_numpy(dtype=float)
        if self.kind == "indicator":
            return (df[self.columns[0]] == self.level).to_numpy(dtype=float)
        if self.kind == "square":
            return df[self.columns[0]].to_numpy(dtype=float) ** 2
        a = df[self.columns[0]].to_numpy(dtype=float)
        b = df[self.columns[1]].to_numpy(dtype=float)
        return a * b


@dataclass(frozen=True)
class BalanceFunctionSet:
    functions: tuple[BalanceFunction, ...]
    tolerances: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "tolerances", tuple(float(t) for t in self.tolerances))
        if not self.functions:
            raise ValueError("need at least one balance function")
        if len(self.functions) != len(self.tolerances):
            raise ValueError("one tolerance per balance function")
        if any(t < 0 for t in self.tolerances):
            raise ValueError("tolerances must be >= 0")
        names = [f.name for f in self.functions]
        if len(set(names)) != len(names):
            raise ValueError("balance function names must be unique")

    def evaluate(self, df: pd.DataFrame) -> pd.DataFrame:
        cols = {f.name: f.evaluate(df) for f in self.functions}
        return pd.DataFrame(cols, index=df.index)

    def to_dict(self) -> dict:
        return {
            "functions": [
                {"name": f.name, "kind": f.kind, "columns": list(f.columns),
                 "level": f.level}
                for f in self.functions
            ],
            "tolerances": list(self.tolerances),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BalanceFunctionSet":
        return cls(
            functions=tuple(
                BalanceFunction(
                    name=f["name"], kind=f["kind"], columns=tuple(f["columns"]),
                    level=f.get("level"),
                )
                for f in d["functions"]
            ),
            tolerances=tuple(d["tolerances"]),
        )


# ---------------------------------------------------------------------------
# standardized differences

@dataclass(frozen=True)
class StandardizedDifference:
    column: str
    value: float
    degenerate: bool = False


def standardized_differences(
    treated: pd.DataFrame,
    control: pd.DataFrame,
    columns: Sequence[str],
    pooled_sd: Mapping[str, float] | None = None,
    treated_weights: np.ndarray | None = None,
    control_weights: np.ndarray | None = None,
) -> list[StandardizedDifference]:
    """(mean_T - mean_C) / pooled pre-matching SD, per column.

    ``pooled_sd`` supplies the pre-matching denominator; when omitted it is
    computed from the two groups passed in (sqrt of the average of the two
    group variances).  Optional weights produce weighted group means.  A zero
    denominator yields 0 when the means agree and a degenerate flag otherwise.
    """
    if len(treated) < 2 or len(control) < 2:
        raise ValueError("need at least 2 units per group")
    out = []
    for col in columns:
        xt = treated[col].to_numpy(dtype=float)
        xc = control[col].to_numpy(dtype=float)
        mt = float(np.average(xt, weights=treated_weights))
        mc = float(np.average(xc, weights=control_weights))
        if pooled_sd is not None:
            sd = float(pooled_sd[col])
        else:
            sd = math.sqrt(0.5 * (np.var(xt, ddof=1) + np.var(xc, ddof=1)))
        if sd <= 0:
            if math.isclose(mt, mc, rel_tol=0.0, abs_tol=1e-12):
                out.append(StandardizedDifference(col, 0.0))
            else:
                out.append(StandardizedDifference(col, math.inf, degenerate=True))
            continue
        out.append(StandardizedDifference(col, (mt - mc) / sd))
    return out


def pooled_pre_matching_sd(
    treated: pd.DataFrame, control: pd.DataFrame, columns: Sequence[str]
) -> dict[str, float]:
    return {
        c: math.sqrt(
            0.5
            * (
                np.var(treated[c].to_numpy(dtype=float), ddof=1)
                + np.var(control[c].to_numpy(dtype=float), ddof=1)
            )
        )
        for c in columns
    }


# ---------------------------------------------------------------------------
# permutational t-test (random sign flips of pair differences)

EXACT_FLIP_LIMIT = 20


def _signflip_exact_count(diffs: np.ndarray, observed: float) -> Fraction:
    """Exact count of sign patterns with |mean| >= |observed|, as a fraction."""
    n = diffs.size
    total = 0
    # enumerate in chunks to bound memory at 2^20 * 8 bytes per chunk
    chunk = 1 << min(n, 16)
    base = np.arange(chunk, dtype=np.uint64)
    thr = abs(observed) * n - 1e-12 * max(1.0, abs(observed) * n)
    for start in range(0, 1 << n, chunk):
        codes = base + np.uint64(start)
        signs = ((codes[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.int8)
        sums = (diffs[None, :] * (2 * signs - 1)).sum(axis=1)
        total += int((np.abs(sums) >= thr).sum())
    return Fraction(total, 1 << n)


def permutational_t_test(
    pair_differences: Sequence[float],
    draws: int = 4000,
    seed: int | np.random.SeedSequence | None = None,
    exact_limit: int = EXACT_FLIP_LIMIT,
) -> float:
    """Two-sided p-value of the mean pair difference under random sign flips.

    Exact enumeration of all 2^I sign patterns when I <= ``exact_limit``;
    otherwise Monte Carlo with the add-one estimator (b + 1) / (B + 1).
    """
    d = np.asarray(list(pair_differences), dtype=float)
    if d.size < 1:
        raise ValueError("need at least one pair")
    observed = float(d.mean())
    if d.size <= exact_limit:
        return float(_signflip_exact_count(d, observed))
    if draws < 1:
        raise ValueError("draws must be >= 1 when exact enumeration is unavailable")
    rng = np.random.default_rng(seed)
    thr = abs(observed) * d.size - 1e-12 * max(1.0, abs(observed) * d.size)
    hits = 0
    block = max(1, min(draws, (1 << 22) // max(1, d.size)))
    left = draws
    while left > 0:
        b = min(block, left)
        signs = rng.integers(0, 2, size=(b, d.size), dtype=np.int8) * 2 - 1
        sums = signs @ d
        hits += int((np.abs(sums) >= thr).sum())
        left -= b
    return (hits + 1) / (draws + 1)


# ---------------------------------------------------------------------------
# optimal non-bipartite matching

def optimal_nonbipartite_matching(
    distance: np.ndarray,
) -> tuple[list[tuple[int, int]], float]:
    """Minimum-total-distance perfect matching of N units.

    Solved exactly as a 0-1 program over edges with per-node degree-one
    constraints (HiGHS branch and bound certifies optimality).  Odd N is
    handled by a phantom unit at zero distance to everyone; its partner is
    dropped from the result.

    Returns (pairs, total_distance) with index pairs into the input matrix.
    """
    D = np.asarray(distance, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance must be a square matrix")
    if np.isnan(D).any():
        raise ValueError("distance matrix contains NaN")
    if not np.allclose(D, D.T, rtol=0.0, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    n = D.shape[0]
    if n == 0:
        return [], 0.0
    phantom = n % 2 == 1
    if phantom:
        D = np.pad(D, ((0, 1), (0, 1)), constant_values=0.0)
        n += 1
    if n == 2:
        pairs = [(0, 1)]
        total = float(D[0, 1])
    else:
        iu, ju = np.triu_indices(n, k=1)
        cost = D[iu, ju]
        nv = cost.size
        rows = np.concatenate([iu, ju])
        cols = np.concatenate([np.arange(nv), np.arange(nv)])
        A = sparse.csr_matrix((np.ones(2 * nv), (rows, cols)), shape=(n, nv))
        res = optimize.milp(
            cost,
            constraints=optimize.LinearConstraint(A, lb=1, ub=1),
            integrality=np.ones(nv),
            bounds=optimize.Bounds(0, 1),
        )
        if res.status != 0:
            raise RuntimeError(f"matching solver failed: {res.message}")
        sel = res.x > 0.5
        pairs = list(zip(iu[sel].tolist(), ju[sel].tolist()))
        total = float(cost[sel].sum())
    if phantom:
        pairs = [(a, b) for a, b in pairs if a < n - 1 and b < n - 1]
    return pairs, total


def mahalanobis_distances(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pairwise Mahalanobis distances with a rank-based fallback.

    Returns (matrix, used_rank_fallback).  When the pooled covariance is
    singular the rows are replaced by per-column ranks scaled to [0, 1] and
    plain Euclidean distance is used on those.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    fallback = False
    if n > p:
        cov = np.cov(x, rowvar=False)
        cov = np.atleast_2d(cov)
        try:
            chol = np.linalg.cholesky(cov)
            z = np.linalg.solve_triangular = None  # placeholder, see below
        except np.linalg.LinAlgError:
            chol = None
        if chol is not None:
            from scipy.linalg import solve_triangular

            z = solve_triangular(chol, (x - x.mean(axis=0)).T, lower=True).T
        else:
            fallback = True
    else:
        fallback = True
    if fallback:
        from scipy.stats import rankdata

        z = np.column_stack(
            [rankdata(x[:, j]) / n for j in range(p)]
        )
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2)), fallback


# ---------------------------------------------------------------------------
# cross-match test

@dataclass(frozen=True)
class CrossMatchResult:
    a1: int
    n_treated: int
    n_control: int
    pvalue: float
    matching_cost: float
    rank_fallback: bool = False
    subsampled: bool = False

    @property
    def n_total(self) -> int:
        return self.n_treated + self.n_control


def cross_match_null(n: int, m: int) -> dict[int, Fraction]:
    """Exact null distribution of the cross-match count A1 for group sizes n, m.

    P(A1 = a) = 2^a (N/2)! / (a! ((n-a)/2)! ((m-a)/2)!) / C(N, n), where terms
    with negative or non-integer factorial arguments are zero.  Computed in
    exact rational arithmetic, so the masses sum to exactly one.
    """
    N = n + m
    if N % 2 == 1:
        raise ValueError("N must be even (add a phantom unit first)")
    denom = math.comb(N, n)
    half = math.factorial(N // 2)
    out: dict[int, Fraction] = {}
    for a in range(0, min(n, m) + 1):
        if (n - a) % 2 or (m - a) % 2:
            continue
        num = (2 ** a) * half
        den = (
            math.factorial(a)
            * math.factorial((n - a) // 2)
            * math.factorial((m - a) // 2)
        )
        out[a] = Fraction(num, den * denom)
    return out


def cross_match_test(
    x_test: np.ndarray,
    labels: np.ndarray,
    max_units: int | None = None,
    seed: int | np.random.SeedSequence | None = None,
) -> CrossMatchResult:
    """Exact cross-match test that the two groups share a multivariate law.

    All units are pair-matched at minimum total Mahalanobis distance on
    ``x_test`` ignoring the labels; the statistic a1 counts pairs with one
    unit from each group, and low counts are evidence against balance.  The
    p-value is the exact lower tail of the null distribution of A1.

    ``max_units`` caps the compute cost of the optimal matching: larger
    samples are reduced to a seeded random subsample (still a valid test,
    flagged in the result).
    """
    x = np.asarray(x_test, dtype=float)
    z = np.asarray(labels).astype(bool)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != z.size:
        raise ValueError("labels and rows disagree")
    if z.all() or not z.any():
        raise ValueError("both groups must be nonempty")
    subsampled = False
    if max_units is not None and x.shape[0] > max_units:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(x.shape[0], size=max_units, replace=False))
        x, z = x[keep], z[keep]
        subsampled = True
        if z.all() or not z.any():
            raise ValueError("subsample lost one of the groups; raise max_units")
    D, fallback = mahalanobis_distances(x)
    pairs, cost = optimal_nonbipartite_matching(D)
    # a phantom partner (odd N) removes one unit from the counted groups
    used = np.zeros(z.size, dtype=bool)
    a1 = 0
    for i, j in pairs:
        used[i] = used[j] = True
        a1 += int(z[i] != z[j])
    n = int(z[used].sum())
    m = int(used.sum() - n)
    null = cross_match_null(n, m)
    p = float(sum(v for a, v in null.items() if a <= a1))
    return CrossMatchResult(
        a1=a1, n_treated=n, n_control=m, pvalue=min(1.0, p),
        matching_cost=cost, rank_fallback=fallback, subsampled=subsampled,
    )
