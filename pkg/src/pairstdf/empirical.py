"""Rank transform and the empirical stable tail dependence function.

The empirical function counts observations whose rank exceeds
``n + 1/2 - k x_j`` in at least one coordinate. Its integrals over unit cubes
are available in closed form: for observation ``i`` the indicator vanishes
exactly on the box ``prod_j [0, t_ij)`` with
``t_ij = clip((n + 1/2 - R_ij) / k, 0, 1)``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np


class TiesWarning(UserWarning):
    """Many tied values in a column; the continuity assumption is doubtful."""


@dataclass(frozen=True)
class DataMatrix:
    """Observations in rows, stations (sites) in columns."""

    values: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("data must be a 2-D array")
        if v.shape[0] < 2:
            raise ValueError("need at least two observations")
        if np.isnan(v).any():
            raise ValueError("missing values must be removed before ranking")
        if np.any(v.max(axis=0) == v.min(axis=0)):
            raise ValueError("constant column")
        ids = tuple(self.ids) if self.ids else tuple(f"s{j + 1}" for j in range(v.shape[1]))
        if len(ids) != v.shape[1]:
            raise ValueError("number of column ids does not match the data")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ids", ids)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_csv(cls, path) -> "DataMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        vals = np.array([[float(x) if x != "" else np.nan for x in r] for r in body])
        return cls(vals, tuple(header))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.ids)
            for row in self.values:
                w.writerow([repr(float(x)) for x in row])


@dataclass(frozen=True)
class RankedSample:
    ranks: np.ndarray
    tie_policy: str = "random"
    seed: int | None = 0

    @property
    def n(self) -> int:
        return self.ranks.shape[0]

    @property
    def d(self) -> int:
        return self.ranks.shape[1]

    def clipped(self, k: int, cols=None) -> np.ndarray:
        """``t_ij = clip((n + 1/2 - R_ij) / k, 0, 1)`` for the selected columns."""
        R = self.ranks if cols is None else self.ranks[:, cols]
        return np.clip((self.n + 0.5 - R) / k, 0.0, 1.0)


def rank_transform(data, tie_policy: str = "random", seed: int | None = 0) -> RankedSample:
    """Columnwise ranks 1..n; ties are broken by a seeded random permutation.

    ``tie_policy="forbid"`` raises on any tie instead.
    """
    if isinstance(data, RankedSample):
        return data
    X = data.values if isinstance(data, DataMatrix) else np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need an n x d array with n >= 2")
    if tie_policy not in ("random", "forbid"):
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    n, d = X.shape
    rng = np.random.default_rng(seed)
    ranks = np.empty((n, d), dtype=np.int64)
    for j in range(d):
        col = X[:, j]
        n_tied = n - len(np.unique(col))
        if n_tied:
            if tie_policy == "forbid":
                raise ValueError(f"column {j} has tied values")
            if n_tied > 0.2 * n:
                warnings.warn(f"column {j}: {n_tied} of {n} values are ties", TiesWarning,
                              stacklevel=2)
        order = np.lexsort((rng.random(n), col))
        ranks[order, j] = np.arange(1, n + 1)
    ranks.setflags(write=False)
    return RankedSample(ranks, tie_policy, seed)


def _sparse(x, d):
    if isinstance(x, dict):
        idx = np.fromiter(x.keys(), dtype=int)
        val = np.fromiter(x.values(), dtype=float)
    elif isinstance(x, tuple) and len(x) == 2 and np.ndim(x[0]) == 1:
        idx = np.asarray(x[0], dtype=int)
        val = np.asarray(x[1], dtype=float)
    else:
        val = np.asarray(x, dtype=float)
        if val.shape != (d,):
            raise ValueError(f"dense argument must have length {d}")
        idx = np.flatnonzero(val)
        val = val[idx]
    return idx, val


def stdf_hat(rs: RankedSample, k: int, x) -> float:
    """Empirical stable tail dependence function at ``x``.

    ``x`` is a dense vector, a ``{index: value}`` dict or an
    ``(indices, values)`` tuple; omitted coordinates are zero.
    """
    _check_k(rs, k)
    idx, val = _sparse(x, rs.d)
    if np.any(val < 0) or np.any(val > rs.n / k):
        raise ValueError("arguments must lie in [0, n/k]")
    if len(idx) == 0:
        return 0.0
    hit = rs.ranks[:, idx] > rs.n + 0.5 - k * val
    return float(hit.any(axis=1).sum() / k)


def stdf_hat_integral(rs: RankedSample, k: int, m) -> float:
    """Exact integral of the empirical function over the unit cube on sites ``m``."""
    _check_k(rs, k)
    T = rs.clipped(k, list(m))
    return float(np.sum(1.0 - np.prod(T, axis=1)) / k)


def pair_integrals(rs: RankedSample, k: int, pairs) -> np.ndarray:
    """Vector of exact unit-square integrals for all ``pairs``."""
    _check_k(rs, k)
    P = np.asarray(pairs, dtype=int).reshape(-1, 2)
    cols = np.unique(P)
    T = rs.clipped(k, cols)
    pos = np.searchsorted(cols, P)
    G = T.T @ T
    return (rs.n - G[pos[:, 0], pos[:, 1]]) / k


def weighted_integral(rs: RankedSample, k: int, weight=None) -> float:
    """Exact integral of ``g * stdf_hat`` over ``[0,1]^d`` on all columns.

    ``weight=None`` means ``g = 1``; an integer ``m`` means ``g(x) = x_m``.
    """
    _check_k(rs, k)
    T = rs.clipped(k)
    if weight is None:
        return float(np.sum(1.0 - np.prod(T, axis=1)) / k)
    m = int(weight)
    rest = np.prod(np.delete(T, m, axis=1), axis=1)
    return float(np.sum(0.5 - 0.5 * T[:, m] ** 2 * rest) / k)


def extremal_coeff_hat(rs: RankedSample, k: int, pair) -> float:
    """Extremal coefficient estimate ``2 * stdf_hat(1/2, 1/2)`` for a pair."""
    u, v = pair
    return 2.0 * stdf_hat(rs, k, {int(u): 0.5, int(v): 0.5})


def _check_k(rs: RankedSample, k: int) -> None:
    if not 1 <= k <= rs.n:
        raise ValueError(f"k must lie in [1, n={rs.n}], got {k}")
