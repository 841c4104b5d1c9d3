"""Gauss-Legendre rules on the unit cube and a vectorised adaptive 1-D integrator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class QuadratureError(RuntimeError):
    """Adaptive integration did not reach the requested tolerance."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature settings shared by the psi map and the Gamma matrix.

    ``order`` and ``tol`` drive the adaptive pair integrals; ``gamma_nodes``
    is the per-axis Gauss-Legendre order for the Gamma entries and
    ``gamma_check_nodes`` the coarser rule used for their error estimate
    (``None`` disables the check).
    """

    order: int = 24
    tol: float = 1e-9
    max_depth: int = 40
    gamma_nodes: int = 16
    gamma_check_nodes: int | None = 12
    gamma_tol: float = 1e-6

    def as_dict(self) -> dict:
        return {
            "order": self.order,
            "tol": self.tol,
            "max_depth": self.max_depth,
            "gamma_nodes": self.gamma_nodes,
            "gamma_check_nodes": self.gamma_check_nodes,
            "gamma_tol": self.gamma_tol,
        }


@lru_cache(maxsize=None)
def gl01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = (x + 1.0) / 2.0
    w = w / 2.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def tensor_rule(n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre rule on [0, 1]^dim.

    Returns nodes of shape (n**dim, dim) and matching weights.
    """
    x, w = gl01(n)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=None)
def graded_rule(n: int, dim: int, power: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Tensor rule on [0, 1]^dim after the substitution ``x = u**power`` per axis.

    Clusters nodes at the lower faces, where integrands that depend on
    ``log x`` lose smoothness.
    """
    u, w = gl01(n)
    x = u ** power
    wx = power * u ** (power - 1) * w
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([wx] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def integrate_cube(f, dim: int, n: int) -> float:
    """Integrate a vectorised ``f`` over [0, 1]^dim with an n-point tensor rule."""
    nodes, weights = tensor_rule(n, dim)
    return float(np.dot(weights, f(nodes)))


def adaptive_gl(f, a: float, b: float, *, order: int = 24, tol: float = 1e-9,
                max_depth: int = 40) -> tuple[float, float]:
    """Adaptive Gauss-Legendre integration of a vectorised scalar function.

    Each panel is compared against the sum over its two halves; panels are
    bisected until the local discrepancy is below ``tol`` scaled by the panel
    width. Every level is evaluated in a single call to ``f``.

    Returns ``(value, error_estimate)``; raises :class:`QuadratureError` when
    ``max_depth`` bisections do not suffice.
    """
    x, w = gl01(order)
    panels = np.array([[a, b]], dtype=float)
    total = 0.0
    err_total = 0.0
    width_total = b - a

    def rule(p):
        lo, hi = p[:, :1], p[:, 1:]
        pts = lo + (hi - lo) * x
        vals = f(pts.ravel()).reshape(pts.shape)
        return (hi[:, 0] - lo[:, 0]) * (vals @ w)

    whole = rule(panels)
    for _ in range(max_depth):
        mid = panels.mean(axis=1)
        left = np.column_stack([panels[:, 0], mid])
        right = np.column_stack([mid, panels[:, 1]])
        halves = rule(np.vstack([left, right]))
        m = len(panels)
        fine = halves[:m] + halves[m:]
        err = np.abs(fine - whole)
        width = panels[:, 1] - panels[:, 0]
        ok = err <= tol * np.maximum(width / width_total, 1e-3)
        total += fine[ok].sum()
        err_total += err[ok].sum()
        if ok.all():
            return total, err_total
        unresolved = float(err[~ok].sum())
        panels = np.vstack([left[~ok], right[~ok]])
        whole = np.concatenate([halves[:m][~ok], halves[m:][~ok]])
    raise QuadratureError("adaptive Gauss-Legendre did not converge", err_total + unresolved)
