"""Covariance of the integrated limit process, asymptotic variances and Wald tests.

The limit of the pairwise discrepancy vector is Gaussian with covariance
``Gamma``. Each entry is the covariance of

    F_m - G_m,   F_m = int W(x_u, x_v),   G_m = sum_w int c_w(s) W_w(s) ds,

where ``W`` is the Gaussian field with ``E[W(x) W(y)] = l(x) + l(y) - l(x v y)``
and ``c_w(s) = int_0^1 dl/dx_w`` is the derivative of the row integral
``h_w(s) = int_0^1 l(s, t) dt`` of the pair margin. Expanding the four
covariances by hand leaves one- to three-dimensional integrals; where an
integrand is homogeneous the unit cube is reduced to its outer faces.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .models import Family, StdfModel, psi_jacobian
from .quadrature import QuadConfig, adaptive_gl, graded_rule


class GammaAccuracyWarning(RuntimeWarning):
    """A Gamma entry missed the requested quadrature tolerance."""


class NotPSDError(np.linalg.LinAlgError):
    """Gamma has eigenvalues that are too negative to be a covariance matrix."""


class RankDeficientError(np.linalg.LinAlgError):
    """The Jacobian of psi or a variance block is (numerically) singular."""


# --------------------------------------------------------------------------
# pointwise covariances


def _embed(idx, vals, support):
    out = np.zeros(vals.shape[:-1] + (len(support),))
    for j, i in enumerate(idx):
        out[..., support.index(i)] = vals[..., j]
    return out


def cov_wl(model: StdfModel, xm, ym) -> np.ndarray:
    """Covariance ``l(x) + l(y) - l(x v y)`` of the field at two sparse points.

    ``xm`` and ``ym`` are ``(indices, values)`` with values of shape
    ``(..., len(indices))``.
    """
    (ix, xv), (iy, yv) = xm, ym
    ix, iy = tuple(int(i) for i in ix), tuple(int(i) for i in iy)
    xv, yv = np.asarray(xv, dtype=float), np.asarray(yv, dtype=float)
    support = tuple(dict.fromkeys(ix + iy))
    if len(support) > 4:
        raise ValueError("combined support of more than four sites is not supported")
    xe = _embed(ix, xv, support)
    ye = _embed(iy, yv, support)
    xe, ye = np.broadcast_arrays(xe, ye)
    return (model.margin(ix, xv) + model.margin(iy, yv)
            - model.margin(support, np.maximum(xe, ye)))


def cov_b(model: StdfModel, m, mp, x, y) -> np.ndarray:
    """``E[B_m(x) B_m'(y)]`` for pairs ``m``, ``m'`` at points in the unit square."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m, mp = tuple(m), tuple(mp)
    gx = model.gradient(m, x)
    gy = model.gradient(mp, y)
    terms_x = [(1.0, m, x)] + [(-gx[..., j], (m[j],), x[..., j:j + 1]) for j in range(2)]
    terms_y = [(1.0, mp, y)] + [(-gy[..., j], (mp[j],), y[..., j:j + 1]) for j in range(2)]
    total = 0.0
    for (cx, ix, vx), (cy, iy, vy) in product(terms_x, terms_y):
        total = total + cx * cy * cov_wl(model, (ix, vx), (iy, vy))
    return total


# --------------------------------------------------------------------------
# Gamma entries


def _gl_1d(f, quad: QuadConfig) -> float:
    val, _ = adaptive_gl(f, 0.0, 1.0, order=quad.order, tol=quad.tol,
                         max_depth=quad.max_depth)
    return val


class _PairInfo:
    """Row integrals and psi of one pair, with both sites as first argument."""

    def __init__(self, model, pair, quad):
        self.pair = pair
        u, v = pair
        self.psi = float(model.pair_psi(u, v, quad))
        self.model = model
        self._row = {}

    def row(self, w, s):
        u, v = self.pair
        other = v if w == u else u
        return self.model.pair_row(w, other, s)

    def h1(self, w):
        if w not in self._row:
            self._row[w] = float(self.row(w, np.array([1.0]))[0][0])
        return self._row[w]


def _face_integral(f, dim, degree, n):
    """Integral over [0,1]^dim of an f homogeneous of ``degree``, via the faces."""
    if dim == 1:
        raise ValueError("face reduction needs dim >= 2")
    nodes, weights = graded_rule(n, dim - 1)
    total = 0.0
    for j in range(dim):
        pts = np.insert(nodes, j, 1.0, axis=1)
        total += float(weights @ f(pts))
    return total / (dim + degree)


def _k_term(model, m, mp, info, infop, n, quad):
    """``int l(x~ v y~)`` over [0,1]^4 for the pairs ``m`` and ``m'``."""
    shared = set(m) & set(mp)
    if len(shared) == 2:
        u, v = m
        f = lambda z: 4.0 * z * model.margin((u, v), np.column_stack([np.ones_like(z), z]))
        g = lambda z: 4.0 * z * model.margin((u, v), np.column_stack([z, np.ones_like(z)]))
        return (_gl_1d(f, quad) + _gl_1d(g, quad)) / 5.0
    if len(shared) == 1:
        w = shared.pop()
        b = m[0] if m[1] == w else m[1]
        d = mp[0] if mp[1] == w else mp[1]
        idx = (w, b, d)
        f = lambda p: 2.0 * p[:, 0] * model.margin(idx, p)
        return _face_integral(f, 3, 2, n)
    idx = tuple(m) + tuple(mp)
    return _face_integral(lambda p: model.margin(idx, p), 4, 1, n)


def _fg_term(model, m, info, w, infop, n, quad):
    """``Cov(F_m, int c'_w W_w)`` where ``c'`` belongs to the pair ``m'``."""
    h1p = infop.h1(w)
    base = info.psi * (h1p - 0.5) + h1p - infop.psi
    if w in m:
        def f(s):
            hm, _ = info.row(w, s)
            hp, cp = infop.row(w, s)
            return cp * s * hm + hm * (hp - 0.5)
        return base - _gl_1d(f, quad)
    nodes, weights = graded_rule(n, 3)
    _, cp = infop.row(w, nodes[:, 2])
    idx = tuple(m) + (w,)
    return base - float(weights @ (cp * model.margin(idx, nodes)))


def _gg_term(model, w, info, wp, infop, n, quad):
    """``Cov(int c_w W_w, int c'_w' W_w')``."""
    h1, h1p = info.h1(w), infop.h1(wp)
    if w == wp:
        def f(s):
            h, _ = info.row(w, s)
            hp, _ = infop.row(w, s)
            return (h1 - h) * (h1p - hp)
        return _gl_1d(f, quad)
    # int c(x) c'(y) (x + y - l(x, y)) with int c = h(1) - 1/2, int x c = h(1) - psi
    lin = (h1 - info.psi) * (h1p - 0.5) + (h1 - 0.5) * (h1p - infop.psi)
    nodes, weights = graded_rule(n, 2)
    _, c = info.row(w, nodes[:, 0])
    _, cp = infop.row(wp, nodes[:, 1])
    return lin - float(weights @ (c * cp * model.margin((w, wp), nodes)))


def gamma_entry(model: StdfModel, m, mp, quad: QuadConfig = QuadConfig(),
                n_nodes: int | None = None) -> float:
    """Single entry of Gamma for the pairs ``m`` and ``m'``."""
    m, mp = tuple(int(i) for i in m), tuple(int(i) for i in mp)
    n = quad.gamma_nodes if n_nodes is None else n_nodes
    info = _PairInfo(model, m, quad)
    infop = info if set(m) == set(mp) else _PairInfo(model, mp, quad)
    ff = info.psi + infop.psi - _k_term(model, m, mp, info, infop, n, quad)
    fg = sum(_fg_term(model, m, info, w, infop, n, quad) for w in mp)
    gf = sum(_fg_term(model, mp, infop, w, info, n, quad) for w in m)
    gg = sum(_gg_term(model, w, info, wp, infop, n, quad) for w in m for wp in mp)
    return ff - fg - gf + gg


def _entry_key(model, m, mp):
    variants = []
    for a, b in ((m, mp), (mp, m)):
        for aa in (a, a[::-1]):
            for bb in (b, b[::-1]):
                sites = tuple(aa) + tuple(bb)
                pattern = tuple(sites.index(s) for s in sites)
                variants.append((pattern, model.entry_key(sites)))
    return min(variants, key=repr)


@dataclass
class GammaMatrix:
    matrix: np.ndarray
    pairs: list
    quad: QuadConfig
    max_error: float | None = None
    n_unique: int = 0
    meta: dict = field(default_factory=dict)

    def to_files(self, stem) -> None:
        stem = Path(stem)
        np.savetxt(stem.with_suffix(".csv"), self.matrix, delimiter=",", fmt="%.17g")
        side = {"pairs": [list(map(int, p)) for p in self.pairs], "quadrature": self.quad.as_dict(),
                "max_error": self.max_error, "n_unique": self.n_unique, **self.meta}
        stem.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def from_files(cls, stem) -> "GammaMatrix":
        stem = Path(stem)
        side = json.loads(stem.with_suffix(".json").read_text())
        M = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", ndmin=2)
        quad = QuadConfig(**side.pop("quadrature"))
        pairs = [tuple(p) for p in side.pop("pairs")]
        return cls(M, pairs, quad, side.pop("max_error"), side.pop("n_unique"), side)


def gamma_matrix(model: StdfModel, pairs, quad: QuadConfig = QuadConfig(),
                 threads: int = 1, psd_tol: float = 1e-8) -> GammaMatrix:
    """Covariance matrix of the integrated limit process on ``pairs``.

    Entries with identical local geometry are computed once. With
    ``quad.gamma_check_nodes`` set, each entry is recomputed on the coarser
    rule and the largest discrepancy is reported as the error estimate.
    """
    pairs = [tuple(int(i) for i in p) for p in pairs]
    q = len(pairs)
    keys = {}
    slots = {}
    for a in range(q):
        for b in range(a, q):
            key = _entry_key(model, pairs[a], pairs[b])
            keys.setdefault(key, (pairs[a], pairs[b]))
            slots.setdefault(key, []).append((a, b))

    def work(key):
        m, mp = keys[key]
        if model.tail_independent(m, mp):
            # the limit fields of tail independent blocks are independent
            return key, 0.0, 0.0
        val = gamma_entry(model, m, mp, quad)
        err = None
        if quad.gamma_check_nodes:
            err = abs(val - gamma_entry(model, m, mp, quad, quad.gamma_check_nodes))
        return key, val, err

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, list(keys)))
    else:
        results = [work(k) for k in keys]

    G = np.empty((q, q))
    max_err = None
    for key, val, err in results:
        for a, b in slots[key]:
            G[a, b] = G[b, a] = val
        if err is not None:
            max_err = err if max_err is None else max(max_err, err)
    G = 0.5 * (G + G.T)
    if max_err is not None and max_err > quad.gamma_tol * max(1.0, float(np.abs(G).max())):
        warnings.warn(f"Gamma quadrature error estimate {max_err:.2e} exceeds tolerance",
                      GammaAccuracyWarning, stacklevel=2)
    ev = np.linalg.eigvalsh(G)
    norm = float(np.abs(ev).max()) if q else 0.0
    if q and ev.min() < -psd_tol * max(norm, 1e-300) and ev.min() < -1e-12:
        raise NotPSDError(f"Gamma has eigenvalue {ev.min():.3e} (norm {norm:.3e})")
    return GammaMatrix(G, pairs, quad, max_err, len(keys))


# --------------------------------------------------------------------------
# asymptotic variances


@dataclass
class AsympVariance:
    M: np.ndarray
    M_opt: np.ndarray | None
    omega: np.ndarray
    gamma: np.ndarray
    jacobian: np.ndarray


def sandwich(jac, omega, gamma) -> np.ndarray:
    """``(J' W J)^-1 J' W G W J (J' W J)^-1``."""
    A = jac.T @ omega @ jac
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("J' W J is singular") from exc
    M = Ainv @ jac.T @ omega @ gamma @ omega @ jac @ Ainv
    return 0.5 * (M + M.T)


def optimal_variance(jac, gamma) -> np.ndarray:
    """``(J' G^-1 J)^-1``."""
    try:
        A = jac.T @ np.linalg.solve(gamma, jac)
        M = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("optimal variance is not defined") from exc
    return 0.5 * (M + M.T)


def m_matrix(family: Family, theta, sites, pairs, omega=None,
             quad: QuadConfig = QuadConfig(), gamma=None, threads: int = 1) -> AsympVariance:
    """Asymptotic covariance of the pairwise estimator for weight ``omega``.

    ``omega=None`` uses the identity. ``M_opt`` is returned as well.
    """
    model = family.model(theta, sites)
    J, full = psi_jacobian(family, theta, sites, pairs, quad)
    if not full:
        raise RankDeficientError("Jacobian of psi is rank deficient")
    G = gamma_matrix(model, pairs, quad, threads).matrix if gamma is None else np.asarray(gamma)
    W = np.eye(len(pairs)) if omega is None else np.asarray(omega, dtype=float)
    M = sandwich(J, W, G)
    try:
        Mo = optimal_variance(J, G)
    except RankDeficientError:
        Mo = None
    return AsympVariance(M, Mo, W, G, J)


# --------------------------------------------------------------------------
# Wald tests


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    p_value: float
    df: int


def _wald(diff, M, k) -> WaldResult:
    diff = np.atleast_1d(np.asarray(diff, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    try:
        sol = np.linalg.solve(M, diff)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("variance matrix is singular") from exc
    if np.linalg.cond(M) > 1e14:
        raise RankDeficientError("variance matrix is numerically singular")
    stat = max(float(k * diff @ sol), 0.0)
    return WaldResult(stat, float(chi2.sf(stat, len(diff))), len(diff))


def chi2_full(theta_hat, theta0, M, k) -> WaldResult:
    """``k (t - t0)' M^-1 (t - t0)`` against the chi-square law with p degrees."""
    d = np.asarray(theta_hat, dtype=float) - np.asarray(theta0, dtype=float)
    return _wald(d, M, k)


def chi2_sub(restricted_values, M2, k) -> WaldResult:
    """Wald test that ``r`` transformed parameters are zero, with block ``M2``."""
    return _wald(restricted_values, M2, k)


# (alpha, t11, t22, t12) -> (alpha, t11 + t22, t11 - t22, t12)
ISOTROPY_TRANSFORM = np.array([[1.0, 0, 0, 0], [0, 1, 1, 0], [0, 1, -1, 0], [0, 0, 0, 1]])


def isotropy_statistic(theta_hat, k, M_null) -> WaldResult:
    """Isotropy test for ``br_tau`` estimates with ``M`` evaluated under the null."""
    a = ISOTROPY_TRANSFORM
    Mt = a @ np.asarray(M_null) @ a.T
    t = np.asarray(theta_hat, dtype=float)
    return chi2_sub([t[1] - t[2], t[3]], Mt[2:, 2:], k)


def null_isotropic_theta(theta_hat) -> np.ndarray:
    """``(alpha, s/2, s/2, 0)`` with ``s = t11 + t22``."""
    t = np.asarray(theta_hat, dtype=float)
    s = t[1] + t[2]
    return np.array([t[0], s / 2, s / 2, 0.0])


def cache_key(payload: dict) -> str:
    """Stable hash for on-disk Gamma caches."""
    blob = json.dumps(payload, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def load_or_compute_gamma(model, pairs, quad, cache_dir, payload, threads=1):
    """Return ``(GammaMatrix, hit)`` from ``cache_dir`` or compute and store it."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    stem = cache_dir / f"gamma_{cache_key({**payload, 'quad': quad.as_dict()})}"
    if stem.with_suffix(".csv").exists() and stem.with_suffix(".json").exists():
        return GammaMatrix.from_files(stem), True
    G = gamma_matrix(model, pairs, quad, threads)
    G.meta.update(payload)
    G.to_files(stem)
    return G, False


def standard_errors(M, k) -> np.ndarray:
    return np.sqrt(np.maximum(np.diag(M), 0.0) / k)


__all__ = [
    "AsympVariance", "GammaMatrix", "GammaAccuracyWarning", "NotPSDError",
    "RankDeficientError", "WaldResult", "chi2_full", "chi2_sub", "cov_b", "cov_wl",
    "gamma_entry", "gamma_matrix", "isotropy_statistic", "m_matrix", "null_isotropic_theta",
    "optimal_variance", "sandwich", "standard_errors", "load_or_compute_gamma",
]
