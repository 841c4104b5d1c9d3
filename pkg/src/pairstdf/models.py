"""Parametric stable tail dependence functions and their low-dimensional margins.

Three model classes are provided:

* :class:`LogisticModel` (and the tail-independent block variant
  :class:`BlockLogisticModel`),
* :class:`HuslerReissModel`, parametrised directly by a variogram matrix, with
  the spatial specialisations :class:`BrownResnickModel` and
  :class:`SmithModel`.

Margins are evaluated on at most four sites, which is all the pairwise
estimator and its covariance matrix ever need.

Fitting families (:data:`FAMILIES`) bundle a parameter vector layout, a map
from parameters to a model and a bijection onto unconstrained coordinates used
by the optimizer.
"""

from __future__ import annotations

import csv
import math
import threading
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit, log_ndtr, logit, ndtr

from .mvn import mvn_cdf
from .quadrature import QuadConfig, adaptive_gl, gl01

MAX_MARGIN = 4


class DomainError(ValueError):
    """Argument outside the domain of a stable tail dependence function."""


class DegeneratePairError(ValueError):
    """Two coincident sites: the pairwise dependence scale is undefined."""


class OneSidedDerivativeWarning(RuntimeWarning):
    """A partial derivative was taken at a zero coordinate (one-sided difference)."""


# --------------------------------------------------------------------------
# sites and parameters


@dataclass(frozen=True)
class SiteSet:
    """Planar site coordinates with unique string ids."""

    ids: tuple
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float).reshape(-1, 2)
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != len(coords):
            raise ValueError("number of ids and coordinates differ")
        if len(ids) < 2:
            raise ValueError("a site set needs at least 2 sites")
        if len(set(ids)) != len(ids):
            raise ValueError("site ids must be unique")
        if not np.all(np.isfinite(coords)):
            raise ValueError("site coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_coords(cls, coords, ids=None) -> "SiteSet":
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = np.column_stack([coords, np.zeros_like(coords)])
        if ids is None:
            ids = [f"s{i + 1}" for i in range(len(coords))]
        return cls(tuple(ids), coords)

    @classmethod
    def grid(cls, nx: int, ny: int, spacing: float = 1.0) -> "SiteSet":
        """Regular ``nx`` by ``ny`` grid, x varying fastest."""
        xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
        return cls.from_coords(np.column_stack([xs.ravel(), ys.ravel()]))

    @classmethod
    def line(cls, d: int, spacing: float = 1.0) -> "SiteSet":
        return cls.from_coords(np.arange(d) * spacing)

    @classmethod
    def from_csv(cls, path) -> "SiteSet":
        """Read a CSV with header ``id,x,y``."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"id", "x", "y"} <= set(rows[0]):
            raise ValueError(f"{path}: expected header id,x,y")
        return cls(tuple(r["id"] for r in rows),
                   np.array([[float(r["x"]), float(r["y"])] for r in rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y"])
            for i, (x, y) in zip(self.ids, self.coords):
                w.writerow([i, repr(float(x)), repr(float(y))])

    def index(self, site_id: str) -> int:
        return self.ids.index(site_id)

    def distance(self, u: int, v: int) -> float:
        return float(np.hypot(*(self.coords[u] - self.coords[v])))

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


@dataclass(frozen=True)
class LogisticParams:
    theta: float

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise DomainError(f"logistic theta must lie in (0, 1], got {self.theta}")


@dataclass(frozen=True)
class SmithParams:
    sigma11: float
    sigma22: float
    sigma12: float

    def __post_init__(self):
        if not (self.sigma11 > 0 and self.sigma22 > 0
                and self.sigma11 * self.sigma22 - self.sigma12 ** 2 > 0):
            raise DomainError("Smith covariance matrix must be positive definite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sigma11, self.sigma12], [self.sigma12, self.sigma22]])

    @classmethod
    def from_matrix(cls, S) -> "SmithParams":
        S = np.asarray(S, dtype=float)
        return cls(float(S[0, 0]), float(S[1, 1]), float(0.5 * (S[0, 1] + S[1, 0])))


@dataclass(frozen=True)
class BrownResnickParams:
    """Power variogram with geometric anisotropy.

    ``alpha`` is the smoothness in (0, 2], ``rho`` the range, ``beta`` the
    rotation angle in [0, pi/2) and ``c`` the stretch of the second axis.
    """

    alpha: float
    rho: float
    beta: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise DomainError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not self.rho > 0.0:
            raise DomainError(f"rho must be positive, got {self.rho}")
        if not 0.0 <= self.beta < math.pi / 2:
            raise DomainError(f"beta must lie in [0, pi/2), got {self.beta}")
        if not self.c > 0.0:
            raise DomainError(f"c must be positive, got {self.c}")

    @property
    def transform(self) -> np.ndarray:
        cb, sb = math.cos(self.beta), math.sin(self.beta)
        return np.array([[cb, -sb], [self.c * sb, self.c * cb]])

    @property
    def tau(self) -> "TauMatrix":
        return reparam_tau(self)


@dataclass(frozen=True)
class TauMatrix:
    """Symmetric positive definite metric of the anisotropic variogram."""

    tau11: float
    tau22: float
    tau12: float

    def __post_init__(self):
        if not (self.tau11 > 0 and self.tau11 * self.tau22 - self.tau12 ** 2 > 0):
            raise DomainError("tau matrix must be positive definite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.tau11, self.tau12], [self.tau12, self.tau22]])

    @property
    def is_isotropic(self) -> bool:
        return self.tau11 == self.tau22 and self.tau12 == 0.0


def reparam_tau(params: BrownResnickParams) -> TauMatrix:
    """Metric ``V^T V / rho^2`` of the anisotropic variogram."""
    V = params.transform
    T = V.T @ V / params.rho ** 2
    return TauMatrix(float(T[0, 0]), float(T[1, 1]), float(0.5 * (T[0, 1] + T[1, 0])))


def tau_to_params(tau: TauMatrix, alpha: float) -> BrownResnickParams:
    """Inverse of :func:`reparam_tau`; ``beta`` is normalised to [0, pi/2)."""
    T = np.asarray(tau.matrix if isinstance(tau, TauMatrix) else tau, dtype=float)
    lam, vec = np.linalg.eigh(T)
    if lam[0] <= 0:
        raise DomainError("tau matrix must be positive definite")
    if lam[1] - lam[0] <= 1e-14 * lam[1]:
        return BrownResnickParams(alpha, float(lam[0] ** -0.5), 0.0, 1.0)
    # V = diag(1, c) R(beta): the first row of R(beta) is the eigenvector
    # (cos b, -sin b) with eigenvalue 1/rho^2, and b must fall in [0, pi/2)
    angles = np.mod(np.arctan2(-vec[1], vec[0]), np.pi)
    first = int(np.argmin(np.where(angles < np.pi / 2, angles, np.inf)))
    second = 1 - first
    beta = float(angles[first])
    if beta >= np.pi / 2:  # pragma: no cover - guarded by the argmin above
        beta = 0.0
    return BrownResnickParams(alpha, float(lam[first] ** -0.5), beta,
                              float(math.sqrt(lam[second] / lam[first])))


def smith_to_br(params: SmithParams) -> tuple[BrownResnickParams, TauMatrix]:
    """Brown-Resnick parameters with alpha = 2 reproducing a Smith model."""
    T = np.linalg.inv(params.matrix) / 2.0
    tau = TauMatrix(float(T[0, 0]), float(T[1, 1]), float(T[0, 1]))
    return tau_to_params(tau, 2.0), tau


def br_to_smith(params: BrownResnickParams) -> SmithParams:
    if params.alpha != 2.0:
        raise DomainError("only alpha = 2 corresponds to a Smith model")
    return SmithParams.from_matrix(np.linalg.inv(2.0 * reparam_tau(params).matrix))


def variogram(params, h) -> np.ndarray:
    """Semi-variogram at displacement(s) ``h`` of shape (..., 2).

    For Brown-Resnick parameters this is ``(h^T T h)^(alpha/2)`` with ``T``
    the tau metric; for Smith parameters it is ``h^T Sigma^-1 h / 2``.
    """
    h = np.asarray(h, dtype=float)
    if isinstance(params, SmithParams):
        Q = np.linalg.inv(params.matrix)
        return 0.5 * np.einsum("...i,ij,...j->...", h, Q, h)
    if isinstance(params, TauMatrix):
        raise TypeError("pass BrownResnickParams; TauMatrix lacks alpha")
    T = reparam_tau(params).matrix
    quad = np.maximum(np.einsum("...i,ij,...j->...", h, T, h), 0.0)
    return quad ** (params.alpha / 2.0)


def pair_dependence_scale(params, su, sv) -> float:
    """Pairwise scale ``a = sqrt(2 gamma(su - sv))``."""
    h = np.asarray(su, dtype=float) - np.asarray(sv, dtype=float)
    if not np.any(h):
        raise DegeneratePairError("coincident sites have no dependence scale")
    return float(np.sqrt(2.0 * variogram(params, h)))


# --------------------------------------------------------------------------
# closed forms for bivariate Husler-Reiss integrals


def hr_pair_psi(a) -> np.ndarray:
    """Integral of the bivariate Husler-Reiss function over the unit square."""
    a = np.asarray(a, dtype=float)
    return ndtr(a / 2) + np.exp(a * a + log_ndtr(-1.5 * a)) / 3.0


def hr_pair_row(a: float, s) -> tuple[np.ndarray, np.ndarray]:
    """Row integral ``h(s) = int_0^1 l(s, t) dt`` and its derivative ``h'(s)``.

    The derivative equals ``int_0^1 dl/dx(s, t) dt``.
    """
    s = np.asarray(s, dtype=float)
    pos = s > 0
    ls = np.log(np.where(pos, s, 1.0)) / a
    with np.errstate(over="ignore"):
        tail = np.exp(a * a + log_ndtr(-1.5 * a - ls))
    c = ndtr(a / 2 + ls) + s * tail
    h = s * c + 0.5 * ndtr(a / 2 - ls) - 0.5 * s * s * tail
    return np.where(pos, h, 0.5), np.where(pos, c, 0.0)


# --------------------------------------------------------------------------
# models


def _as_index(idx, d: int, max_size=MAX_MARGIN) -> tuple:
    idx = tuple(int(i) for i in np.atleast_1d(idx))
    if len(idx) < 1 or (max_size is not None and len(idx) > max_size):
        raise DomainError(f"margins of size 1-{max_size} are supported, got {len(idx)}")
    if len(set(idx)) != len(idx):
        raise DomainError("margin indices must be distinct")
    if min(idx) < 0 or max(idx) >= d:
        raise DomainError(f"margin index out of range for {d} sites")
    return idx


class StdfModel:
    """Base class: subclasses implement ``_margin_pos`` and ``_grad_pos``.

    Both receive a tuple of distinct site indices and an (N, s) array of
    strictly positive arguments.
    """

    n_sites: int
    max_margin: int | None = MAX_MARGIN

    # --- public API -----------------------------------------------------
    def margin(self, idx, x) -> np.ndarray:
        idx = _as_index(idx, self.n_sites, self.max_margin)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(idx):
            raise DomainError("argument length does not match the margin")
        if np.any(x < 0) or np.any(np.isnan(x)):
            raise DomainError("stable tail dependence arguments must be nonnegative")
        shape = x.shape[:-1]
        x2 = x.reshape(-1, len(idx))
        return self._margin_masked(idx, x2).reshape(shape)

    def gradient(self, idx, x) -> np.ndarray:
        """Partial derivatives of the margin; shape matches ``x``."""
        idx = _as_index(idx, self.n_sites, self.max_margin)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(idx):
            raise DomainError("argument length does not match the margin")
        if np.any(x < 0):
            raise DomainError("stable tail dependence arguments must be nonnegative")
        shape = x.shape
        x2 = x.reshape(-1, len(idx))
        zero = x2 <= 0
        if len(idx) == 1:
            return np.ones(shape)
        if not zero.any():
            return self._grad_pos(idx, x2).reshape(shape)
        warnings.warn("derivative at a zero coordinate taken one-sided",
                      OneSidedDerivativeWarning, stacklevel=2)
        out = np.empty_like(x2)
        inner = ~zero.any(axis=1)
        if inner.any():
            out[inner] = self._grad_pos(idx, x2[inner])
        rows = np.flatnonzero(~inner)
        scale = np.maximum(x2[rows].max(axis=1), 1e-300)
        for j in range(len(idx)):
            e = np.zeros(len(idx))
            e[j] = 1.0
            step = 1e-6 * scale
            xr = x2[rows]
            fp = self._margin_masked(idx, xr + step[:, None] * e)
            if np.all(xr[:, j] > 0):
                fm = self._margin_masked(idx, xr - step[:, None] * e)
                out[rows, j] = (fp - fm) / (2 * step)
            else:
                f0 = self._margin_masked(idx, xr)
                fm = self._margin_masked(idx, np.maximum(xr - step[:, None] * e, 0.0))
                central = xr[:, j] > step
                out[rows, j] = np.where(central, (fp - fm) / (2 * step), (fp - f0) / step)
        return out.reshape(shape)

    def pair_psi(self, u: int, v: int, quad: QuadConfig = QuadConfig()) -> float:
        """Integral of the (u, v) margin over the unit square."""
        # homogeneity reduces the square to its two outer edges
        f = lambda t: (self.margin((u, v), np.column_stack([np.ones_like(t), t]))
                       + self.margin((u, v), np.column_stack([t, np.ones_like(t)])))
        val, _ = adaptive_gl(f, 0.0, 1.0, order=quad.order, tol=quad.tol,
                             max_depth=quad.max_depth)
        return val / 3.0

    def psi_pairs(self, pairs, quad: QuadConfig = QuadConfig()) -> np.ndarray:
        return np.array([self.pair_psi(int(u), int(v), quad) for u, v in pairs])

    def pair_row(self, u: int, v: int, s) -> tuple[np.ndarray, np.ndarray]:
        """``h(s) = int_0^1 l_uv(s, t) dt`` and ``h'(s)``, with ``s`` on site ``u``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x, w = gl01(40)
        h = np.zeros_like(s)
        c = np.zeros_like(s)
        for lo, hi in ((np.zeros_like(s), s), (s, np.ones_like(s))):
            t = lo[:, None] + (hi - lo)[:, None] * x
            ss = np.broadcast_to(s[:, None], t.shape)
            pts = np.stack([ss, t], axis=-1).reshape(-1, 2)
            pts = np.maximum(pts, 1e-300)
            val = self.margin((u, v), pts).reshape(t.shape)
            grad = self._grad_pos((u, v), pts)[:, 0].reshape(t.shape)
            h += (hi - lo) * (val @ w)
            c += (hi - lo) * (grad @ w)
        return h, c

    def tail_independent(self, a, b) -> bool:
        """True when the sites ``a`` are tail independent of the sites ``b``."""
        return False

    def entry_key(self, idx) -> tuple:
        """Hashable summary of the sub-model on the ordered sites ``idx``."""
        raise NotImplementedError

    # --- helpers --------------------------------------------------------
    def _margin_masked(self, idx, x):
        if len(idx) == 1:
            return x[:, 0].copy()
        zero = x <= 0
        if not zero.any():
            return self._margin_pos(idx, x)
        out = np.zeros(len(x))
        patterns, inverse = np.unique(zero, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        for p, pat in enumerate(patterns):
            rows = inverse == p
            keep = np.flatnonzero(~pat)
            if len(keep) == 0:
                continue
            sub = tuple(idx[j] for j in keep)
            xs = x[np.ix_(rows, keep)]
            out[rows] = xs[:, 0] if len(sub) == 1 else self._margin_pos(sub, xs)
        return out

    def _margin_pos(self, idx, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _grad_pos(self, idx, x):  # pragma: no cover - abstract
        raise NotImplementedError


class BlockLogisticModel(StdfModel):
    """Logistic dependence within blocks, tail independence between blocks.

    The closed form is cheap in any dimension, so margins are not capped.
    """

    max_margin = None

    def __init__(self, theta: float, labels):
        LogisticParams(theta)
        self.theta = float(theta)
        self.labels = np.asarray(labels)
        self.n_sites = len(self.labels)
        self._psi_cache: dict = {}

    @classmethod
    def regions(cls, theta: float, d: int, r: int) -> "BlockLogisticModel":
        if d % r:
            raise ValueError("d must be a multiple of the number of regions")
        return cls(theta, np.repeat(np.arange(r), d // r))

    def _groups(self, idx):
        lab = self.labels[list(idx)]
        return [np.flatnonzero(lab == g) for g in dict.fromkeys(lab.tolist())]

    def _logistic(self, x):
        m = x.max(axis=1)
        safe = np.where(m > 0, m, 1.0)
        with np.errstate(under="ignore"):
            r = (x / safe[:, None]) ** (1.0 / self.theta)
        return m * r.sum(axis=1) ** self.theta

    def _margin_masked(self, idx, x):
        return sum(self._logistic(x[:, g]) for g in self._groups(idx))

    def _margin_pos(self, idx, x):
        return self._margin_masked(idx, x)

    def _grad_pos(self, idx, x):
        out = np.empty_like(x)
        for g in self._groups(idx):
            lg = self._logistic(x[:, g])
            with np.errstate(under="ignore"):
                out[:, g] = (x[:, g] / lg[:, None]) ** (1.0 / self.theta - 1.0)
        return out

    def pair_psi(self, u, v, quad=QuadConfig()):
        if self.labels[u] != self.labels[v]:
            return 1.0
        key = (quad.order, quad.tol)
        if key not in self._psi_cache:
            th = self.theta
            f = lambda t: np.exp(th * np.log1p(t ** (1.0 / th)))
            val, _ = adaptive_gl(f, 0.0, 1.0, order=quad.order, tol=quad.tol,
                                 max_depth=quad.max_depth)
            self._psi_cache[key] = 2.0 * val / 3.0
        return self._psi_cache[key]

    def pair_row(self, u, v, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.labels[u] != self.labels[v]:
            return s + 0.5, np.ones_like(s)
        return super().pair_row(u, v, s)

    def tail_independent(self, a, b):
        la = set(self.labels[list(a)].tolist())
        return la.isdisjoint(self.labels[list(b)].tolist())

    def entry_key(self, idx):
        lab = self.labels[list(idx)].tolist()
        first = {}
        return ("logistic", round(self.theta, 14),
                tuple(first.setdefault(g, len(first)) for g in lab))


class LogisticModel(BlockLogisticModel):
    """Symmetric logistic model ``(sum x_j^(1/theta))^theta`` on ``d`` sites."""

    def __init__(self, theta: float, d: int):
        super().__init__(theta, np.zeros(int(d), dtype=int))


class HuslerReissModel(StdfModel):
    """Husler-Reiss margins from a matrix of pairwise semi-variograms.

    Margins up to size four use the representation as a sum of
    ``x_i * Phi_{s-1}(eta_i; R_i)`` with ``eta_i`` and ``R_i`` built from
    the variogram values; the gradient is the vector of these normal
    probabilities.
    """

    def __init__(self, gamma):
        G = np.array(gamma, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("variogram matrix must be square")
        if not np.allclose(G, G.T) or np.any(np.diag(G) != 0):
            raise ValueError("variogram matrix must be symmetric with zero diagonal")
        G.setflags(write=False)
        self.gamma = G
        self.n_sites = len(G)
        self._lock = threading.Lock()
        self._corr_cache: dict = {}

    def scale(self, u: int, v: int) -> float:
        g = self.gamma[u, v]
        if g <= 0:
            raise DegeneratePairError(f"sites {u} and {v} coincide")
        return math.sqrt(2.0 * g)

    def _structure(self, idx, i):
        """Correlation matrix and eta coefficients for the i-th term of a margin."""
        key = (idx, i)
        hit = self._corr_cache.get(key)
        if hit is not None:
            return hit
        G = self.gamma
        ii = idx[i]
        others = [j for j in idx if j != ii]
        gi = np.array([G[ii, j] for j in others])
        if np.any(gi <= 0):
            raise DegeneratePairError("margin contains coincident sites")
        s = len(others)
        R = np.empty((s, s))
        for a, j in enumerate(others):
            for b, k in enumerate(others):
                R[a, b] = (gi[a] + gi[b] - G[j, k]) / (2.0 * math.sqrt(gi[a] * gi[b]))
        R = np.clip(R, -1.0, 1.0)
        np.fill_diagonal(R, 1.0)
        out = (np.sqrt(gi / 2.0), 1.0 / np.sqrt(2.0 * gi), R)
        with self._lock:
            self._corr_cache[key] = out
        return out

    def _terms(self, idx, x):
        logx = np.log(x)
        probs = np.empty_like(x)
        for i in range(len(idx)):
            shift, inv, R = self._structure(idx, i)
            cols = [j for j in range(len(idx)) if j != i]
            eta = shift + (logx[:, [i]] - logx[:, cols]) * inv
            probs[:, i] = ndtr(eta[:, 0]) if len(cols) == 1 else mvn_cdf(eta, R)
        return probs

    def _margin_pos(self, idx, x):
        return np.sum(x * self._terms(idx, x), axis=1)

    def _grad_pos(self, idx, x):
        return self._terms(idx, x)

    def pair_psi(self, u, v, quad=QuadConfig()):
        return float(hr_pair_psi(self.scale(u, v)))

    def psi_pairs(self, pairs, quad=QuadConfig()):
        P = np.asarray(pairs, dtype=int).reshape(-1, 2)
        g = self.gamma[P[:, 0], P[:, 1]]
        if np.any(g <= 0):
            raise DegeneratePairError("pair of coincident sites")
        return hr_pair_psi(np.sqrt(2.0 * g))

    def pair_row(self, u, v, s):
        return hr_pair_row(self.scale(u, v), np.atleast_1d(np.asarray(s, dtype=float)))

    def entry_key(self, idx):
        G = self.gamma
        return ("hr",) + tuple(round(float(G[a, b]), 12) for a, b in combinations(idx, 2)) \
            + (tuple(idx.index(i) for i in idx),)


class BrownResnickModel(HuslerReissModel):
    """Brown-Resnick process with anisotropic power variogram at fixed sites."""

    def __init__(self, sites: SiteSet, params: BrownResnickParams):
        self.sites = sites
        self.params = params
        diff = sites.coords[:, None, :] - sites.coords[None, :, :]
        super().__init__(variogram(params, diff))


class SmithModel(HuslerReissModel):
    """Gaussian extreme value process: ``a_uv^2 = h^T Sigma^-1 h``."""

    def __init__(self, sites: SiteSet, params: SmithParams):
        self.sites = sites
        self.params = params
        diff = sites.coords[:, None, :] - sites.coords[None, :, :]
        super().__init__(variogram(params, diff))


# --------------------------------------------------------------------------
# pair-indexed maps


def psi(model: StdfModel, pairs, quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """Vector of unit-square integrals of the bivariate margins on ``pairs``."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("psi needs at least one pair")
    return model.psi_pairs(pairs, quad)


def psi_jacobian(family: "Family", theta, sites, pairs, quad: QuadConfig = QuadConfig(),
                 rel_step: float = 1e-5) -> tuple[np.ndarray, bool]:
    """Central-difference Jacobian of ``psi`` in the natural parameters.

    Returns ``(J, full_rank)``. Coordinates whose step would leave the
    parameter domain fall back to a one-sided difference.
    """
    theta = np.asarray(theta, dtype=float)
    p = len(theta)
    cols = []
    for j in range(p):
        h = rel_step * max(abs(theta[j]), 1.0)
        e = np.zeros(p)
        e[j] = h
        up, dn = theta + e, theta - e
        ok_up, ok_dn = family.is_valid(up), family.is_valid(dn)
        if ok_up and ok_dn:
            col = (psi(family.model(up, sites), pairs, quad)
                   - psi(family.model(dn, sites), pairs, quad)) / (2 * h)
        elif ok_up:
            col = (psi(family.model(up, sites), pairs, quad)
                   - psi(family.model(theta, sites), pairs, quad)) / h
        else:
            col = (psi(family.model(theta, sites), pairs, quad)
                   - psi(family.model(dn, sites), pairs, quad)) / h
        cols.append(col)
    J = np.column_stack(cols)
    sv = np.linalg.svd(J, compute_uv=False)
    full_rank = bool(len(sv) == p and sv[-1] > 1e-8 * max(sv[0], 1e-300))
    return J, full_rank


# --------------------------------------------------------------------------
# fitting families


def _chol_to_mat(z0, z1, z2):
    l11, l22 = math.exp(z0), math.exp(z1)
    return l11 * l11, z2 * z2 + l22 * l22, l11 * z2


def _mat_to_chol(m11, m22, m12):
    l11 = math.sqrt(m11)
    l21 = m12 / l11
    return math.log(l11), 0.5 * math.log(m22 - l21 * l21), l21


class Family:
    """A parametric family: parameter layout, model builder and free coordinates."""

    name: str = ""
    param_names: tuple = ()

    @property
    def p(self) -> int:
        return len(self.param_names)

    def model(self, theta, sites) -> StdfModel:
        raise NotImplementedError

    def to_free(self, theta) -> np.ndarray:
        raise NotImplementedError

    def from_free(self, z) -> np.ndarray:
        raise NotImplementedError

    def free_box(self, sites, pairs) -> tuple[np.ndarray, np.ndarray]:
        """Box in free coordinates from which multistart points are drawn."""
        raise NotImplementedError

    def is_valid(self, theta) -> bool:
        raise NotImplementedError


def _scale(sites, pairs) -> float:
    if sites is None or not pairs:
        return 1.0
    return float(np.median([sites.distance(u, v) for u, v in pairs]))


class LogisticFamily(Family):
    name = "logistic"
    param_names = ("theta",)

    def model(self, theta, sites):
        d = len(sites) if sites is not None else 2
        return LogisticModel(float(np.ravel(theta)[0]), d)

    def to_free(self, theta):
        return np.array([logit(float(np.ravel(theta)[0]))])

    def from_free(self, z):
        return np.array([expit(float(np.clip(z[0], -700, 700)))])

    def free_box(self, sites, pairs):
        return np.array([logit(0.05)]), np.array([logit(0.95)])

    def is_valid(self, theta):
        return 0.0 < float(np.ravel(theta)[0]) <= 1.0


class SmithFamily(Family):
    name = "smith"
    param_names = ("sigma11", "sigma22", "sigma12")

    def model(self, theta, sites):
        return SmithModel(sites, SmithParams(*map(float, theta)))

    def is_valid(self, theta):
        try:
            SmithParams(*map(float, theta))
            return True
        except DomainError:
            return False

    def to_free(self, theta):
        return np.array(_mat_to_chol(theta[0], theta[1], theta[2]))

    def from_free(self, z):
        z = np.clip(z, -50, 50)
        return np.array(_chol_to_mat(*z))

    def free_box(self, sites, pairs):
        s = math.log(_scale(sites, pairs))
        return np.array([s - 1.0, s - 1.0, -0.5]), np.array([s + 1.0, s + 1.0, 0.5])


class SmithIsoFamily(Family):
    name = "smith_iso"
    param_names = ("sigma",)

    def model(self, theta, sites):
        s = float(np.ravel(theta)[0])
        return SmithModel(sites, SmithParams(s, s, 0.0))

    def is_valid(self, theta):
        return float(np.ravel(theta)[0]) > 0

    def to_free(self, theta):
        return np.log(np.ravel(theta)[:1].astype(float))

    def from_free(self, z):
        return np.exp(np.clip(z[:1], -700, 700))

    def free_box(self, sites, pairs):
        s = 2 * math.log(_scale(sites, pairs))
        return np.array([s - 2.0]), np.array([s + 2.0])


class BrownResnickFamily(Family):
    name = "br"
    param_names = ("alpha", "rho", "beta", "c")

    def model(self, theta, sites):
        return BrownResnickModel(sites, BrownResnickParams(*map(float, theta)))

    def is_valid(self, theta):
        try:
            BrownResnickParams(*map(float, theta))
            return True
        except DomainError:
            return False

    def to_free(self, theta):
        a, r, b, c = map(float, theta)
        return np.array([logit(a / 2), math.log(r), logit(2 * b / math.pi), math.log(c)])

    def from_free(self, z):
        z = np.clip(z, -700, 700)
        return np.array([2 * expit(z[0]), math.exp(z[1]),
                         0.5 * math.pi * expit(z[2]) * (1 - 1e-15), math.exp(z[3])])

    def free_box(self, sites, pairs):
        s = math.log(_scale(sites, pairs))
        return (np.array([logit(0.1), s - 1.5, logit(0.05), -1.0]),
                np.array([logit(0.95), s + 1.5, logit(0.95), 1.0]))


class BrownResnickTauFamily(Family):
    """Brown-Resnick in ``(alpha, tau11, tau22, tau12)`` coordinates."""

    name = "br_tau"
    param_names = ("alpha", "tau11", "tau22", "tau12")

    def params(self, theta) -> BrownResnickParams:
        a, t11, t22, t12 = map(float, theta)
        return tau_to_params(TauMatrix(t11, t22, t12), a)

    def model(self, theta, sites):
        return BrownResnickModel(sites, self.params(theta))

    def is_valid(self, theta):
        try:
            self.params(theta)
            return True
        except DomainError:
            return False

    def to_free(self, theta):
        a, t11, t22, t12 = map(float, theta)
        return np.array([logit(a / 2), *_mat_to_chol(t11, t22, t12)])

    def from_free(self, z):
        z = np.clip(z, -300, 300)
        return np.array([2 * expit(z[0]), *_chol_to_mat(z[1], z[2], z[3])])

    def free_box(self, sites, pairs):
        s = -math.log(_scale(sites, pairs))
        return (np.array([logit(0.1), s - 1.0, s - 1.0, -0.5 * math.exp(s)]),
                np.array([logit(0.95), s + 1.0, s + 1.0, 0.5 * math.exp(s)]))


class BrownResnickIsoFamily(Family):
    name = "br_iso"
    param_names = ("alpha", "rho")

    def model(self, theta, sites):
        return BrownResnickModel(sites, BrownResnickParams(float(theta[0]), float(theta[1])))

    def is_valid(self, theta):
        return 0 < theta[0] <= 2 and theta[1] > 0

    def to_free(self, theta):
        return np.array([logit(theta[0] / 2), math.log(theta[1])])

    def from_free(self, z):
        z = np.clip(z, -700, 700)
        return np.array([2 * expit(z[0]), math.exp(z[1])])

    def free_box(self, sites, pairs):
        s = math.log(_scale(sites, pairs))
        return np.array([logit(0.1), s - 1.5]), np.array([logit(0.95), s + 1.5])


FAMILIES = {f.name: f for f in (LogisticFamily(), SmithFamily(), SmithIsoFamily(),
                                BrownResnickFamily(), BrownResnickTauFamily(),
                                BrownResnickIsoFamily())}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None
