"""Pairwise M-estimation: pair selection, weighted objective and the fitting routines."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from itertools import combinations

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .asymptotics import gamma_matrix, optimal_variance, sandwich, standard_errors
from .empirical import RankedSample, pair_integrals, rank_transform, weighted_integral
from .models import (DomainError, Family, SiteSet, get_family, psi, psi_jacobian)
from .quadrature import QuadConfig, graded_rule


class IdentifiabilityError(ValueError):
    """Fewer pairs (or weight functions) than parameters."""


class FitError(RuntimeError):
    """No optimizer run converged."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class RidgeWarning(RuntimeWarning):
    """Gamma was ill-conditioned and regularised before inversion."""


# --------------------------------------------------------------------------
# pairs and weights


@dataclass(frozen=True)
class PairSet:
    pairs: tuple
    selection: str = "all"
    cutoff: float | None = None

    def __post_init__(self):
        pairs = tuple((int(min(u, v)), int(max(u, v))) for u, v in self.pairs)
        if any(u == v for u, v in pairs):
            raise ValueError("a pair needs two distinct sites")
        if len(set(pairs)) != len(pairs):
            raise ValueError("pairs must be distinct")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.pairs, dtype=int).reshape(-1, 2)


def select_pairs(sites: SiteSet, rule="all", p: int | None = None) -> PairSet:
    """All pairs, or the pairs at Euclidean distance at most ``rule`` (a number)."""
    d = len(sites)
    if rule == "all" or rule is None:
        ps = PairSet(tuple(combinations(range(d), 2)), "all")
    else:
        cutoff = float(rule)
        if cutoff <= 0:
            raise ValueError("distance cutoff must be positive")
        D = sites.distances()
        ps = PairSet(tuple((u, v) for u, v in combinations(range(d), 2) if D[u, v] <= cutoff),
                     "cutoff", cutoff)
    if p is not None and len(ps) < p:
        raise IdentifiabilityError(f"{len(ps)} pairs cannot identify {p} parameters")
    return ps


@dataclass(frozen=True)
class WeightMatrix:
    matrix: np.ndarray
    kind: str = "custom"
    chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        W = np.array(self.matrix, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("weight matrix must be square")
        if not np.allclose(W, W.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(W).max())):
            raise ValueError("weight matrix must be symmetric")
        W = 0.5 * (W + W.T)
        try:
            L = np.linalg.cholesky(W)
        except np.linalg.LinAlgError as exc:
            raise ValueError("weight matrix must be positive definite") from exc
        W.setflags(write=False)
        object.__setattr__(self, "matrix", W)
        object.__setattr__(self, "chol", L)

    @classmethod
    def identity(cls, q: int) -> "WeightMatrix":
        return cls(np.eye(q), "identity")

    def __len__(self):
        return len(self.matrix)


def discrepancy_vector(model, rs: RankedSample, k: int, pairs,
                       quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """Empirical pair integrals minus their model counterparts."""
    P = pairs.array if isinstance(pairs, PairSet) else np.asarray(pairs, dtype=int)
    return pair_integrals(rs, k, P) - psi(model, P, quad)


def objective(L, W=None) -> float:
    """Quadratic form ``L' W L``; ``W=None`` is the identity."""
    L = np.asarray(L, dtype=float)
    if W is None:
        return float(L @ L)
    Wm = W.matrix if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    if Wm.shape != (len(L), len(L)):
        raise ValueError("weight matrix and discrepancy vector do not conform")
    return float(L @ Wm @ L)


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class OptConfig:
    """Nelder-Mead multistart settings (free, unconstrained coordinates)."""

    n_starts: int = 5
    seed: int = 0
    xatol: float = 2e-7
    fatol: float = 1e-15
    maxiter: int = 4000
    diameter_tol: float = 1e-6
    start: tuple | None = None


@dataclass
class MEstimate:
    family: str
    param_names: tuple
    theta_hat: np.ndarray
    objective: float
    k: int
    pairs: tuple
    converged: bool
    n_restarts: int
    weight_kind: str = "identity"
    se: np.ndarray | None = None
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    stage1: "MEstimate | None" = None

    def as_dict(self) -> dict:
        out = {
            "family": self.family,
            "param_names": list(self.param_names),
            "theta_hat": [float(t) for t in self.theta_hat],
            "objective": float(self.objective),
            "k": int(self.k),
            "pairs": [list(map(int, p)) for p in self.pairs],
            "converged": bool(self.converged),
            "n_restarts": int(self.n_restarts),
            "weight_kind": self.weight_kind,
            "se": None if self.se is None else [float(s) for s in self.se],
            "trace": self.trace,
            "flags": list(self.flags),
        }
        if self.stage1 is not None:
            out["stage1"] = self.stage1.as_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        row = {"family": self.family, "k": self.k, "q": len(self.pairs),
               "weight": self.weight_kind, "objective": self.objective}
        row.update({n: float(t) for n, t in zip(self.param_names, self.theta_hat)})
        if self.se is not None:
            row.update({f"se_{n}": float(s) for n, s in zip(self.param_names, self.se)})
        return row


def _starts(family: Family, sites, pairs, opt: OptConfig) -> list[np.ndarray]:
    lo, hi = family.free_box(sites, pairs)
    starts = []
    if opt.start is not None:
        starts.append(family.to_free(np.asarray(opt.start, dtype=float)))
    if opt.n_starts > 0:
        lhs = qmc.LatinHypercube(d=family.p, seed=opt.seed).random(opt.n_starts)
        starts.extend(lo + (hi - lo) * lhs)
    return starts


def minimize_multistart(fun, family: Family, sites, pairs, opt: OptConfig):
    """Run Nelder-Mead from every start; return the best result and a trace."""
    trace = []
    best = None
    for i, z0 in enumerate(_starts(family, sites, pairs, opt)):
        res = minimize(fun, z0, method="Nelder-Mead",
                       options={"xatol": opt.xatol, "fatol": opt.fatol,
                                "maxiter": opt.maxiter * family.p,
                                "maxfev": opt.maxiter * family.p * 2})
        sim = res.final_simplex[0]
        diam = float(np.max(np.linalg.norm(sim[:, None, :] - sim[None, :, :], axis=-1)))
        ok = bool(np.isfinite(res.fun) and diam < opt.diameter_tol)
        theta = family.from_free(res.x)
        trace.append({"start": i, "theta": [float(t) for t in theta], "objective": float(res.fun),
                      "nfev": int(res.nfev), "diameter": diam, "converged": ok})
        cand = (ok, -float(res.fun), i)
        if best is None or (cand[0], cand[1]) > (best[0][0], best[0][1]):
            best = (cand, res, theta)
    return best, trace


def _ranked(data, seed=0) -> RankedSample:
    return data if isinstance(data, RankedSample) else rank_transform(data, seed=seed)


def fit(family, data, k: int, pairs, W=None, opt: OptConfig = OptConfig(), sites=None,
        quad: QuadConfig = QuadConfig()) -> MEstimate:
    """Minimise ``L(theta)' W L(theta)`` over the family's parameter space."""
    family = get_family(family) if isinstance(family, str) else family
    pairs = pairs if isinstance(pairs, PairSet) else PairSet(tuple(pairs))
    q, p = len(pairs), family.p
    if q < p:
        raise IdentifiabilityError(f"{q} pairs cannot identify {p} parameters")
    rs = _ranked(data)
    if not p + 1 <= k <= rs.n:
        raise ValueError(f"k must lie in [{p + 1}, {rs.n}], got {k}")
    if sites is None:
        sites = _dummy_sites(rs.d)
    Wobj = WeightMatrix.identity(q) if W is None else (
        W if isinstance(W, WeightMatrix) else WeightMatrix(W))
    if len(Wobj) != q:
        raise ValueError("weight matrix does not match the number of pairs")
    P = pairs.array
    emp = pair_integrals(rs, k, P)
    Wm = None if Wobj.kind == "identity" else Wobj.matrix
    cache: dict = {}

    def fun(z):
        theta = family.from_free(np.asarray(z, dtype=float))
        key = theta.tobytes()
        if key not in cache:
            try:
                L = emp - psi(family.model(theta, sites), P, quad)
                cache[key] = objective(L, Wm)
            except DomainError:
                cache[key] = math.inf
        return cache[key]

    best, trace = minimize_multistart(fun, family, sites, pairs.pairs, opt)
    if not any(t["converged"] for t in trace):
        raise FitError("no Nelder-Mead run converged", trace)
    (_, negf, _), res, theta = best
    return MEstimate(family.name, family.param_names, theta, -negf, int(k), pairs.pairs,
                     True, len(trace), Wobj.kind, None, trace)


def optimal_weight(model, pairs, quad: QuadConfig = QuadConfig(), threads: int = 1,
                   cond_max: float = 1e12):
    """``(WeightMatrix(Gamma^-1), Gamma, flags)`` with a ridge for ill-conditioned Gamma."""
    P = pairs.pairs if isinstance(pairs, PairSet) else pairs
    G = gamma_matrix(model, P, quad, threads).matrix
    flags = []
    if np.linalg.cond(G) > cond_max:
        eps = 1e-8 * np.trace(G) / len(G)
        G = G + eps * np.eye(len(G))
        flags.append("gamma_ridge")
        warnings.warn("Gamma is ill-conditioned; a ridge was added before inversion",
                      RidgeWarning, stacklevel=2)
    Winv = np.linalg.inv(G)
    return WeightMatrix(0.5 * (Winv + Winv.T), "optimal"), G, flags


def fit_two_step(family, data, k: int, pairs, sites=None, quad: QuadConfig = QuadConfig(),
                 opt: OptConfig = OptConfig(), gamma_quad: QuadConfig | None = None,
                 compute_se: bool = True, threads: int = 1) -> MEstimate:
    """Identity-weight fit, then refit with ``Gamma(theta0)^-1`` as weight matrix."""
    family = get_family(family) if isinstance(family, str) else family
    pairs = pairs if isinstance(pairs, PairSet) else PairSet(tuple(pairs))
    gq = quad if gamma_quad is None else gamma_quad
    rs = _ranked(data)
    if sites is None:
        sites = _dummy_sites(rs.d)
    first = fit(family, rs, k, pairs, None, opt, sites, quad)
    W, _, flags = optimal_weight(family.model(first.theta_hat, sites), pairs, gq, threads)
    opt2 = OptConfig(**{**asdict(opt), "start": tuple(first.theta_hat)})
    second = fit(family, rs, k, pairs, W, opt2, sites, quad)
    second.flags = flags + second.flags
    second.stage1 = first
    if compute_se:
        theta = second.theta_hat
        G = gamma_matrix(family.model(theta, sites), pairs.pairs, gq, threads).matrix
        J, full = psi_jacobian(family, theta, sites, pairs.pairs, quad)
        if not full:
            second.flags.append("jacobian_rank_deficient")
        else:
            second.se = standard_errors(optimal_variance(J, G), k)
    return second


def identity_se(est: MEstimate, family, sites, quad: QuadConfig = QuadConfig(),
                gamma_quad: QuadConfig | None = None) -> np.ndarray:
    """Standard errors of an identity-weight estimate from the sandwich formula."""
    family = get_family(family) if isinstance(family, str) else family
    gq = quad if gamma_quad is None else gamma_quad
    G = gamma_matrix(family.model(est.theta_hat, sites), est.pairs, gq).matrix
    J, _ = psi_jacobian(family, est.theta_hat, sites, est.pairs, quad)
    return standard_errors(sandwich(J, np.eye(len(est.pairs)), G), est.k)


# --------------------------------------------------------------------------
# full-dimensional comparator


def model_weighted_integral(model, d: int, weight=None, n: int = 12) -> float:
    """``int_[0,1]^d g * l`` with ``g = 1`` or ``g = x_m``, by face reduction."""
    idx = tuple(range(d))
    nodes, weights = graded_rule(n, d - 1)
    degree = 1 if weight is None else 2
    total = 0.0
    for j in range(d):
        pts = np.insert(nodes, j, 1.0, axis=1)
        vals = model.margin(idx, pts)
        if weight is not None:
            vals = vals * pts[:, int(weight)]
        total += float(weights @ vals)
    return total / (d + degree)


def fit_full_dim(family, data, k: int, g_spec=(None,), opt: OptConfig = OptConfig(),
                 sites=None, n_nodes: int = 12) -> MEstimate:
    """Comparator: match ``int g_m l`` over ``[0,1]^d`` for each weight function.

    ``g_spec`` entries are ``None`` for ``g = 1`` or a column index ``m`` for
    ``g(x) = x_m``. Dimensions above six are refused.
    """
    family = get_family(family) if isinstance(family, str) else family
    rs = _ranked(data)
    d = rs.d
    if d > 6:
        raise ValueError("the full-dimensional comparator supports d <= 6")
    g_spec = list(g_spec)
    if len(g_spec) < family.p:
        raise IdentifiabilityError("fewer weight functions than parameters")
    emp = np.array([weighted_integral(rs, k, g) for g in g_spec])
    cache: dict = {}

    def fun(z):
        theta = family.from_free(np.asarray(z, dtype=float))
        key = theta.tobytes()
        if key not in cache:
            try:
                model = family.model(theta, sites if sites is not None else _dummy_sites(d))
                mod = np.array([model_weighted_integral(model, d, g, n_nodes) for g in g_spec])
                cache[key] = float(np.sum((emp - mod) ** 2))
            except DomainError:
                cache[key] = math.inf
        return cache[key]

    pairs = tuple(combinations(range(d), 2))
    best, trace = minimize_multistart(fun, family, sites, pairs, opt)
    if not any(t["converged"] for t in trace):
        raise FitError("no Nelder-Mead run converged", trace)
    (_, negf, _), _, theta = best
    return MEstimate(family.name, family.param_names, theta, -negf, int(k), (),
                     True, len(trace), "full_dim", None, trace)


def _dummy_sites(d):
    return SiteSet.line(d)
