"""Max-stable samplers and the replication harness for simulation studies."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .empirical import DataMatrix, rank_transform
from .estimator import OptConfig, PairSet, fit, fit_two_step, select_pairs
from .models import (BrownResnickModel, BrownResnickParams, HuslerReissModel, LogisticParams,
                     SiteSet, SmithModel, SmithParams, get_family)
from .quadrature import QuadConfig


class GeometryError(ValueError):
    """The increment covariance of the Gaussian field is not positive semi-definite."""


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) from an int or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def sample_logistic(n: int, d: int, theta: float, seed=0) -> DataMatrix:
    """Logistic max-stable vectors with unit Frechet margins.

    A positive stable variable ``S`` with Laplace transform ``exp(-t^theta)``
    mixes independent exponentials: ``Z_j = (S / E_j)^theta``.
    """
    LogisticParams(theta)
    rng = make_rng(seed)
    E = rng.standard_exponential((n, d))
    if theta == 1.0:
        return DataMatrix(1.0 / E)
    U = rng.uniform(0.0, np.pi, n)
    W = rng.standard_exponential(n)
    S = (np.sin(theta * U) / np.sin(U) ** (1.0 / theta)
         * (np.sin((1.0 - theta) * U) / W) ** ((1.0 - theta) / theta))
    return DataMatrix((S[:, None] / E) ** theta)


def _increment_root(gamma: np.ndarray, j: int) -> np.ndarray:
    """Square root of ``Cov(W(s) - W(s_j))`` from the semi-variogram matrix."""
    C = gamma[:, [j]] + gamma[[j], :] - gamma
    lam, vec = np.linalg.eigh(0.5 * (C + C.T))
    scale = max(float(np.abs(lam).max()), 1.0)
    if lam.min() < -1e-8 * scale:
        raise GeometryError(f"increment covariance has eigenvalue {lam.min():.3e}")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def sample_husler_reiss(gamma, n: int, seed=0) -> np.ndarray:
    """Exact draws of a Brown-Resnick vector by extremal functions.

    ``gamma`` is the matrix of semi-variograms between the sites. Each row
    is built site by site: Poisson points relative to site ``j`` are
    generated in decreasing order until they can no longer exceed the
    current value there, and a proposal is kept only if it does not exceed
    the values at earlier sites.
    """
    G = np.asarray(gamma, dtype=float)
    d = len(G)
    rng = make_rng(seed)
    Z = np.zeros((n, d))
    for j in range(d):
        A = _increment_root(G, j)
        drift = G[:, j]
        E = rng.standard_exponential(n)
        active = np.flatnonzero(1.0 / E > Z[:, j])
        while active.size:
            zeta = 1.0 / E[active]
            eps = rng.standard_normal((active.size, d)) @ A.T
            Y = zeta[:, None] * np.exp(eps - drift)
            prev = Z[active, :j]
            keep = np.all(Y[:, :j] < prev, axis=1)
            rows = active[keep]
            Z[rows] = np.maximum(Z[rows], Y[keep])
            E[active] += rng.standard_exponential(active.size)
            still = 1.0 / E[active] > Z[active, j]
            active = active[still]
    return Z


def sample_max_stable_field(family: str, sites: SiteSet, params, n: int, seed=0) -> DataMatrix:
    """Brown-Resnick or Smith field at ``sites`` with unit Frechet margins."""
    if family in ("br", "brown_resnick"):
        model = BrownResnickModel(sites, params if isinstance(params, BrownResnickParams)
                                  else BrownResnickParams(*params))
    elif family == "smith":
        model = SmithModel(sites, params if isinstance(params, SmithParams)
                           else SmithParams(*params))
    elif isinstance(params, HuslerReissModel):
        model = params
    else:
        raise ValueError(f"unknown field family {family!r}")
    return DataMatrix(sample_husler_reiss(model.gamma, n, seed), sites.ids)


def perturb_half_normal(data: DataMatrix, sd: float = 0.5, seed=0) -> DataMatrix:
    """Add independent ``|N(0, sd^2)|`` noise to every entry."""
    if sd < 0:
        raise ValueError("sd must be nonnegative")
    if sd == 0:
        return data
    rng = make_rng(seed)
    noise = np.abs(rng.normal(0.0, sd, data.values.shape))
    return DataMatrix(data.values + noise, data.ids)


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class SimConfig:
    family: str
    params: tuple
    n: int
    replications: int
    k_grid: tuple
    seed: int = 0
    sites: SiteSet | None = None
    d: int | None = None
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.n < 2 or self.replications < 1:
            raise ValueError("need n >= 2 and at least one replication")
        if any(not 1 <= k <= self.n for k in self.k_grid):
            raise ValueError("k grid must lie within [1, n]")

    @property
    def dimension(self) -> int:
        return len(self.sites) if self.sites is not None else int(self.d)

    def as_dict(self) -> dict:
        out = {"family": self.family, "params": list(self.params), "n": self.n,
               "replications": self.replications, "k_grid": list(self.k_grid),
               "seed": self.seed, "noise_sd": self.noise_sd, "d": self.dimension}
        if self.sites is not None:
            out["sites"] = {"ids": list(self.sites.ids), "coords": self.sites.coords.tolist()}
        return out

    @classmethod
    def from_dict(cls, cfg: dict) -> "SimConfig":
        sites = None
        if cfg.get("sites"):
            s = cfg["sites"]
            sites = SiteSet(tuple(s["ids"]), np.asarray(s["coords"]))
        elif cfg.get("grid"):
            sites = SiteSet.grid(*cfg["grid"])
        elif cfg.get("line"):
            sites = SiteSet.line(int(cfg["line"]))
        return cls(cfg["family"], tuple(cfg["params"]), int(cfg["n"]),
                   int(cfg["replications"]), tuple(int(k) for k in cfg["k_grid"]),
                   int(cfg.get("seed", 0)), sites, cfg.get("d"), float(cfg.get("noise_sd", 0.0)))


@dataclass(frozen=True)
class FitSpec:
    """How one estimator variant is fitted inside an experiment."""

    family: str
    pairs: object = "all"
    weight: str = "identity"
    opt: OptConfig = OptConfig()
    quad: QuadConfig = QuadConfig()
    gamma_quad: QuadConfig = QuadConfig(gamma_nodes=8, gamma_check_nodes=None)
    start: tuple | None = None


@dataclass
class ExperimentResult:
    truth: dict
    rows: list
    failures: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        out = []
        keys = sorted({(r["variant"], r["k"], r["param"]) for r in self.rows})
        for variant, k, param in keys:
            est = np.array([r["estimate"] for r in self.rows
                            if r["variant"] == variant and r["k"] == k and r["param"] == param])
            t = self.truth[param]
            bias = float(est.mean() - t)
            sd = float(est.std())
            rmse = float(np.sqrt(np.mean((est - t) ** 2)))
            out.append({"variant": variant, "k": k, "param": param, "n_ok": len(est),
                        "mean": float(est.mean()), "bias": bias, "sd": sd, "rmse": rmse})
        return out

    def stat(self, variant, k, param, what) -> float:
        for row in self.summary():
            if (row["variant"], row["k"], row["param"]) == (variant, k, param):
                return row[what]
        raise KeyError((variant, k, param))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["rep", "variant", "k", "param", "estimate"])
            w.writeheader()
            for r in self.rows:
                w.writerow({key: r[key] for key in w.fieldnames})

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"truth": self.truth, "failures": self.failures,
                                          "summary": self.summary()}, indent=2, sort_keys=True))


def simulate_data(cfg: SimConfig, seed) -> DataMatrix:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_data, s_noise = ss.spawn(2)
    if cfg.family == "logistic":
        data = sample_logistic(cfg.n, cfg.dimension, float(cfg.params[0]), s_data)
    elif cfg.family in ("br", "smith"):
        data = sample_max_stable_field(cfg.family, cfg.sites, cfg.params, cfg.n, s_data)
    else:
        raise ValueError(f"cannot simulate family {cfg.family!r}")
    if cfg.noise_sd > 0:
        data = perturb_half_normal(data, cfg.noise_sd, s_noise)
    return data


def truth_vector(cfg: SimConfig, family: str) -> np.ndarray:
    """True parameters expressed in the coordinates of a fitting family."""
    if family == cfg.family or (family == "smith" and cfg.family == "smith"):
        return np.asarray(cfg.params, dtype=float)
    if cfg.family == "br" and family == "br_tau":
        p = BrownResnickParams(*cfg.params)
        t = p.tau
        return np.array([p.alpha, t.tau11, t.tau22, t.tau12])
    if cfg.family == "smith" and family == "smith_iso":
        return np.array([cfg.params[0]])
    raise ValueError(f"no parameter map from {cfg.family} to {family}")


def _one_replication(cfg: SimConfig, specs: dict, rep: int, ss) -> tuple[list, dict]:
    data = simulate_data(cfg, ss)
    rs = rank_transform(data, seed=rep)
    rows, fails = [], {}
    for name, spec in specs.items():
        fam = get_family(spec.family)
        sites = cfg.sites if cfg.sites is not None else SiteSet.line(cfg.dimension)
        pairs = spec.pairs if isinstance(spec.pairs, PairSet) else select_pairs(
            sites, spec.pairs, fam.p)
        start = spec.start if spec.start is not None else tuple(truth_vector(cfg, spec.family))
        opt = OptConfig(**{**spec.opt.__dict__, "start": start})
        for k in cfg.k_grid:
            try:
                if spec.weight == "optimal":
                    est = fit_two_step(fam, rs, k, pairs, sites, spec.quad, opt,
                                       spec.gamma_quad, compute_se=False)
                else:
                    est = fit(fam, rs, k, pairs, None, opt, sites, spec.quad)
            except Exception as exc:  # recorded, excluded from the summary
                fails[(name, k)] = fails.get((name, k), []) + [f"rep {rep}: {exc}"]
                continue
            for pname, val in zip(fam.param_names, est.theta_hat):
                rows.append({"rep": rep, "variant": name, "k": k, "param": pname,
                             "estimate": float(val)})
    return rows, fails


def run_experiment(cfg: SimConfig, fit_specs, threads: int = 1,
                   max_fail_frac: float = 0.1) -> ExperimentResult:
    """Simulate, optionally perturb, and fit each replication with every variant.

    ``fit_specs`` maps variant names to :class:`FitSpec`. Replication ``r``
    draws from its own stream spawned from ``cfg.seed``, so results do not
    depend on scheduling.
    """
    specs = fit_specs if isinstance(fit_specs, dict) else {"fit": fit_specs}
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    jobs = list(enumerate(streams))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda a: _one_replication(cfg, specs, *a), jobs))
    else:
        results = [_one_replication(cfg, specs, r, s) for r, s in jobs]
    rows, fails = [], {}
    for r, f in results:
        rows.extend(r)
        for key, msgs in f.items():
            fails.setdefault(f"{key[0]}@k={key[1]}", []).extend(msgs)
    for key, msgs in fails.items():
        if len(msgs) > max_fail_frac * cfg.replications:
            raise RuntimeError(f"{len(msgs)} of {cfg.replications} fits failed for {key}")
    truth = {}
    for spec in specs.values():
        fam = get_family(spec.family)
        truth.update(dict(zip(fam.param_names, map(float, truth_vector(cfg, spec.family)))))
    return ExperimentResult(truth, rows, fails)
