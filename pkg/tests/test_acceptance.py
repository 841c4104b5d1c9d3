"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The replication studies
take about half an hour in total on a single core.
"""

import os
from pathlib import Path

import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import kstest

from pairstdf.asymptotics import chi2_full, gamma_matrix, m_matrix
from pairstdf.empirical import extremal_coeff_hat, rank_transform, stdf_hat_integral
from pairstdf.estimator import fit, fit_two_step, select_pairs
from pairstdf.models import (
    BlockLogisticModel, BrownResnickModel, BrownResnickParams, LogisticModel, SiteSet,
    SmithModel, SmithParams, get_family, smith_to_br,
)
from pairstdf.pipeline import ingest_knmi, test_isotropy
from pairstdf.quadrature import QuadConfig
from pairstdf.simulate import (
    FitSpec, SimConfig, run_experiment, sample_logistic, sample_max_stable_field,
)

from oracles import grid_integral_2d

pytestmark = pytest.mark.slow

FAST_GAMMA = QuadConfig(gamma_nodes=8, gamma_check_nodes=None)


@pytest.fixture
def report(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {cid}: {detail}")
        assert ok, detail
    return emit


def test_c1_exact_integral_against_grid(report):
    rng = np.random.default_rng(20240101)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        k = int(rng.integers(1, min(10, n) + 1))
        rs = rank_transform(rng.normal(size=(n, 2)))
        exact = stdf_hat_integral(rs, k, (0, 1))
        worst = max(worst, abs(exact - grid_integral_2d(rs.ranks, k, cells=2000)))
    report(1, worst < 5e-4, f"max |exact - grid| over 100 samples = {worst:.2e} (< 5e-4)")


def _suites(model, d, rng):
    """Largest violation of homogeneity, the bounds and unit margins."""
    worst = 0.0
    for _ in range(40):
        size = int(rng.integers(2, min(d, 4) + 1))
        idx = tuple(sorted(rng.choice(d, size, replace=False)))
        x = rng.uniform(0.05, 3.0, size)
        t = rng.uniform(0.1, 5.0)
        val = float(model.margin(idx, x))
        worst = max(worst, abs(float(model.margin(idx, t * x)) - t * val) / (t * val))
        worst = max(worst, x.max() - val - 1e-12, val - x.sum() - 1e-12)
        e = np.zeros(size)
        e[0] = 1.0
        worst = max(worst, abs(float(model.margin(idx, e)) - 1.0))
    return worst


def test_c2_model_identities(report):
    sites = SiteSet.grid(3, 2)
    S = SmithParams(1.0, 1.5, 0.5)
    smith = SmithModel(sites, S)
    br2 = BrownResnickModel(sites, smith_to_br(S)[0])
    pairs = [(u, v) for u in range(6) for v in range(u + 1, 6)]
    x = np.array([[1.0, 1.0], [0.3, 2.0], [1.7, 0.4]])
    d_equiv = max(np.max(np.abs(smith.psi_pairs(pairs) - br2.psi_pairs(pairs))),
                  max(np.max(np.abs(smith.margin(p, x) - br2.margin(p, x))) for p in pairs))
    for idx in ((0, 1, 2), (0, 2, 3, 5)):
        y = np.linspace(0.5, 1.5, len(idx))
        d_equiv = max(d_equiv, abs(float(smith.margin(idx, y)) - float(br2.margin(idx, y))))

    rng = np.random.default_rng(7)
    br = BrownResnickModel(sites, BrownResnickParams(1.0, 3.0, 0.5, 0.5))
    suites = max(_suites(m, 6, rng) for m in (br, smith, LogisticModel(0.4, 6),
                                              BlockLogisticModel.regions(0.5, 6, 2)))
    d_coeff = max(abs(float(br.margin(p, [1.0, 1.0])) - 2 * ndtr(br.scale(*p) / 2))
                  for p in pairs)
    d_psi = abs(LogisticModel(1.0, 2).pair_psi(0, 1) - 1.0)
    ok = d_equiv < 1e-10 and suites < 1e-10 and d_coeff < 1e-12 and d_psi < 1e-9
    report(2, ok, f"alpha=2 vs Smith {d_equiv:.1e}; suites {suites:.1e}; "
                  f"l(1,1) vs 2Phi(a/2) {d_coeff:.1e}; psi(theta=1) - 1 {d_psi:.1e}")


def _ks_and_coeff(data, target):
    rs = rank_transform(data)
    d = data.shape[1]
    ks = min(kstest(data.values[:, j], lambda z: np.exp(-1 / np.maximum(z, 1e-300))).pvalue
             for j in range(d))
    gap = max(abs(extremal_coeff_hat(rs, 500, (u, v)) - target(u, v))
              for u in range(d) for v in range(u + 1, d))
    return ks, gap


def test_c3_sampler_validity(report):
    n = 10_000
    sites = SiteSet.from_coords([[0, 0], [1, 0], [0, 1]])
    br = BrownResnickModel(sites, BrownResnickParams(1.0, 3.0, 0.5, 0.5))
    smith = SmithModel(sites, SmithParams(1.0, 1.5, 0.5))
    res = {
        "BR": _ks_and_coeff(sample_max_stable_field("br", sites, br.params, n, 31),
                            lambda u, v: 2 * ndtr(br.scale(u, v) / 2)),
        "Smith": _ks_and_coeff(sample_max_stable_field("smith", sites, smith.params, n, 32),
                               lambda u, v: 2 * ndtr(smith.scale(u, v) / 2)),
        "logistic": _ks_and_coeff(sample_logistic(n, 3, 0.5, 33), lambda u, v: 2 ** 0.5),
    }
    ok = all(ks > 0.01 and gap <= 0.05 for ks, gap in res.values())
    detail = "; ".join(f"{m}: min KS p {ks:.3f}, max coeff gap {gap:.3f}"
                       for m, (ks, gap) in res.items())
    report(3, ok, detail)


def test_c4_logistic_reproduction(report):
    cfg = SimConfig("logistic", (0.5,), 1500, 200, (160,), seed=4, d=5)
    res = run_experiment(cfg, {"pairwise": FitSpec("logistic")})
    bias = res.stat("pairwise", 160, "theta", "bias")
    rmse = res.stat("pairwise", 160, "theta", "rmse")
    report(4, abs(bias) <= 0.02 and rmse <= 0.05,
           f"|mean - 0.5| = {abs(bias):.4f} (<= 0.02), RMSE = {rmse:.4f} (<= 0.05)")


def test_c5_weighting_dominance(report):
    sites = SiteSet.grid(4, 3)
    cfg = SimConfig("br", (1.5, 1.0, 0.25, 1.5), 1000, 100, (25,), seed=5, sites=sites)
    pairs = select_pairs(sites, 1.5)
    assert len(pairs) == 29
    specs = {"identity": FitSpec("br", pairs=1.5),
             "two_step": FitSpec("br", pairs=1.5, weight="optimal", gamma_quad=FAST_GAMMA)}
    res = run_experiment(cfg, specs)
    ratios = {p: res.stat("two_step", 25, p, "sd") / res.stat("identity", 25, p, "sd")
              for p in ("alpha", "rho", "beta", "c")}
    report(5, all(r <= 1.05 for r in ratios.values()),
           "SD ratio two-step / identity: "
           + ", ".join(f"{p} {r:.3f}" for p, r in ratios.items()) + " (each <= 1.05)")


def test_c6_neighbour_pairs(report):
    sites = SiteSet.grid(10, 10)
    cfg = SimConfig("smith", (1.0, 1.5, 0.5), 500, 100, (25,), seed=6, sites=sites)
    specs = {"neighbours": FitSpec("smith", pairs=1.5), "all": FitSpec("smith", pairs="all")}
    res = run_experiment(cfg, specs)
    names = get_family("smith").param_names
    rm = {p: (res.stat("neighbours", 25, p, "rmse"), res.stat("all", 25, p, "rmse"))
          for p in names}
    report(6, all(a < b for a, b in rm.values()),
           "RMSE neighbours vs all: "
           + ", ".join(f"{p} {a:.4f} < {b:.4f}" for p, (a, b) in rm.items()))


def test_c7_variance_orderings(report):
    worst_psd = np.inf
    for d in (4, 6):
        sites = SiteSet.line(d)
        pairs = [(u, v) for u in range(d) for v in range(u + 1, d)]
        for sigma in (0.5, 1.0, 1.5, 2.0):
            av = m_matrix(get_family("smith_iso"), [sigma], sites, pairs,
                          quad=QuadConfig(gamma_check_nodes=None))
            scale = np.abs(av.M).max()
            worst_psd = min(worst_psd, np.linalg.eigvalsh(av.M - av.M_opt).min() / scale)

    block = BlockLogisticModel.regions(0.5, 100, 20)
    lab = np.asarray(block.labels)
    pairs = [(u, v) for u in range(100) for v in range(u + 1, 100) if lab[u] == lab[v]]
    G = gamma_matrix(block, pairs, QuadConfig(gamma_check_nodes=None)).matrix
    av = m_matrix(get_family("logistic"), [0.5], SiteSet.line(100), pairs, gamma=G)
    rel = abs(av.M[0, 0] - av.M_opt[0, 0]) / av.M_opt[0, 0]
    report(7, worst_psd >= -1e-10 and rel < 1e-8,
           f"min eig(M - M_opt)/max|M| = {worst_psd:.2e} (>= -1e-10); "
           f"block-logistic |M - M_opt|/M_opt = {rel:.1e}")


WIND_DIR = os.environ.get("PAIRSTDF_WIND_DIR")


def test_c8_wind_case_study(report):
    root = Path(WIND_DIR) if WIND_DIR else None
    if root is None or not (root / "sites.csv").exists():
        report(8, False, "KNMI wind-gust files not available; set PAIRSTDF_WIND_DIR to a "
                         "directory holding the station exports (*.txt) and sites.csv")
    files = sorted(root.glob("*.txt"))
    sites = SiteSet.from_csv(root / "sites.csv")
    data = ingest_knmi(files, stations=list(sites.ids))
    pairs = select_pairs(sites, 50.0, 4)
    est = fit_two_step("br", data, 60, pairs, sites, compute_se=False)
    iso = test_isotropy(data, sites, 60, pairs=pairs)
    ok = (data.shape == (672, 22) and len(pairs) == 29
          and abs(est.theta_hat[0] - 0.398) <= 0.02 and abs(est.theta_hat[1] - 0.372) <= 0.05
          and abs(iso.statistic - 0.180) <= 0.05 and 0.85 <= iso.p_value <= 0.95)
    report(8, ok, f"shape {data.shape}, q = {len(pairs)}, alpha {est.theta_hat[0]:.3f}, "
                  f"rho {est.theta_hat[1]:.3f}, statistic {iso.statistic:.3f}, "
                  f"p {iso.p_value:.3f}")


def test_c9_chi2_level(report):
    sites = SiteSet.grid(2, 2)
    fam = get_family("smith")
    pairs = select_pairs(sites, "all")
    truth = np.array([2.0, 2.0, 0.0])
    seeds = np.random.SeedSequence(9).spawn(200)
    rejections = 0
    for ss in seeds:
        data = sample_max_stable_field("smith", sites, SmithParams(*truth), 5000, ss)
        est = fit(fam, data, 200, pairs, sites=sites)
        M = m_matrix(fam, est.theta_hat, sites, pairs.pairs, quad=FAST_GAMMA).M
        rejections += chi2_full(est.theta_hat, truth, M, 200).p_value < 0.05
    rate = rejections / len(seeds)
    report(9, 0.02 <= rate <= 0.10, f"rejection rate at 5% = {rate:.3f} (in [0.02, 0.10])")
