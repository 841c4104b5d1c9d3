"""Command-line interface: ``pairstdf <subcommand> [options]``.

Exit status is 0 on success, 1 for usage or input errors and 2 for
numerical failures. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .asymptotics import NotPSDError, RankDeficientError, load_or_compute_gamma
from .empirical import DataMatrix
from .estimator import FitError, MEstimate, OptConfig, fit, fit_two_step, select_pairs
from .models import SiteSet, get_family
from .pipeline import IngestError, gof_extremal, ingest_knmi, test_isotropy
from .quadrature import QuadConfig, QuadratureError
from .simulate import FitSpec, SimConfig, run_experiment, simulate_data

NUMERICAL = (FitError, NotPSDError, RankDeficientError, QuadratureError, np.linalg.LinAlgError,
             FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _opt(cfg: dict, seed: int) -> OptConfig:
    o = dict(cfg.get("optimizer", {}))
    o.setdefault("seed", seed)
    if "start" in o and o["start"] is not None:
        o["start"] = tuple(o["start"])
    return OptConfig(**o)


def _quad(cfg: dict, key: str, default: QuadConfig) -> QuadConfig:
    return QuadConfig(**{**default.as_dict(), **cfg.get(key, {})})


def _pair_rule(value):
    if value in (None, "all"):
        return "all"
    return float(value)


def _sites(path, d=None) -> SiteSet:
    if path is not None:
        return SiteSet.from_csv(path)
    if d is None:
        raise UsageError("a site file is required")
    return SiteSet.line(d)


def _emit(obj, out_dir: Path, name: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    (out_dir / name).write_text(text + "\n")
    print(text)


def _experiment_specs(cfg: dict, seed: int) -> dict:
    specs = {}
    for name, s in cfg.get("fits", {}).items():
        specs[name] = FitSpec(
            family=s["family"], pairs=_pair_rule(s.get("pairs")),
            weight=s.get("weight", "identity"), opt=_opt(s, seed),
            quad=_quad(s, "quad", QuadConfig()),
            gamma_quad=_quad(s, "gamma_quad", QuadConfig(gamma_nodes=8, gamma_check_nodes=None)),
            start=tuple(s["start"]) if s.get("start") else None)
    return specs


def cmd_simulate(args, cfg, out: Path) -> None:
    if args.seed is not None:
        cfg = {**cfg, "seed": args.seed}
    sim = SimConfig.from_dict(cfg)
    specs = _experiment_specs(cfg, sim.seed)
    if not specs:
        data = simulate_data(sim, sim.seed)
        data.to_csv(out / "data.csv")
        if sim.sites is not None:
            sim.sites.to_csv(out / "sites.csv")
        print(json.dumps({"data": str(out / "data.csv"), "shape": list(data.shape)}))
        return
    res = run_experiment(sim, specs, threads=args.threads)
    res.to_csv(out / "estimates.csv")
    res.to_json(out / "summary.json")
    print(json.dumps({"summary": res.summary(), "failures": {k: len(v) for k, v in
                                                            res.failures.items()}}, indent=2))


def cmd_fit(args, cfg, out: Path) -> None:
    data = DataMatrix.from_csv(args.data)
    sites = _sites(args.sites or cfg.get("sites_file"), data.shape[1])
    family = get_family(args.family or cfg.get("family", "br"))
    k = args.k if args.k is not None else cfg.get("k")
    if k is None:
        raise UsageError("k is required")
    pairs = select_pairs(sites, _pair_rule(args.pairs or cfg.get("pairs")), family.p)
    weight = args.weight or cfg.get("weight", "identity")
    quad = _quad(cfg, "quad", QuadConfig())
    gq = _quad(cfg, "gamma_quad", QuadConfig())
    opt = _opt(cfg, args.seed if args.seed is not None else 0)
    if weight == "optimal":
        est = fit_two_step(family, data, int(k), pairs, sites, quad, opt, gq, threads=args.threads)
    elif weight == "identity":
        est = fit(family, data, int(k), pairs, None, opt, sites, quad)
    else:
        raise UsageError(f"unknown weight kind {weight!r}")
    _emit(est.as_dict(), out, "fit.json")


def cmd_gamma(args, cfg, out: Path) -> None:
    family = get_family(args.family or cfg.get("family", "br"))
    theta = args.theta or cfg.get("theta")
    if theta is None:
        raise UsageError("parameter values are required (--theta)")
    theta = np.asarray([float(t) for t in theta])
    n_sites = cfg.get("d")
    sites = _sites(args.sites or cfg.get("sites_file"), n_sites)
    pairs = select_pairs(sites, _pair_rule(args.pairs or cfg.get("pairs")))
    quad = _quad(cfg, "gamma_quad", QuadConfig())
    payload = {"family": family.name, "theta": theta.tolist(),
               "coords": sites.coords.tolist(), "pairs": [list(p) for p in pairs.pairs]}
    G, hit = load_or_compute_gamma(family.model(theta, sites), pairs.pairs, quad,
                                   out / "cache", payload, args.threads)
    np.savetxt(out / "gamma.csv", G.matrix, delimiter=",", fmt="%.17g")
    print(json.dumps({"gamma": str(out / "gamma.csv"), "cache_hit": hit, "q": len(pairs),
                      "max_error": G.max_error}))


def cmd_test_isotropy(args, cfg, out: Path) -> None:
    data = DataMatrix.from_csv(args.data)
    sites = _sites(args.sites or cfg.get("sites_file"))
    k = args.k if args.k is not None else cfg.get("k")
    if k is None:
        raise UsageError("k is required")
    cutoff = args.cutoff_km if args.cutoff_km is not None else cfg.get("cutoff")
    res = test_isotropy(data, sites, int(k), cutoff=cutoff, quad=_quad(cfg, "quad", QuadConfig()),
                        opt=_opt(cfg, args.seed if args.seed is not None else 0),
                        gamma_quad=_quad(cfg, "gamma_quad", QuadConfig()), threads=args.threads)
    _emit(res.as_dict(), out, "isotropy.json")


def cmd_gof(args, cfg, out: Path) -> None:
    data = DataMatrix.from_csv(args.data)
    sites = _sites(args.sites or cfg.get("sites_file"))
    fitted = json.loads(Path(args.fit).read_text())
    est = MEstimate(fitted["family"], tuple(fitted["param_names"]),
                    np.asarray(fitted["theta_hat"]), fitted["objective"], fitted["k"],
                    tuple(map(tuple, fitted["pairs"])), fitted["converged"],
                    fitted["n_restarts"])
    k = args.k if args.k is not None else est.k
    table = gof_extremal(data, int(k), est, sites)
    paths = table.to_csv(out / "gof")
    print(json.dumps({"files": [str(p) for p in paths], "flagged": len(table.flagged),
                      "max_bin_gap": table.max_bin_gap()}))


def cmd_ingest(args, cfg, out: Path) -> None:
    import datetime as dt

    def day(s):
        return None if s is None else dt.date(int(s[:4]), int(s[4:6]), int(s[6:8]))

    stations = args.stations.split(",") if args.stations else cfg.get("stations")
    data = ingest_knmi(args.files, stations, day(args.start or cfg.get("start")),
                       day(args.end or cfg.get("end")), args.column)
    target = out / "data.csv"
    data.to_csv(target)
    print(json.dumps({"data": str(target), "shape": list(data.shape)}))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory")

    p = _Parser(prog="pairstdf", description="Pairwise M-estimation of tail dependence models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate data or run an experiment")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit a model to a data CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--sites")
    f.add_argument("--family")
    f.add_argument("--k", type=int)
    f.add_argument("--pairs", help="'all' or a distance cutoff")
    f.add_argument("--weight", choices=["identity", "optimal"])
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gamma", parents=[common], help="compute (or load) the Gamma matrix")
    g.add_argument("--family")
    g.add_argument("--theta", nargs="+")
    g.add_argument("--sites")
    g.add_argument("--pairs")
    g.set_defaults(func=cmd_gamma)

    t = sub.add_parser("test-isotropy", parents=[common], help="Wald test of isotropy")
    t.add_argument("--data", required=True)
    t.add_argument("--sites")
    t.add_argument("--k", type=int)
    t.add_argument("--cutoff-km", type=float)
    t.set_defaults(func=cmd_test_isotropy)

    o = sub.add_parser("gof", parents=[common], help="extremal coefficient diagnostics")
    o.add_argument("--data", required=True)
    o.add_argument("--sites", required=True)
    o.add_argument("--fit", required=True, help="JSON written by the fit command")
    o.add_argument("--k", type=int)
    o.set_defaults(func=cmd_gof)

    i = sub.add_parser("ingest", parents=[common], help="three-day summer maxima from KNMI files")
    i.add_argument("files", nargs="+")
    i.add_argument("--stations")
    i.add_argument("--start")
    i.add_argument("--end")
    i.add_argument("--column", default="FXX")
    i.set_defaults(func=cmd_ingest)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__,
                                 "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, _load_config(args.config), out)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except NUMERICAL as exc:
        return _fail("numerical", exc, 2)
    except (ValueError, KeyError, TypeError, OSError, IngestError) as exc:
        return _fail("input", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
