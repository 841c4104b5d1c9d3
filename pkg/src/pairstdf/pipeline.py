"""Wind-gust ingestion, extremal coefficient diagnostics and the isotropy test."""

from __future__ import annotations

import csv
import datetime as dt
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .asymptotics import ISOTROPY_TRANSFORM, isotropy_statistic, m_matrix, null_isotropic_theta
from .empirical import DataMatrix, extremal_coeff_hat, rank_transform
from .estimator import MEstimate, OptConfig, PairSet, fit_two_step, select_pairs
from .models import SiteSet, get_family
from .quadrature import QuadConfig


class IngestError(ValueError):
    pass


SUMMER_MONTHS = (6, 7, 8)
BLOCK_DAYS = 3


def _parse_date(s: str) -> dt.date:
    s = s.strip()
    try:
        return dt.date(int(s[:4]), int(s[4:6]), int(s[6:8]))
    except (ValueError, IndexError) as exc:
        raise IngestError(f"invalid date {s!r}") from exc


def read_gust_records(path, value_column: str = "FXX") -> list[tuple[str, dt.date, float | None]]:
    """Rows ``(station, date, value)`` from a normalised or a raw KNMI export.

    The normalised layout has the header ``station,date,value``. Raw exports
    use ``# STN,YYYYMMDD,...`` headers; the gust column is ``value_column``.
    Empty fields are missing values.
    """
    recs = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header_at = None
    for i, r in enumerate(rows):
        cells = [c.strip().lstrip("#").strip().lower() for c in r]
        if "station" in cells or "stn" in cells:
            header_at = i
    if header_at is None:
        raise IngestError(f"{path}: no header row found")
    head = [c.strip().lstrip("#").strip().lower() for c in rows[header_at]]
    col_st = head.index("station") if "station" in head else head.index("stn")
    col_dt = head.index("date") if "date" in head else head.index("yyyymmdd")
    want = "value" if "value" in head else value_column.lower()
    if want not in head:
        raise IngestError(f"{path}: column {value_column!r} not found")
    col_v = head.index(want)
    for r in rows[header_at + 1:]:
        if r[0].lstrip().startswith("#"):
            continue
        raw = r[col_v].strip() if col_v < len(r) else ""
        recs.append((r[col_st].strip(), _parse_date(r[col_dt]), float(raw) if raw else None))
    return recs


def _summer_days(year: int):
    d = dt.date(year, 6, 1)
    while d.month in SUMMER_MONTHS:
        yield d
        d += dt.timedelta(days=1)


def ingest_knmi(files, stations=None, start=None, end=None, value_column: str = "FXX",
                return_dates: bool = False):
    """Three-day summer maxima for each station, with complete-case deletion.

    Blocks start on 1 June and run consecutively through August; the final
    block of a summer holds the two left-over days. A block value is missing
    only if all its days are missing. Rows with a missing value at any
    station are removed.
    """
    files = [files] if isinstance(files, (str, Path)) else list(files)
    series: dict = defaultdict(dict)
    for path in files:
        for st, day, val in read_gust_records(path, value_column):
            if start is not None and day < start:
                continue
            if end is not None and day > end:
                continue
            if day in series[st] and series[st][day] != val:
                raise IngestError(f"station {st}: conflicting records for {day}")
            series[st][day] = val
    if stations is None:
        stations = sorted(series)
    stations = [str(s) for s in stations]
    unknown = [s for s in stations if s not in series]
    if unknown:
        raise IngestError(f"unknown station id(s): {', '.join(unknown)}")

    years = sorted({d.year for s in stations for d in series[s] if d.month in SUMMER_MONTHS})
    gaps = []
    for s in stations:
        days = sorted(series[s])
        lo, hi = days[0], days[-1]
        for y in years:
            for d in _summer_days(y):
                if lo <= d <= hi and d not in series[s]:
                    gaps.append(f"{s}:{d:%Y%m%d}")
    if gaps:
        shown = ", ".join(gaps[:20]) + (" ..." if len(gaps) > 20 else "")
        raise IngestError(f"non-contiguous dates ({len(gaps)} absent days): {shown}")

    rows, dates = [], []
    for y in years:
        days = list(_summer_days(y))
        for b in range(0, len(days), BLOCK_DAYS):
            block = days[b:b + BLOCK_DAYS]
            row = []
            for s in stations:
                vals = [series[s].get(d) for d in block]
                vals = [v for v in vals if v is not None]
                row.append(max(vals) if vals else None)
            if all(v is not None for v in row):
                rows.append(row)
                dates.append(block[0])
    if len(rows) < 2:
        raise IngestError("fewer than two complete blocks after deletion")
    data = DataMatrix(np.array(rows, dtype=float), tuple(stations))
    return (data, dates) if return_dates else data


# --------------------------------------------------------------------------
# extremal coefficient diagnostics


@dataclass
class GofTable:
    pairs: list
    a_hat: np.ndarray
    coeff_hat: np.ndarray
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    bin_means: np.ndarray
    bin_counts: np.ndarray
    curve_a: np.ndarray
    curve: np.ndarray
    flagged: list = field(default_factory=list)

    def max_bin_gap(self) -> float:
        ok = self.bin_counts > 0
        model = 2.0 * ndtr(self.bin_centers[ok] / 2.0)
        return float(np.max(np.abs(self.bin_means[ok] - model)))

    def to_csv(self, stem) -> list[Path]:
        stem = Path(stem)
        out = [stem.with_name(stem.name + s) for s in ("_pairs.csv", "_bins.csv", "_curve.csv")]
        with open(out[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "v", "a_hat", "coeff_hat", "flagged"])
            for (u, v), a, c in zip(self.pairs, self.a_hat, self.coeff_hat):
                w.writerow([u, v, repr(float(a)), repr(float(c)), int(not 0.9 <= c <= 2.1)])
        with open(out[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lower", "upper", "center", "count", "mean_coeff", "model_coeff"])
            for i in range(len(self.bin_centers)):
                w.writerow([repr(float(self.bin_edges[i])), repr(float(self.bin_edges[i + 1])),
                            repr(float(self.bin_centers[i])), int(self.bin_counts[i]),
                            repr(float(self.bin_means[i])),
                            repr(float(2.0 * ndtr(self.bin_centers[i] / 2.0)))])
        with open(out[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "coeff"])
            for a, c in zip(self.curve_a, self.curve):
                w.writerow([repr(float(a)), repr(float(c))])
        return out


def model_extremal_curve(a) -> np.ndarray:
    """Brown-Resnick extremal coefficient ``2 Phi(a / 2)``."""
    return 2.0 * ndtr(np.asarray(a, dtype=float) / 2.0)


def gof_extremal(data, k: int, fitted: MEstimate, sites: SiteSet, n_bins: int = 6,
                 n_curve: int = 100) -> GofTable:
    """Nonparametric extremal coefficients of all pairs against the fitted curve."""
    if not fitted.family.startswith("br"):
        raise ValueError("goodness-of-fit diagnostics need a Brown-Resnick fit")
    model = get_family(fitted.family).model(fitted.theta_hat, sites)
    rs = rank_transform(data)
    d = rs.d
    pairs = [(u, v) for u in range(d) for v in range(u + 1, d)]
    a = np.array([model.scale(u, v) for u, v in pairs])
    coeff = np.array([extremal_coeff_hat(rs, k, p) for p in pairs])
    edges = np.linspace(a.min(), a.max(), n_bins + 1)
    which = np.clip(np.searchsorted(edges, a, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=coeff, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    grid = np.linspace(0.0, max(float(a.max()), 1e-12), n_curve)
    flagged = [p for p, c in zip(pairs, coeff) if not 0.9 <= c <= 2.1]
    return GofTable(pairs, a, coeff, edges, centers, means, counts, grid,
                    model_extremal_curve(grid), flagged)


# --------------------------------------------------------------------------
# isotropy


@dataclass
class IsotropyResult:
    statistic: float
    p_value: float
    estimate: MEstimate
    theta_null: np.ndarray
    M2: np.ndarray

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "theta_null": [float(t) for t in self.theta_null],
                "M2": self.M2.tolist(), "estimate": self.estimate.as_dict()}


def test_isotropy(data, sites: SiteSet, k: int, pairs=None, cutoff: float | None = None,
                  quad: QuadConfig = QuadConfig(), opt: OptConfig = OptConfig(),
                  gamma_quad: QuadConfig | None = None, threads: int = 1) -> IsotropyResult:
    """Two-step fit of the anisotropic model, then the Wald test of isotropy.

    The covariance block comes from the optimal-weight variance evaluated at
    ``(alpha_hat, s/2, s/2, 0)`` where ``s`` is the fitted trace of the
    anisotropy matrix.
    """
    if pairs is None:
        pairs = select_pairs(sites, cutoff if cutoff is not None else "all", 4)
    pairs = pairs if isinstance(pairs, PairSet) else PairSet(tuple(pairs))
    gq = quad if gamma_quad is None else gamma_quad
    fam = get_family("br_tau")
    est = fit_two_step(fam, data, k, pairs, sites, quad, opt, gq, compute_se=False,
                       threads=threads)
    theta0 = null_isotropic_theta(est.theta_hat)
    av = m_matrix(fam, theta0, sites, pairs.pairs, None, gq, threads=threads)
    res = isotropy_statistic(est.theta_hat, k, av.M_opt)
    A = ISOTROPY_TRANSFORM
    M2 = (A @ av.M_opt @ A.T)[2:, 2:]
    return IsotropyResult(res.statistic, res.p_value, est, theta0, M2)


test_isotropy.__test__ = False  # keep pytest from collecting it
