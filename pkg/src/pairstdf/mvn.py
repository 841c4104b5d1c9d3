"""Bivariate and trivariate normal distribution functions.

Both routines are vectorised over the integration limits while the correlation
structure is held fixed per call, which is the access pattern of the
Hüsler-Reiss margins: the correlation matrix depends on the site geometry only.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = ["bvn_cdf", "tvn_cdf", "mvn_cdf", "InvalidCorrelation"]

_CLIP = 38.0
_TWOPI = 2.0 * np.pi

# Half sets of Gauss-Legendre abscissae on [-1, 1] (6, 12 and 20 points).
_GL_W = (
    np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
              0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
              0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
              0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
              0.1527533871307259]),
)
_GL_X = (
    np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
    np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
              0.5873179542866171, 0.3678314989981802, 0.1252334085114692]),
    np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
              0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
              0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
              0.07652652113349733]),
)


class InvalidCorrelation(ValueError):
    """Raised for correlation matrices that are not valid (PSD, unit diagonal)."""


def _bvnu(h: np.ndarray, k: np.ndarray, r: float) -> np.ndarray:
    """Upper orthant probability P(X > h, Y > k), Drezner-Wesolowsky/Genz scheme."""
    h = np.clip(np.asarray(h, dtype=float), -_CLIP, _CLIP)
    k = np.clip(np.asarray(k, dtype=float), -_CLIP, _CLIP)
    h, k = np.broadcast_arrays(h, k)
    ar = abs(r)
    if ar < 0.3:
        w, x = _GL_W[0], _GL_X[0]
    elif ar < 0.75:
        w, x = _GL_W[1], _GL_X[1]
    else:
        w, x = _GL_W[2], _GL_X[2]

    hk = h * k
    if ar < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = np.arcsin(r)
        bvn = np.zeros(h.shape)
        for wi, xi in zip(w, x):
            for sgn in (-1.0, 1.0):
                sn = np.sin(asr * (1.0 + sgn * xi) / 2.0)
                bvn += wi * np.exp((sn * hk - hs) / (1.0 - sn * sn))
        return bvn * asr / (4.0 * np.pi) + ndtr(-h) * ndtr(-k)

    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros(h.shape)
    if ar < 1.0:
        aas = (1.0 - r) * (1.0 + r)
        a = np.sqrt(aas)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -(bs / aas + hk) / 2.0
        with np.errstate(over="ignore", invalid="ignore"):
            t1 = a * np.exp(asr) * (1 - c * (bs - aas) * (1 - d * bs / 5) / 3
                                    + c * d * aas * aas / 5)
            bvn = np.where(asr > -100.0, t1, 0.0)
            b = np.sqrt(bs)
            sp = np.sqrt(_TWOPI) * ndtr(-b / a)
            t2 = np.exp(-hk / 2.0) * sp * b * (1 - c * bs * (1 - d * bs / 5) / 3)
            bvn = bvn - np.where(-hk < 100.0, t2, 0.0)
            a = a / 2.0
            for wi, xi in zip(w, x):
                for sgn in (-1.0, 1.0):
                    xs = (a * (sgn * xi + 1.0)) ** 2
                    rs = np.sqrt(1.0 - xs)
                    asr = -(bs / xs + hk) / 2.0
                    sp = 1.0 + c * xs * (1.0 + d * xs)
                    ep = np.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                    term = a * wi * np.exp(asr) * (ep - sp)
                    bvn = bvn + np.where(asr > -100.0, term, 0.0)
        bvn = -bvn / _TWOPI
    if r > 0:
        bvn = bvn + ndtr(-np.maximum(h, k))
    else:
        bvn = -bvn + np.maximum(0.0, ndtr(-h) - ndtr(-k))
    return bvn


def bvn_cdf(h, k, r: float) -> np.ndarray:
    """Standard bivariate normal distribution function P(X <= h, Y <= k).

    ``h`` and ``k`` broadcast against each other; ``r`` is a scalar in [-1, 1].
    Accuracy is about 1e-15 absolute.
    """
    r = float(r)
    if not -1.0 - 1e-12 <= r <= 1.0 + 1e-12:
        raise InvalidCorrelation(f"correlation {r} outside [-1, 1]")
    r = min(1.0, max(-1.0, r))
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    out = _bvnu(-h, -k, r)
    return np.clip(out, 0.0, 1.0)


def _phi2(x, y, r):
    s = 1.0 - r * r
    return np.exp(-(x * x - 2.0 * r * x * y + y * y) / (2.0 * s)) / (_TWOPI * np.sqrt(s))


def _gl01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


# Panels for the path integral in the substituted variable u; clustered near
# u = 1 where singular correlation matrices make the integrand steep.
_PANELS = (0.0, 0.5, 0.8, 0.95, 1.0)


def _path_nodes(n: int):
    us, ws = [], []
    x, w = _gl01(n)
    for a, b in zip(_PANELS[:-1], _PANELS[1:]):
        us.append(a + (b - a) * x)
        ws.append((b - a) * w)
    u = np.concatenate(us)
    wu = np.concatenate(ws)
    # t = 1 - (1 - u)^2 turns sqrt(1 - t) singularities into linear ones
    t = 1.0 - (1.0 - u) ** 2
    wt = 2.0 * (1.0 - u) * wu
    return t, wt


_PATH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _tvn_regular(h, R, n_nodes):
    # retained pair (2, 3) is the most correlated one
    r = [abs(R[0, 1]), abs(R[0, 2]), abs(R[1, 2])]
    first = int(np.argmax(r))
    order = {0: (2, 0, 1), 1: (1, 0, 2), 2: (0, 1, 2)}[first]
    h = h[:, order]
    Rp = R[np.ix_(order, order)]
    r12, r13, r23 = Rp[0, 1], Rp[0, 2], Rp[1, 2]
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]

    out = ndtr(h1) * bvn_cdf(h2, h3, r23)
    if r12 == 0.0 and r13 == 0.0:
        return out

    if n_nodes not in _PATH_CACHE:
        _PATH_CACHE[n_nodes] = _path_nodes(n_nodes)
    t, wt = _PATH_CACHE[n_nodes]
    t = t[:, None]
    wt = wt[:, None]
    a12 = t * r12
    a13 = t * r13
    det = 1.0 - a12 ** 2 - a13 ** 2 - r23 ** 2 + 2.0 * a12 * a13 * r23
    det = np.maximum(det, 0.0)
    acc = np.zeros(h1.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        if r12 != 0.0:
            s = 1.0 - a12 ** 2
            mu = ((a13 - a12 * r23) * h1 + (r23 - a12 * a13) * h2) / s
            sd = np.sqrt(det / s)
            cond = ndtr((h3 - mu) / sd)
            acc += np.sum(wt * r12 * _phi2(h1, h2, a12) * cond, axis=0)
        if r13 != 0.0:
            s = 1.0 - a13 ** 2
            mu = ((a12 - a13 * r23) * h1 + (r23 - a12 * a13) * h3) / s
            sd = np.sqrt(det / s)
            cond = ndtr((h2 - mu) / sd)
            acc += np.sum(wt * r13 * _phi2(h1, h3, a13) * cond, axis=0)
    return out + acc


def tvn_cdf(h, R, n_nodes: int = 8, tol: float = 1e-12) -> np.ndarray:
    """Standard trivariate normal distribution function P(X <= h).

    ``h`` has shape (..., 3); ``R`` is a fixed 3x3 correlation matrix, which
    may be singular (positive semi-definite). Uses Plackett's identity along
    the path that switches on the correlations of the first coordinate, with
    ``n_nodes`` Gauss-Legendre points on each of four panels.
    """
    R = _check_corr(R, 3)
    h = np.clip(np.asarray(h, dtype=float), -_CLIP, _CLIP)
    shape = h.shape[:-1]
    h = h.reshape(-1, 3)

    # perfectly (anti)correlated pairs collapse one coordinate
    for i, j in ((0, 1), (0, 2), (1, 2)):
        rij = R[i, j]
        if abs(rij) >= 1.0 - tol:
            kk = 3 - i - j
            rik = R[i, kk]
            if rij > 0:
                hm = np.minimum(h[:, i], h[:, j])
                out = bvn_cdf(hm, h[:, kk], rik)
            else:
                # X_j = -X_i: the event is -h_j <= X_i <= h_i
                lo = -h[:, j]
                out = bvn_cdf(h[:, i], h[:, kk], rik) - bvn_cdf(lo, h[:, kk], rik)
                out = np.where(h[:, i] > lo, np.maximum(out, 0.0), 0.0)
            return np.clip(out, 0.0, 1.0).reshape(shape)

    out = _tvn_regular(h, R, n_nodes)
    return np.clip(out, 0.0, 1.0).reshape(shape)


def _check_corr(R, dim: int) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (dim, dim):
        raise InvalidCorrelation(f"expected a {dim}x{dim} matrix, got {R.shape}")
    if not np.allclose(R, R.T, atol=1e-10) or not np.allclose(np.diag(R), 1.0, atol=1e-10):
        raise InvalidCorrelation("correlation matrix must be symmetric with unit diagonal")
    if np.any(np.abs(R) > 1.0 + 1e-10):
        raise InvalidCorrelation("correlations must lie in [-1, 1]")
    if dim > 1 and np.linalg.eigvalsh(R).min() < -1e-8:
        raise InvalidCorrelation("correlation matrix is not positive semi-definite")
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def mvn_cdf(upper, corr) -> np.ndarray:
    """Standard normal distribution function in dimension 1, 2 or 3.

    ``upper`` has shape (..., dim) and ``corr`` is the dim x dim correlation
    matrix shared by all evaluation points.
    """
    upper = np.asarray(upper, dtype=float)
    dim = upper.shape[-1]
    R = _check_corr(corr, dim)
    if dim == 1:
        return ndtr(upper[..., 0])
    if dim == 2:
        return bvn_cdf(upper[..., 0], upper[..., 1], R[0, 1])
    if dim == 3:
        return tvn_cdf(upper, R)
    raise ValueError(f"mvn_cdf supports dimensions 1-3, got {dim}")
