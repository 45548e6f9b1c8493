"""Scores and losses: Gaussian and empirical CRPS, CRPSS, SSIM and RMSE.

Every score comes in a plain numpy flavour for evaluation. CRPS and SSIM
also accept :class:`~enspost.tensor.Tensor` inputs and are then
differentiable, so the same code serves as a training loss.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf as _erf
from scipy.special import ndtr

from .tensor import Tensor, as_tensor, conv2d, tmean
from .tensor.core import _unbroadcast, make_op

SQRT2 = math.sqrt(2.0)
SQRTPI = math.sqrt(math.pi)


# -- CRPS ---------------------------------------------------------------------

def _check_sigma(sigma: np.ndarray) -> None:
    if not np.all(sigma > 0):
        raise ValueError("sigma must be > 0 everywhere")


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) against observation ``y``.

    With dP = y - mu,

        CRPS = dP erf(dP / (sqrt(2) sigma))
               + sigma / sqrt(pi) * (sqrt(2) exp(-dP^2 / (2 sigma^2)) - 1)

    Arrays broadcast. If ``mu`` or ``sigma`` is a Tensor the result is a
    Tensor with gradients w.r.t. both; ``y`` is treated as a constant.
    """
    if isinstance(mu, Tensor) or isinstance(sigma, Tensor):
        return _crps_gaussian_tensor(mu, sigma, y)
    mu, sigma, y = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, y))
    _check_sigma(sigma)
    dp = y - mu
    e = np.exp(-dp * dp / (2 * sigma * sigma))
    out = dp * _erf(dp / (SQRT2 * sigma)) + sigma / SQRTPI * (SQRT2 * e - 1.0)
    return out if out.ndim else float(out)


def crps_gaussian_grads(mu, sigma, y) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dCRPS/dmu, dCRPS/dsigma).

    dCRPS/d(dP) = erf(dP / (sqrt(2) sigma)), so dCRPS/dmu is its negative;
    dCRPS/dsigma = (sqrt(2) exp(-dP^2 / (2 sigma^2)) - 1) / sqrt(pi).
    """
    mu, sigma, y = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, y))
    _check_sigma(sigma)
    dp = y - mu
    e = np.exp(-dp * dp / (2 * sigma * sigma))
    return -_erf(dp / (SQRT2 * sigma)), (SQRT2 * e - 1.0) / SQRTPI


def _crps_gaussian_tensor(mu, sigma, y) -> Tensor:
    ref = mu if isinstance(mu, Tensor) else sigma
    mu = as_tensor(mu, ref.dtype)
    sigma = as_tensor(sigma, ref.dtype)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=ref.dtype)
    _check_sigma(sigma.data)
    dp = y - mu.data
    s = sigma.data
    e = np.exp(-dp * dp / (2 * s * s))
    erf_term = _erf(dp / (SQRT2 * s)).astype(ref.dtype)
    out = dp * erf_term + s / SQRTPI * (SQRT2 * e - 1.0)

    def bw(g):
        g_mu = _unbroadcast(-g * erf_term, mu.shape)
        g_sigma = _unbroadcast(g * (SQRT2 * e - 1.0) / SQRTPI, sigma.shape)
        return g_mu, g_sigma
    return make_op(out.astype(ref.dtype), (mu, sigma), bw, "crps_gaussian")


def crps_numeric(forecast, y, lo: float | None = None, hi: float | None = None,
                 n_points: int = 20001):
    """CRPS by direct evaluation of the integral of (F(x) - 1{x >= y})^2.

    Parameters
    ----------
    forecast : callable or array_like
        Either a CDF ``F(x)`` (vectorised over ``x``) or ensemble members,
        stacked along axis 0.
    y : float or array_like
        Observation(s); for ensembles must broadcast against ``forecast[0]``.
    lo, hi : float
        Integration bounds, required for a CDF. They are widened to include
        ``y`` if necessary.
    n_points : int
        Trapezoid points on each side of ``y`` (CDF case only).

    Notes
    -----
    For a CDF the integral is split at ``y`` so both halves are smooth and
    the trapezoid rule converges at second order. For an ensemble the
    integrand is a step function and is integrated exactly, interval by
    interval.
    """
    if callable(forecast):
        return _crps_quadrature(forecast, float(y), lo, hi, n_points)
    x = np.asarray(forecast, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValueError("ensemble must contain at least one member")
    return _crps_step(x, np.asarray(y, dtype=np.float64))


def _crps_quadrature(cdf: Callable, y: float, lo, hi, n_points: int) -> float:
    if lo is None or hi is None:
        raise ValueError("lo and hi are required when integrating a CDF")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    lo, hi = min(lo, y), max(hi, y)
    total = 0.0
    if y > lo:
        xs = np.linspace(lo, y, n_points)
        total += np.trapezoid(np.asarray(cdf(xs)) ** 2, xs)
    if hi > y:
        xs = np.linspace(y, hi, n_points)
        total += np.trapezoid((1.0 - np.asarray(cdf(xs))) ** 2, xs)
    return float(total)


def _crps_step(x: np.ndarray, y: np.ndarray):
    m = x.shape[0]
    y = np.broadcast_to(y, x.shape[1:])
    pts = np.concatenate([x, y[None]], axis=0)
    order = np.argsort(pts, axis=0, kind="stable")
    z = np.take_along_axis(pts, order, axis=0)
    is_obs = order == m
    # on [z_i, z_{i+1}): F = members among the first i+1 points / m,
    # indicator = 1 once the observation has been passed
    seen_obs = np.cumsum(is_obs, axis=0)
    f = (np.arange(1, m + 2).reshape((-1,) + (1,) * y.ndim) - seen_obs) / m
    widths = np.diff(z, axis=0)
    out = (widths * (f[:-1] - seen_obs[:-1]) ** 2).sum(axis=0)
    return out if out.ndim else float(out)


def crps_ensemble_pairwise(x, y):
    """Independent form mean|x - y| - mean|x - x'| / 2 (for checking)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t1 = np.abs(x - y).mean(axis=0)
    t2 = np.abs(x[:, None] - x[None, :]).mean(axis=(0, 1))
    return t1 - 0.5 * t2


def gaussian_cdf(mu: float, sigma: float) -> Callable:
    def cdf(xs):
        return ndtr((np.asarray(xs) - mu) / sigma)
    return cdf


def crps_gaussian_numeric(mu: float, sigma: float, y: float, n_points: int = 20001) -> float:
    """Quadrature oracle for :func:`crps_gaussian` over mu +- 10 sigma."""
    return crps_numeric(gaussian_cdf(mu, sigma), y, mu - 10 * sigma, mu + 10 * sigma, n_points)


def crpss(crps_pred, crps_orig) -> float:
    """Skill score 1 - pred / reference; positive means better than the reference."""
    crps_orig = float(crps_orig)
    if not crps_orig > 0:
        raise ValueError("reference CRPS must be > 0")
    return 1.0 - float(crps_pred) / crps_orig


def rmse(a, b, weights=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if weights is None:
        return float(np.sqrt(sq.mean()))
    w = np.broadcast_to(weights, sq.shape)
    return float(np.sqrt((sq * w).sum() / w.sum()))


# -- SSIM ---------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError("window size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma_w: float = 1.5, data_range: float | None = None,
         c1: float | None = None, c2: float | None = None):
    """Mean structural similarity between two fields.

    Local statistics use a Gaussian window with no padding ("valid"). Inputs
    are (H, W) or (N, C, H, W); with Tensor inputs the result is a
    differentiable scalar Tensor, otherwise a float.

    ``c1``/``c2`` default to (0.01 L)^2 and (0.03 L)^2 where ``L`` is
    ``data_range``; if that is also omitted it is the joint range of both
    inputs (1 when both are the same constant), which keeps the score
    symmetric.
    """
    tensor_mode = isinstance(a, Tensor) or isinstance(b, Tensor)
    ref = a if isinstance(a, Tensor) else b
    dtype = ref.dtype if tensor_mode else np.float64
    a = as_tensor(a if tensor_mode else np.asarray(a, np.float64), dtype)
    b = as_tensor(b if tensor_mode else np.asarray(b, np.float64), dtype)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a.reshape(1, 1, *a.shape), b.reshape(1, 1, *b.shape)
    elif a.ndim != 4:
        raise ValueError("ssim expects (H, W) or (N, C, H, W) inputs")
    n, c, h, w = a.shape
    if window > min(h, w):
        raise ValueError(f"window {window} larger than field {h}x{w}")
    if c1 is None or c2 is None:
        if data_range is None:
            data_range = float(max(a.data.max(), b.data.max()) - min(a.data.min(), b.data.min()))
            data_range = data_range or 1.0
        c1 = (0.01 * data_range) ** 2 if c1 is None else c1
        c2 = (0.03 * data_range) ** 2 if c2 is None else c2
    a = a.reshape(n * c, 1, h, w)
    b = b.reshape(n * c, 1, h, w)
    kern = Tensor(gaussian_window(window, sigma_w).reshape(1, 1, window, window).astype(dtype))

    def blur(x):
        return conv2d(x, kern, padding="valid")

    mu_a, mu_b = blur(a), blur(b)
    maa, mbb, mab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - maa
    var_b = blur(b * b) - mbb
    cov = blur(a * b) - mab
    smap = ((2 * mab + c1) * (2 * cov + c2)) / ((maa + mbb + c1) * (var_a + var_b + c2))
    out = tmean(smap)
    return out if tensor_mode else float(out.data)


# -- distributions and reports -------------------------------------------------

@dataclass
class ForecastDistribution:
    """Per-gridpoint Gaussian forecast in field units."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same shape")
        _check_sigma(self.sigma)

    def crps(self, y) -> np.ndarray:
        return crps_gaussian(self.mu, self.sigma, y)


def latitude_weights(height: int) -> np.ndarray:
    """cos(latitude) weights for rows running north to south, mean 1."""
    lat = np.deg2rad(90.0 - (np.arange(height) + 0.5) * 180.0 / height)
    w = np.cos(lat)
    return w / w.mean()


def parse_region(text: str) -> tuple[int, int, int, int]:
    """Parse ``"y0:y1,x0:x1"`` into half-open index bounds."""
    try:
        ys, xs = text.split(",")
        y0, y1 = (int(v) for v in ys.split(":"))
        x0, x1 = (int(v) for v in xs.split(":"))
    except ValueError as exc:
        raise ValueError(f"region must look like 'y0:y1,x0:x1', got {text!r}") from exc
    if y1 <= y0 or x1 <= x0 or min(y0, x0) < 0:
        raise ValueError(f"empty or negative region {text!r}")
    return y0, y1, x0, x1


def area_mean(values: np.ndarray, area_weighted: bool = False, region=None) -> float:
    """Mean over the last two (lat, lon) axes and any leading ones."""
    v = np.asarray(values, dtype=np.float64)
    h = v.shape[-2]
    w = latitude_weights(h)[:, None] if area_weighted else np.ones((h, 1))
    w = np.broadcast_to(w, v.shape[-2:])
    if region is not None:
        y0, y1, x0, x1 = region
        if y1 > v.shape[-2] or x1 > v.shape[-1]:
            raise ValueError(f"region {region} exceeds grid {v.shape[-2:]}")
        v = v[..., y0:y1, x0:x1]
        w = w[y0:y1, x0:x1]
    w = np.broadcast_to(w, v.shape)
    return float((v * w).sum() / w.sum())


CSV_COLUMNS = ("date_index", "region", "metric", "value")


@dataclass
class ScoreReport:
    """Per-date score maps for one model and metric.

    ``maps`` is (D, H, W); ``regions`` maps a name to (y0, y1, x0, x1).
    """

    metric: str
    maps: np.ndarray
    date_index: np.ndarray
    regions: dict = field(default_factory=dict)
    area_weighted: bool = False

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.date_index = np.asarray(self.date_index)
        if self.maps.ndim != 3 or len(self.date_index) != self.maps.shape[0]:
            raise ValueError("maps must be (D, H, W) with one date index per map")

    @property
    def per_gridpoint(self) -> np.ndarray:
        return self.maps.mean(axis=0)

    @property
    def global_mean(self) -> float:
        return area_mean(self.maps, self.area_weighted)

    def region_means(self) -> dict:
        return {name: area_mean(self.maps, self.area_weighted, box) for name, box in self.regions.items()}

    def rows(self) -> list[tuple]:
        """One row per (date, region) plus the aggregate rows (date_index "all")."""
        out = []
        boxes = [("global", None)] + list(self.regions.items())
        for d, m in zip(self.date_index, self.maps):
            for name, box in boxes:
                out.append((int(d), name, self.metric, area_mean(m, self.area_weighted, box)))
        for name, box in boxes:
            out.append(("all", name, self.metric, area_mean(self.maps, self.area_weighted, box)))
        return out

    def to_csv(self, path) -> None:
        write_score_rows(path, self.rows())


def write_score_rows(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for d, region, metric, value in rows:
            writer.writerow([d, region, metric, repr(float(value))])


def read_score_rows(path) -> list[tuple]:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["date_index"], r["region"], r["metric"], float(r["value"])) for r in reader]
