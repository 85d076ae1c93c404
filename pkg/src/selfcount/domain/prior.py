"""Truncated power-law prior over per-cell crowd counts.

The tail law has density proportional to c^(-alpha) * exp(-lambda * c) on
[1, c_max_cell]. A ``head_mass_fraction`` of the probability (the mass the
tail law places just above 1) is moved to a uniform component on [0, 1], so
the prior is a two-component mixture:

    with prob h:      Uniform(0, 1)
    with prob 1 - h:  tail law restricted above its own h-quantile

``alpha`` is stored as the positive magnitude of the decay exponent.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.optimize import bisect, minimize
from scipy.stats import norm

from selfcount.domain.transport import EmpiricalMeasure

logger = logging.getLogger(__name__)

FAMILIES = ("truncated-power-law", "pareto", "lognormal")
LAMBDA_BRACKET = (1e-6, 10.0)
BRACKET_WIDENINGS = 3
MIN_FIT_SAMPLES = 100

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class CalibrationError(RuntimeError):
    """No lambda brackets the requested tail probability."""

    def __init__(self, message: str, bracket: Tuple[float, float], values: Tuple[float, float]):
        super().__init__(f"{message} (bracket={bracket}, residuals={values})")
        self.bracket = bracket
        self.values = values


class FitError(RuntimeError):
    """Maximum-likelihood fit impossible for the given samples."""


class CountPrior(Protocol):
    """Anything Stage 2 can draw target cell counts from."""

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def mean(self) -> float: ...


def _tail_density(c: np.ndarray, alpha: float, lam: float) -> np.ndarray:
    return np.power(c, -alpha) * np.exp(-lam * c)


def _tail_integral(lo: float, hi: float, alpha: float, lam: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, _ = integrate.quad(
            lambda c: c**-alpha * math.exp(-lam * c),
            lo,
            hi,
            epsabs=0.0,
            epsrel=1e-11,
            limit=200,
        )
    return value


def tail_cdf(c: float, alpha: float, lam: float) -> float:
    """CDF at ``c`` of c^-alpha exp(-lam c) normalized on [1, inf)."""
    if c <= 1.0:
        return 0.0
    inside = _tail_integral(1.0, c, alpha, lam)
    beyond = _tail_integral(c, np.inf, alpha, lam)
    return inside / (inside + beyond)


def derive_cell_max(c_fmax: float, m: int, n: int, s_crop: float) -> float:
    """Per-cell maximum count from the full-image maximum."""
    for name, value in (("c_fmax", c_fmax), ("m", m), ("n", n), ("s_crop", s_crop)):
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")
    return c_fmax / (m * n * s_crop)


def calibrate_lambda(
    alpha: float, c_max_cell: float, s_images: int, rtol: float = 1e-8
) -> float:
    """Find lambda so the tail CDF at ``c_max_cell`` equals 1 - 1/s_images."""
    if s_images < 2:
        raise ValueError(f"s_images must be at least 2, got {s_images}")
    if c_max_cell <= 1:
        raise ValueError(f"c_max_cell must exceed 1, got {c_max_cell}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")

    target = 1.0 - 1.0 / s_images

    def residual(lam: float) -> float:
        return tail_cdf(c_max_cell, alpha, lam) - target

    lo, hi = LAMBDA_BRACKET
    for widening in range(BRACKET_WIDENINGS + 1):
        f_lo, f_hi = residual(lo), residual(hi)
        if f_lo == 0.0:
            return lo
        if f_hi == 0.0:
            return hi
        if f_lo * f_hi < 0:
            break
        if widening < BRACKET_WIDENINGS:
            lo, hi = lo / 10.0, hi * 10.0
    else:
        raise CalibrationError(
            f"no sign change calibrating lambda for alpha={alpha}, "
            f"c_max_cell={c_max_cell}, s_images={s_images}",
            bracket=(lo, hi),
            values=(f_lo, f_hi),
        )

    lam = bisect(residual, lo, hi, xtol=1e-15, rtol=rtol, maxiter=200)
    logger.debug(
        "calibrated lambda=%.6g for alpha=%g c_max_cell=%g S=%d",
        lam,
        alpha,
        c_max_cell,
        s_images,
    )
    return float(lam)


@dataclass(frozen=True)
class PriorSpec:
    """Truncated power law with head mass redistributed onto [0, 1]."""

    alpha: float
    lam: float
    c_max_cell: float
    head_mass_fraction: float = 0.30
    grid_resolution: int = 4096

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.c_max_cell <= 1:
            raise ValueError(f"c_max_cell must exceed 1, got {self.c_max_cell}")
        if not 0.0 <= self.head_mass_fraction <= 0.5:
            raise ValueError(
                f"head_mass_fraction must lie in [0, 0.5], got {self.head_mass_fraction}"
            )
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be at least 2")

    @classmethod
    def from_crowd(
        cls,
        alpha: float,
        c_fmax: float,
        m: int,
        n: int,
        s_crop: float,
        s_images: int,
        head_mass_fraction: float = 0.30,
        grid_resolution: int = 4096,
    ) -> "PriorSpec":
        """Calibrated prior from the full-image maximum count C^fmax."""
        c_max_cell = derive_cell_max(c_fmax, m, n, s_crop)
        lam = calibrate_lambda(alpha, c_max_cell, s_images)
        return cls(alpha, lam, c_max_cell, head_mass_fraction, grid_resolution)

    @cached_property
    def _table(self) -> Tuple[np.ndarray, np.ndarray, float]:
        grid = np.geomspace(1.0, self.c_max_cell, self.grid_resolution)
        mid = 0.5 * (grid[1:] + grid[:-1])
        half = 0.5 * (grid[1:] - grid[:-1])
        points = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        segments = half * (_tail_density(points, self.alpha, self.lam) @ _GL_WEIGHTS)
        cumulative = np.concatenate(([0.0], np.cumsum(segments)))
        norm_const = float(cumulative[-1])
        cdf = cumulative / norm_const
        cdf[-1] = 1.0
        return grid, cdf, norm_const

    @property
    def cdf_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """Tabulated CDF of the tail law on [1, c_max_cell]."""
        grid, cdf, _ = self._table
        return grid, cdf

    @cached_property
    def head_quantile(self) -> float:
        """Count below which the tail law holds ``head_mass_fraction`` of its mass."""
        grid, cdf = self.cdf_table
        return float(np.interp(self.head_mass_fraction, cdf, grid))

    def tail_pdf(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        _, _, norm_const = self._table
        inside = (c >= 1.0) & (c <= self.c_max_cell)
        safe = np.where(inside, c, 1.0)
        return np.where(inside, _tail_density(safe, self.alpha, self.lam) / norm_const, 0.0)

    def pdf(self, c: np.ndarray) -> np.ndarray:
        """Density of the head-redistributed mixture."""
        c = np.asarray(c, dtype=float)
        head = np.where((c >= 0.0) & (c < 1.0), self.head_mass_fraction, 0.0)
        tail = np.where(c >= self.head_quantile, self.tail_pdf(c), 0.0)
        return head + tail

    def cdf(self, c: np.ndarray) -> np.ndarray:
        """CDF of the head-redistributed mixture."""
        c = np.asarray(c, dtype=float)
        grid, table = self.cdf_table
        h = self.head_mass_fraction
        head = h * np.clip(c, 0.0, 1.0)
        tail = np.maximum(h, np.interp(c, grid, table, left=0.0, right=1.0))
        return np.where(c < 1.0, head, tail)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`cdf` by linear interpolation of the table."""
        u = np.asarray(u, dtype=float)
        if np.any((u < 0) | (u > 1)):
            raise ValueError("quantile levels must lie in [0, 1]")
        grid, table = self.cdf_table
        h = self.head_mass_fraction
        head = u / h if h > 0 else np.zeros_like(u)
        tail = np.interp(u, table, grid)
        return np.where(u < h, head, tail)

    def mean(self) -> float:
        h = self.head_mass_fraction
        _, _, norm_const = self._table
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            first_moment, _ = integrate.quad(
                lambda c: c ** (1.0 - self.alpha) * math.exp(-self.lam * c),
                self.head_quantile,
                self.c_max_cell,
                limit=200,
            )
        return 0.5 * h + first_moment / norm_const

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` cell counts from the mixture."""
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        h = self.head_mass_fraction
        pick_head = rng.random(n) < h
        uniform = rng.random(n)
        levels = h + (1.0 - h) * rng.random(n)
        grid, table = self.cdf_table
        tail = np.interp(levels, table, grid)
        return np.where(pick_head, uniform, tail)


def sample_prior(spec: PriorSpec, n: int, seed: int) -> EmpiricalMeasure:
    """``n`` seeded draws from the prior as an empirical measure."""
    return EmpiricalMeasure(spec.draw(n, np.random.default_rng(seed)))


@dataclass(frozen=True)
class UniformPrior:
    """Flat prior on [0, c_max_cell]."""

    c_max_cell: float

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        return rng.uniform(0.0, self.c_max_cell, n)

    def mean(self) -> float:
        return 0.5 * self.c_max_cell


@dataclass(frozen=True)
class EmpiricalPrior:
    """Resamples observed cell counts in place of a parametric law."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValueError("an empirical prior needs at least one count")
        object.__setattr__(self, "values", values)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        return rng.choice(self.values, size=n, replace=True)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class FitReport:
    family: str
    params: Dict[str, float]
    log_likelihood: float
    loglog_curve: List[Tuple[float, float]]
    n_samples: int = 0
    xmin: float = 1.0


def empirical_loglog(
    values: Sequence[float], xmin: float = 1.0, bins: int = 30
) -> List[Tuple[float, float]]:
    """Log-binned empirical density as (log10 count, log10 probability) pairs."""
    data = np.asarray(values, dtype=float)
    data = data[data >= xmin]
    if data.size == 0 or data.max() <= xmin:
        return []
    edges = np.geomspace(xmin, data.max(), bins + 1)
    counts, _ = np.histogram(data, bins=edges)
    density = counts / (data.size * np.diff(edges))
    centres = np.sqrt(edges[1:] * edges[:-1])
    keep = density > 0
    return list(zip(np.log10(centres[keep]).tolist(), np.log10(density[keep]).tolist()))


def _tpl_log_norm(alpha: float, lam: float, xmin: float) -> float:
    return math.log(_tail_integral(xmin, np.inf, alpha, lam))


def _fit_tpl(data: np.ndarray, xmin: float) -> Tuple[Dict[str, float], float]:
    n = data.size
    sum_log = float(np.log(data).sum())
    sum_x = float(data.sum())

    def nll(theta: np.ndarray) -> float:
        alpha, log_lam = float(theta[0]), float(theta[1])
        lam = math.exp(log_lam)
        try:
            log_z = _tpl_log_norm(alpha, lam, xmin)
        except (ValueError, OverflowError):
            return 1e300
        if not math.isfinite(log_z):
            return 1e300
        return n * log_z + alpha * sum_log + lam * sum_x

    seeds = [
        np.array([a, math.log(lam)])
        for a in (0.5, 1.5, 2.5, 3.5)
        for lam in (1e-3, 1e-2, 1e-1, 1.0)
    ]
    seeds.sort(key=nll)
    bounds = [(-3.0, 8.0), (math.log(1e-8), math.log(50.0))]
    best = None
    for seed in seeds[:3]:
        result = minimize(nll, seed, method="L-BFGS-B", bounds=bounds)
        if best is None or result.fun < best.fun:
            best = result
    assert best is not None
    alpha, lam = float(best.x[0]), math.exp(float(best.x[1]))
    return {"alpha": alpha, "lambda": lam}, -float(best.fun)


def _tpl_pdf(c: np.ndarray, params: Dict[str, float], xmin: float) -> np.ndarray:
    z = math.exp(_tpl_log_norm(params["alpha"], params["lambda"], xmin))
    return _tail_density(c, params["alpha"], params["lambda"]) / z


def _fit_pareto(data: np.ndarray, xmin: float) -> Tuple[Dict[str, float], float]:
    log_ratio = np.log(data / xmin)
    total = float(log_ratio.sum())
    if total <= 0:
        raise FitError("pareto fit needs samples above xmin")
    n = data.size
    alpha = 1.0 + n / total
    loglik = n * math.log((alpha - 1.0) / xmin) - alpha * total
    return {"alpha": alpha, "xmin": xmin}, loglik


def _pareto_pdf(c: np.ndarray, params: Dict[str, float], xmin: float) -> np.ndarray:
    alpha = params["alpha"]
    return (alpha - 1.0) / xmin * np.power(c / xmin, -alpha)


def _lognormal_loglik(data_log: np.ndarray, mu: float, sigma: float, xmin: float) -> float:
    z = (data_log - mu) / sigma
    body = -data_log - math.log(sigma) - 0.5 * math.log(2 * math.pi) - 0.5 * z * z
    return float(body.sum() - data_log.size * norm.logsf((math.log(xmin) - mu) / sigma))


def _fit_lognormal(data: np.ndarray, xmin: float) -> Tuple[Dict[str, float], float]:
    data_log = np.log(data)
    centre, spread = float(data_log.mean()), float(max(data_log.std(), 1e-3))

    def nll(theta: np.ndarray) -> float:
        value = -_lognormal_loglik(data_log, float(theta[0]), math.exp(float(theta[1])), xmin)
        return value if math.isfinite(value) else 1e300

    seeds = [
        np.array([centre + k * spread, math.log(spread * s)])
        for k in (-4.0, -2.0, 0.0)
        for s in (0.5, 1.0, 2.0)
    ]
    seeds.sort(key=nll)
    bounds = [(-50.0, 50.0), (math.log(1e-2), math.log(20.0))]
    best = None
    for seed in seeds[:3]:
        result = minimize(nll, seed, method="L-BFGS-B", bounds=bounds)
        if best is None or result.fun < best.fun:
            best = result
    assert best is not None
    return {"mu": float(best.x[0]), "sigma": math.exp(float(best.x[1]))}, -float(best.fun)


def _lognormal_pdf(c: np.ndarray, params: Dict[str, float], xmin: float) -> np.ndarray:
    mu, sigma = params["mu"], params["sigma"]
    base = norm.pdf((np.log(c) - mu) / sigma) / (c * sigma)
    return base / norm.sf((math.log(xmin) - mu) / sigma)


_FITTERS = {
    "truncated-power-law": (_fit_tpl, _tpl_pdf),
    "pareto": (_fit_pareto, _pareto_pdf),
    "lognormal": (_fit_lognormal, _lognormal_pdf),
}


def fit_mle(
    samples: EmpiricalMeasure | Sequence[float],
    family: str,
    xmin: float = 1.0,
    bins: int = 30,
) -> FitReport:
    """Maximum-likelihood fit of one parametric family to counts >= ``xmin``.

    Args:
        samples: Observed counts; values below ``xmin`` are discarded.
        family: One of ``truncated-power-law``, ``pareto``, ``lognormal``.
        xmin: Lower cutoff of the fitted support.
        bins: Number of logarithmic bins for the returned log-log curve.

    Returns:
        FitReport with fitted parameters, the maximized log-likelihood and the
        fitted density on the empirical log-bin centres.
    """
    if family not in _FITTERS:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    values = samples.values if isinstance(samples, EmpiricalMeasure) else samples
    data = np.asarray(values, dtype=float)
    data = data[data >= xmin]
    if data.size < MIN_FIT_SAMPLES:
        raise ValueError(
            f"need at least {MIN_FIT_SAMPLES} samples >= {xmin}, got {data.size}"
        )
    if np.ptp(data) == 0:
        raise FitError(f"all {data.size} samples equal {data[0]}; nothing to fit")

    fitter, pdf = _FITTERS[family]
    params, loglik = fitter(data, xmin)
    if not math.isfinite(loglik):
        raise FitError(f"{family} fit produced a non-finite log-likelihood")

    empirical = empirical_loglog(data, xmin=xmin, bins=bins)
    curve: List[Tuple[float, float]] = []
    if empirical:
        centres = np.power(10.0, [x for x, _ in empirical])
        model = pdf(centres, params, xmin)
        positive = model > 0
        curve = list(
            zip(np.log10(centres[positive]).tolist(), np.log10(model[positive]).tolist())
        )
    logger.info("%s fit on %d samples: %s loglik=%.3f", family, data.size, params, loglik)
    return FitReport(
        family=family,
        params=params,
        log_likelihood=loglik,
        loglog_curve=curve,
        n_samples=int(data.size),
        xmin=xmin,
    )


def fit_all(
    samples: EmpiricalMeasure | Sequence[float], xmin: float = 1.0
) -> List[FitReport]:
    """Fit every family, best log-likelihood first."""
    reports = [fit_mle(samples, family, xmin=xmin) for family in FAMILIES]
    return sorted(reports, key=lambda r: r.log_likelihood, reverse=True)


def build_prior(
    family: str,
    spec: PriorSpec,
    observed: Optional[np.ndarray] = None,
) -> CountPrior:
    """Prior used by Stage 2 for a ``prior_family`` setting."""
    if family == "truncated-power-law":
        return spec
    if family == "uniform":
        return UniformPrior(spec.c_max_cell)
    if family == "empirical":
        if observed is None:
            raise ValueError("the empirical prior needs observed cell counts")
        return EmpiricalPrior(observed)
    raise ValueError(f"unknown prior family {family!r}")
