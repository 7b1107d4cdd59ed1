"""Urban-canyon wind field and the online disturbance estimator.

The wind magnitude grows exponentially with penetration depth below the
top of the wind band and is windowed horizontally to the canyon gaps, so the
flyover corridor above the buildings stays calm. The vector disturbance is
a fixed sign pattern times that scalar magnitude.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DIRECTION = (1.0, -1.0, 1.0, -1.0)


@dataclass(frozen=True)
class WindField:
    """Deterministic spatial disturbance ``w(x) = direction * m(p_x, p_z)``.

    Attributes:
        D: disturbance factor.
        W: maximum wind value; the magnitude never exceeds ``D * W``.
        r: exponential ramp rate.
        band_bottom: lowest altitude of the wind band (m).
        band_top: highest altitude of the band (the canyon rim); penetration depth is measured from here.
        max_wind_altitude: altitude at which the ramp reaches ``D*W*(1 - exp(-r))``.
        canyon_x_ranges: horizontal intervals where wind is active.
        taper: width (m) of the cosine ramp at each canyon edge.
    """

    D: float = 1.0
    W: float = 0.75
    r: float = 5.0
    band_bottom: float = 0.0
    band_top: float = 1.0
    max_wind_altitude: float = 0.3
    canyon_x_ranges: tuple = ((-1.3, 0.0), (1.2, 2.0))
    taper: float = 0.2
    direction: tuple = DEFAULT_DIRECTION

    def __post_init__(self):
        if not self.band_bottom <= self.max_wind_altitude < self.band_top:
            raise ValueError("max_wind_altitude must lie inside [band_bottom, band_top)")
        if self.D * self.W < 0 or self.r <= 0 or self.taper <= 0:
            raise ValueError("wind parameters must be positive")
        for a, b in self.canyon_x_ranges:
            if b - a < 2 * self.taper:
                raise ValueError(f"canyon [{a}, {b}] narrower than twice the taper")
        object.__setattr__(self, "canyon_x_ranges", tuple(tuple(map(float, c)) for c in self.canyon_x_ranges))
        object.__setattr__(self, "direction", tuple(map(float, self.direction)))

    @property
    def peak(self) -> float:
        return self.D * self.W

    @property
    def ramp_depth(self) -> float:
        """Penetration depth (below ``band_top``) of the maximum-wind altitude."""
        return self.band_top - self.max_wind_altitude

    def vertical_profile(self, pz) -> np.ndarray:
        pz = np.asarray(pz, dtype=float)
        depth = self.band_top - pz
        ramp = self.peak * (1.0 - np.exp(-self.r * depth / self.ramp_depth))
        inside = (pz >= self.band_bottom) & (pz <= self.band_top)
        return np.where(inside, ramp, 0.0)

    def horizontal_window(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        out = np.zeros_like(px)
        for a, b in self.canyon_x_ranges:
            rise = np.clip((px - a) / self.taper, 0.0, 1.0)
            fall = np.clip((b - px) / self.taper, 0.0, 1.0)
            edge = np.minimum(rise, fall)
            w = 0.5 * (1.0 - np.cos(np.pi * edge))
            out = np.where((px >= a) & (px <= b), w, out)
        return out

    def magnitude(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.horizontal_window(x[..., 0]) * self.vertical_profile(x[..., 1])

    def lipschitz_constant(self) -> float:
        """Bound on ``||grad m||_2`` inside the band."""
        vertical = self.peak * self.r / self.ramp_depth
        horizontal = self.peak * np.pi / (2.0 * self.taper)
        return float(np.hypot(vertical, horizontal))

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "W": self.W,
            "r": self.r,
            "band_bottom": self.band_bottom,
            "band_top": self.band_top,
            "max_wind_altitude": self.max_wind_altitude,
            "canyon_x_ranges": [list(c) for c in self.canyon_x_ranges],
            "taper": self.taper,
            "direction": list(self.direction),
        }


def wind_at(field: WindField, x) -> np.ndarray:
    """Disturbance vector at state(s) ``x``; broadcasts over leading axes."""
    m = field.magnitude(x)
    return np.multiply.outer(m, np.asarray(field.direction))


def sample_field_params(rng: np.random.Generator, base: WindField, r_range=(3.0, 7.0), max_alt_lo=0.1) -> WindField:
    """Randomise the ramp rate and the maximum-wind altitude of ``base``.

    ``r ~ U[r_range]`` and the max-wind altitude is drawn uniformly between
    ``max_alt_lo`` and one third of the band height above its bottom.
    """
    r = rng.uniform(*r_range)
    height = base.band_top - base.band_bottom
    alt = base.band_bottom + rng.uniform(max_alt_lo, height / 3.0)
    return WindField(
        D=base.D,
        W=base.W,
        r=float(r),
        band_bottom=base.band_bottom,
        band_top=base.band_top,
        max_wind_altitude=float(alt),
        canyon_x_ranges=base.canyon_x_ranges,
        taper=base.taper,
        direction=base.direction,
    )


class EstimatorNotPrimed(RuntimeError):
    pass


@dataclass
class DisturbanceEstimator:
    """Finite-difference disturbance-rate estimator sampled every ``sample_period``.

    Each measurement yields ``max(0, (|d| - |d_prev|) / sample_period)``, floored
    at ``d_max / t_max`` so that a non-increasing disturbance maps to the
    rate-free member of the tube family. The last ``horizon`` rates (and
    magnitudes) are kept; outputs are clipped to the admissible boxes.
    """

    d_max: np.ndarray
    ddot_max: np.ndarray
    t_max: float
    sample_period: float = 0.25
    horizon: int = 1
    last_d: np.ndarray = field(init=False)
    last_time: float | None = field(init=False, default=None)

    def __post_init__(self):
        self.d_max = np.asarray(self.d_max, dtype=float)
        self.ddot_max = np.asarray(self.ddot_max, dtype=float)
        if self.horizon < 1:
            raise ValueError("estimator horizon must be at least 1")
        if self.sample_period <= 0 or self.t_max <= 0:
            raise ValueError("sample_period and t_max must be positive")
        self.last_d = np.zeros_like(self.d_max)
        self.rates: deque = deque(maxlen=self.horizon)
        self.magnitudes: deque = deque(maxlen=self.horizon)

    @property
    def floor_rate(self) -> np.ndarray:
        return self.d_max / self.t_max

    @property
    def primed(self) -> bool:
        return len(self.rates) > 0

    def prime(self) -> None:
        """Start from zero disturbance and the floor rate."""
        self.rates.append(self.floor_rate.copy())
        self.magnitudes.append(np.zeros_like(self.d_max))

    def measure(self, true_d, now: float) -> None:
        if self.last_time is not None and now <= self.last_time:
            raise ValueError(f"measurement time {now} not after previous {self.last_time}")
        mag = np.abs(np.asarray(true_d, dtype=float))
        raw = np.maximum(0.0, (mag - self.last_d) / self.sample_period)
        self.rates.append(np.maximum(raw, self.floor_rate))
        self.magnitudes.append(mag)
        self.last_d = mag
        self.last_time = float(now)

    def current_estimate(self) -> tuple[np.ndarray, np.ndarray]:
        """``(d_bar, rate_bar)``: latest magnitude and the max rate over the history."""
        if not self.primed:
            raise EstimatorNotPrimed("estimator not primed")
        d_bar = np.clip(self.magnitudes[-1], 0.0, self.d_max)
        rate_bar = np.clip(np.max(np.stack(self.rates), axis=0), 0.0, self.ddot_max)
        return d_bar, rate_bar

    def peak_magnitude(self) -> np.ndarray:
        """Largest magnitude over the history, the magnitude estimate used by fixed-bound ensembles."""
        if not self.primed:
            raise EstimatorNotPrimed("estimator not primed")
        return np.clip(np.max(np.stack(self.magnitudes), axis=0), 0.0, self.d_max)
