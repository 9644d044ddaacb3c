"""Coordinate and timestamp encoders used as auxiliary supervision targets.

A patch centroid given in EPSG:2154 meters goes through three steps before
it can supervise the location head: centering against a fixed origin, an
optional uniform noise injection, and a multi-frequency sinusoidal encoding.
Cyclic timestamp fields (month, hour) are mapped onto the unit circle.

All functions here are pure given their random source; callers that run in
parallel must hand each worker its own `numpy.random.Generator` split from
the run seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Centering reference for EPSG:2154 coordinates (median easting/northing of
# the covered territory); mapping these to (0, 0) keeps encodings centered.
DEFAULT_ORIGIN_LON_M = 489353.59
DEFAULT_ORIGIN_LAT_M = 6587552.20


@dataclass(frozen=True)
class RawCoordinate:
    """A projected coordinate pair in meters (EPSG:2154 easting/northing)."""

    lon_m: float
    lat_m: float

    def __post_init__(self):
        if not (math.isfinite(self.lon_m) and math.isfinite(self.lat_m)):
            raise ValueError(f"coordinate must be finite, got ({self.lon_m}, {self.lat_m})")


@dataclass(frozen=True)
class EncodingConfig:
    """Parameters of the sinusoidal location encoding.

    `dim` must be divisible by 4: each axis gets dim/4 frequencies, each
    contributing a (sin, cos) pair. `base_frequency` controls how slowly the
    frequency ladder decays; larger values emphasize coarser spatial scales.
    """

    dim: int = 256
    base_frequency: float = 20000.0
    noise_radius_m: float = 30000.0
    origin_lon_m: float = DEFAULT_ORIGIN_LON_M
    origin_lat_m: float = DEFAULT_ORIGIN_LAT_M

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 4 != 0:
            raise ValueError(f"dim must be a positive multiple of 4, got {self.dim}")
        if not self.base_frequency > 0:
            raise ValueError(f"base_frequency must be positive, got {self.base_frequency}")
        if self.noise_radius_m < 0:
            raise ValueError(f"noise_radius_m must be >= 0, got {self.noise_radius_m}")

    def frequencies(self) -> np.ndarray:
        """Angular frequencies w_i = base_frequency**(-2*i/dim), i = 1..dim/4."""
        i = np.arange(1, self.dim // 4 + 1, dtype=np.float64)
        return self.base_frequency ** (-2.0 * i / self.dim)


@dataclass(frozen=True)
class TimeStamp:
    """Acquisition month (1-12) and hour of day (0-23)."""

    month: int
    hour: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month must be in [1, 12], got {self.month}")
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour must be in [0, 23], got {self.hour}")


def center(raw: RawCoordinate, cfg: EncodingConfig) -> RawCoordinate:
    """Subtract the configured origin from a raw coordinate."""
    return RawCoordinate(raw.lon_m - cfg.origin_lon_m, raw.lat_m - cfg.origin_lat_m)


def inject_noise(
    centered: RawCoordinate, noise_radius_m: float, rng: np.random.Generator
) -> RawCoordinate:
    """Perturb each axis independently by a uniform draw in [-r, +r].

    Draw order is lon then lat, one uniform each, so a given generator state
    always yields the same perturbation.
    """
    if noise_radius_m < 0:
        raise ValueError(f"noise_radius_m must be >= 0, got {noise_radius_m}")
    if noise_radius_m == 0:
        return centered
    d_lon, d_lat = rng.uniform(-noise_radius_m, noise_radius_m, size=2)
    return RawCoordinate(centered.lon_m + d_lon, centered.lat_m + d_lat)


def positional_encode(centered: RawCoordinate, cfg: EncodingConfig) -> np.ndarray:
    """Sinusoidal encoding of a centered coordinate.

    Layout along the output vector of length `dim`: the first half covers the
    lon axis, the second half the lat axis. Within each half the dim/4
    frequencies appear in order, sin before cos:

        [sin(lon*w_1), cos(lon*w_1), ..., sin(lon*w_{dim/4}),
         cos(lon*w_{dim/4}), sin(lat*w_1), ..., cos(lat*w_{dim/4})]

    This layout is a stable file-format contract; golden vectors depend on it.
    """
    out = _encode_batch(
        np.array([[centered.lon_m, centered.lat_m]], dtype=np.float64), cfg
    )
    return out[0]


def _encode_batch(coords: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Vectorized positional encoding of an (n, 2) array of centered coords."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"expected coords of shape (n, 2), got {coords.shape}")
    omega = cfg.frequencies()  # (dim/4,)
    out = np.empty((coords.shape[0], cfg.dim), dtype=np.float64)
    half = cfg.dim // 2
    for axis, block in ((0, out[:, :half]), (1, out[:, half:])):
        phase = coords[:, axis : axis + 1] * omega[None, :]  # (n, dim/4)
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
    return out


def encode_supervision(
    raw: RawCoordinate, cfg: EncodingConfig, rng: np.random.Generator
) -> np.ndarray:
    """Full supervision pipeline: center, inject noise, positionally encode."""
    return positional_encode(inject_noise(center(raw, cfg), cfg.noise_radius_m, rng), cfg)


def encode_supervision_batch(
    raw_coords: np.ndarray, cfg: EncodingConfig, rng: np.random.Generator
) -> np.ndarray:
    """Batched `encode_supervision` over an (n, 2) array of raw (lon, lat).

    Noise is drawn row by row in the same lon-then-lat order as the scalar
    path, so scalar and batched encodings agree for the same generator state.
    """
    raw_coords = np.asarray(raw_coords, dtype=np.float64)
    if raw_coords.ndim != 2 or raw_coords.shape[1] != 2:
        raise ValueError(f"expected raw_coords of shape (n, 2), got {raw_coords.shape}")
    centered = raw_coords - np.array([cfg.origin_lon_m, cfg.origin_lat_m])
    if cfg.noise_radius_m > 0:
        centered = centered + rng.uniform(
            -cfg.noise_radius_m, cfg.noise_radius_m, size=centered.shape
        )
    return _encode_batch(centered, cfg)


def circle_encode_time(
    ts: TimeStamp,
    use_month: bool = True,
    use_hour: bool = True,
    noise: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Encode cyclic time fields as (sin, cos) points on the unit circle.

    Month m maps to angle 2*pi*(m-1)/12 (January at the phase origin), hour h
    to 2*pi*h/24. With `noise` set, an integer offset drawn uniformly from
    {-1, 0, +1} is added to each used field before encoding, wrapping
    cyclically. Output concatenates the (sin, cos) pairs of the used fields,
    month first.
    """
    if not (use_month or use_hour):
        raise ValueError("at least one of use_month/use_hour must be enabled")
    if noise and rng is None:
        raise ValueError("noise=True requires a random generator")

    parts = []
    if use_month:
        m = ts.month
        if noise:
            m = (m - 1 + int(rng.integers(-1, 2))) % 12 + 1
        theta = 2.0 * math.pi * (m - 1) / 12.0
        parts.extend((math.sin(theta), math.cos(theta)))
    if use_hour:
        h = ts.hour
        if noise:
            h = (h + int(rng.integers(-1, 2))) % 24
        theta = 2.0 * math.pi * h / 24.0
        parts.extend((math.sin(theta), math.cos(theta)))
    return np.array(parts, dtype=np.float64)


def time_encoding_dim(use_month: bool, use_hour: bool) -> int:
    """Length of the circle-encoded time vector for the enabled fields."""
    if not (use_month or use_hour):
        raise ValueError("at least one of use_month/use_hour must be enabled")
    return 2 * (int(use_month) + int(use_hour))
