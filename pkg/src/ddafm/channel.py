"""Synthetic multipath OFDM channels on a uniform planar array."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
KMH = 1.0 / 3.6


@dataclass(frozen=True)
class FrameStructure:
    n_t: int
    dt: float
    n_f: int
    df: float
    n_rx1: int = 8
    n_rx2: int = 4

    def __post_init__(self):
        for name in ("n_t", "n_f", "n_rx1", "n_rx2"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.dt > 0 and self.df > 0):
            raise ValueError("dt and df must be positive")

    @property
    def n_rx(self) -> int:
        return self.n_rx1 * self.n_rx2

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_t, self.n_f, self.n_rx1, self.n_rx2)

    def to_dict(self) -> dict:
        return asdict(self)


# Test-set frame structures (30 kHz SCS numerology, 8x4 UPA).
FRAMES: dict[str, FrameStructure] = {
    "fs-a-denver": FrameStructure(80, 0.5e-3, 32, 1.44e6),
    "fs-b-denver": FrameStructure(80, 0.5e-3, 64, 0.36e6),
    "fs-a-oklahoma": FrameStructure(80, 0.5e-3, 32, 1.44e6),
    "fs-b-oklahoma": FrameStructure(80, 0.5e-3, 72, 0.36e6),
    "fs-a-beijing": FrameStructure(40, 0.5e-3, 32, 1.44e6),
    "fs-b-beijing": FrameStructure(40, 0.5e-3, 32, 0.36e6),
    "fs-a-rio": FrameStructure(80, 0.5e-3, 64, 1.44e6),
    "fs-b-rio": FrameStructure(80, 0.5e-3, 128, 0.36e6),
}


def get_frame(name: str) -> FrameStructure:
    try:
        return FRAMES[name.lower()]
    except KeyError:
        raise KeyError(f"unknown frame {name!r}; choose from {sorted(FRAMES)}") from None


@dataclass
class PathSet:
    """Per-path parameters; arrays of equal length ``n_paths``."""

    beta: np.ndarray
    nu: np.ndarray
    tau: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.complex128))
        for name in ("nu", "tau", "theta", "phi"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        n = self.beta.size
        if n == 0:
            raise ValueError("a PathSet needs at least one path")
        if any(getattr(self, k).size != n for k in ("nu", "tau", "theta", "phi")):
            raise ValueError("path parameter arrays differ in length")
        if np.any(self.tau < 0):
            raise ValueError("delays must be non-negative")
        if np.any(np.abs(self.theta) > np.pi + 1e-12) or np.any(np.abs(self.phi) > np.pi / 2 + 1e-12):
            raise ValueError("angles out of range")

    def __len__(self) -> int:
        return self.beta.size

    def __add__(self, other: "PathSet") -> "PathSet":
        return PathSet(*(np.concatenate([getattr(self, k), getattr(other, k)])
                         for k in ("beta", "nu", "tau", "theta", "phi")))

    def to_rows(self) -> list[list[float]]:
        return [[b.real, b.imag, v, t, th, ph] for b, v, t, th, ph in
                zip(self.beta, self.nu, self.tau, self.theta, self.phi)]

    @classmethod
    def from_rows(cls, rows) -> "PathSet":
        a = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
        return cls(a[:, 0] + 1j * a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5])


@dataclass(frozen=True)
class ScenarioConfig:
    carrier_hz: float = 3.5e9
    speed_range: tuple[float, float] = (0.0, 120.0 * KMH)
    path_count_range: tuple[int, int] = (1, 12)
    delay_scale: float = 60e-9
    azimuth_range: tuple[float, float] = (-math.pi, math.pi)
    elevation_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    seed: int = 0
    # test-only: pin every path to this (beta, nu, tau, theta, phi) row list
    fixed_paths: tuple = field(default=())

    def __post_init__(self):
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ValueError("speed range must satisfy 0 <= v_min <= v_max")
        if self.delay_scale <= 0:
            raise ValueError("delay_scale must be positive")
        lo, hi = self.path_count_range
        if lo < 1 or hi < lo:
            raise ValueError("empty path-count range")

    @property
    def max_doppler(self) -> float:
        return self.carrier_hz * self.speed_range[1] / SPEED_OF_LIGHT

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_range"] = list(self.speed_range)
        d["path_count_range"] = list(self.path_count_range)
        d["azimuth_range"] = list(self.azimuth_range)
        d["elevation_range"] = list(self.elevation_range)
        d["fixed_paths"] = [list(r) for r in self.fixed_paths]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k in ("speed_range", "path_count_range", "azimuth_range", "elevation_range"):
            if k in d:
                d[k] = tuple(d[k])
        if "fixed_paths" in d:
            d["fixed_paths"] = tuple(tuple(r) for r in d["fixed_paths"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Velocity:
    speed: float
    heading: float


def sample_paths(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[PathSet, Velocity]:
    """Draw one multipath realization and the UE velocity that produced its Dopplers.

    Delays are i.i.d. exponential with mean ``cfg.delay_scale``; path powers
    follow exp(-tau/delay_scale) and are normalized to unit total power. Each
    path sees the shared speed through its own path-velocity angle psi_p.
    """
    if cfg.fixed_paths:
        return PathSet.from_rows([[complex(r[0]).real, complex(r[0]).imag, *r[1:]]
                                  for r in cfg.fixed_paths]), Velocity(0.0, 0.0)
    lo, hi = cfg.path_count_range
    n = int(rng.integers(lo, hi + 1))
    speed = float(rng.uniform(*cfg.speed_range))
    heading = float(rng.uniform(-math.pi, math.pi))
    tau = rng.exponential(cfg.delay_scale, n)
    power = np.exp(-tau / cfg.delay_scale)
    power /= power.sum()
    beta = np.sqrt(power) * np.exp(2j * np.pi * rng.random(n))
    psi = rng.uniform(-math.pi, math.pi, n)
    nu = cfg.carrier_hz * speed * np.cos(psi) / SPEED_OF_LIGHT
    theta = rng.uniform(*cfg.azimuth_range, n)
    phi = rng.uniform(*cfg.elevation_range, n)
    return PathSet(beta, nu, tau, theta, phi), Velocity(speed, heading)


def array_response(theta: float, phi: float, n_rx1: int, n_rx2: int) -> np.ndarray:
    """Half-wavelength UPA steering matrix, entry (n1, n2) = exp(j*pi*(n1 sin(theta) cos(phi) + n2 sin(phi)))."""
    n1 = np.arange(n_rx1)[:, None]
    n2 = np.arange(n_rx2)[None, :]
    return np.exp(1j * np.pi * (n1 * np.sin(theta) * np.cos(phi) + n2 * np.sin(phi)))


def synth_stf(paths: PathSet, fs: FrameStructure) -> np.ndarray:
    """Space-time-frequency CSI, shape (n_t, n_f, n_rx1, n_rx2)."""
    s = np.arange(fs.n_t)
    k = np.arange(fs.n_f)
    t_phase = np.exp(2j * np.pi * np.outer(s * fs.dt, paths.nu))            # (n_t, P)
    f_phase = np.exp(-2j * np.pi * np.outer(k * fs.df, paths.tau))          # (n_f, P)
    n1 = np.arange(fs.n_rx1)
    n2 = np.arange(fs.n_rx2)
    a1 = np.exp(1j * np.pi * np.outer(n1, np.sin(paths.theta) * np.cos(paths.phi)))  # (n_rx1, P)
    a2 = np.exp(1j * np.pi * np.outer(n2, np.sin(paths.phi)))                         # (n_rx2, P)
    return np.einsum("p,sp,kp,ap,bp->skab", paths.beta, t_phase, f_phase, a1, a2, optimize=True)


def normalize_energy(h: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(h)
    if norm == 0:
        raise ValueError("cannot normalize an all-zero tensor")
    return h / norm


def add_noise(h: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise of total expected power ||h||^2 * 10^(-snr/10).

    ``snr_db = inf`` returns a copy of ``h`` without consuming random numbers.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return h.copy()
    noise_power = np.sum(np.abs(h) ** 2) * 10.0 ** (-snr_db / 10.0)
    sigma = np.sqrt(noise_power / h.size / 2.0)
    noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    return h + sigma * noise
