"""Task masks (time prediction, frequency prediction, comb-pilot estimation),
their delay/Doppler-domain duals, and validity-mask padding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import FrameStructure
from .numerics import FORWARD, INVERSE, fft_axis
from .transform import CsiTensor

TP, FP, CE = "TP", "FP", "CE"
TASKS = (TP, FP, CE)
TIME, FREQ = "time", "frequency"
_AXIS_INDEX = {TIME: 0, FREQ: 1}
# Direction of the transform along each masked axis (time: forward, frequency: inverse).
_AXIS_DIRECTION = {TIME: FORWARD, FREQ: INVERSE}


@dataclass(frozen=True)
class MaskSpec:
    task: str
    obs_ratio: float = 1.0
    pilot_spacing: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task in (TP, FP) and not 0 < self.obs_ratio <= 1:
            raise ValueError("observation ratio must lie in (0, 1]")
        if self.task == CE and self.pilot_spacing < 1:
            raise ValueError("pilot spacing must be >= 1")

    @property
    def axis(self) -> str:
        return TIME if self.task == TP else FREQ

    def label(self) -> str:
        if self.task == CE:
            return f"CE(D={self.pilot_spacing})"
        return f"{self.task}(x={self.obs_ratio:g})"


@dataclass
class DualKernel:
    axis: str
    kernel: np.ndarray


@dataclass
class PaddedSample:
    data: np.ndarray
    validity: np.ndarray
    frame: FrameStructure
    domain: str


def build_mask(spec: MaskSpec, fs: FrameStructure) -> np.ndarray:
    """Binary sampling pattern along the task's axis."""
    if spec.task == TP:
        m = np.zeros(fs.n_t)
        m[: math.floor(spec.obs_ratio * fs.n_t)] = 1.0
    elif spec.task == FP:
        m = np.zeros(fs.n_f)
        m[: math.floor(spec.obs_ratio * fs.n_f)] = 1.0
    else:
        d = spec.pilot_spacing
        if fs.n_f % d:
            raise ValueError(f"pilot spacing {d} does not divide N_f={fs.n_f}")
        m = np.zeros(fs.n_f)
        m[::d] = 1.0
    return m


def _broadcast(m: np.ndarray, axis: str, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[_AXIS_INDEX[axis]] = m.size
    return m.reshape(shape)


def apply_mask(h: np.ndarray, m: np.ndarray, axis: str) -> np.ndarray:
    """Zero the unobserved slices of an STF array along ``axis``."""
    idx = _AXIS_INDEX[axis]
    if h.shape[idx] != m.size:
        raise ValueError(f"mask length {m.size} does not match axis extent {h.shape[idx]}")
    return h * _broadcast(m, axis, h.ndim)


def dual_kernel(m: np.ndarray, axis: str) -> DualKernel:
    """Kernel w with T(m * H) = T(H) circularly convolved with w along the dual axis.

    With unitary per-axis transforms, the transform of a product is
    1/sqrt(N) times the circular convolution of the transforms, so w is the
    unitary transform of ``m`` (same direction as the axis uses) over sqrt(N).
    """
    m = np.asarray(m, dtype=np.float64)
    w = fft_axis(m, 0, _AXIS_DIRECTION[axis]) / np.sqrt(m.size)
    return DualKernel(axis, w)


def circular_convolve(h: np.ndarray, kernel: np.ndarray, axis: str) -> np.ndarray:
    """Direct (non-FFT) circular convolution of ``h`` with ``kernel`` along the dual axis."""
    idx = _AXIS_INDEX[axis]
    n = h.shape[idx]
    if kernel.size != n:
        raise ValueError("kernel length must equal the axis extent")
    out = np.zeros(h.shape, dtype=np.complex128)
    for u in range(n):
        if kernel[u] != 0:
            out += kernel[u] * np.roll(h, u, axis=idx)
    return out


def alias_superpose(h: np.ndarray, d: int) -> np.ndarray:
    """Comb-pilot folding in delay: mean of the D copies shifted by multiples of N_tau/D."""
    n_tau = h.shape[1]
    if n_tau % d:
        raise ValueError(f"D={d} does not divide N_tau={n_tau}")
    step = n_tau // d
    return sum(np.roll(h, s * step, axis=1) for s in range(d)) / d


def validity_mask(fs: FrameStructure, n_t_max: int, n_f_max: int) -> np.ndarray:
    v = np.zeros((n_t_max, n_f_max))
    v[: fs.n_t, : fs.n_f] = 1.0
    return v


def pad_and_mark(h: CsiTensor, n_t_max: int, n_f_max: int) -> PaddedSample:
    fs = h.frame
    if fs.n_t > n_t_max or fs.n_f > n_f_max:
        raise ValueError(f"frame {fs.n_t}x{fs.n_f} exceeds the {n_t_max}x{n_f_max} grid")
    out = np.zeros((n_t_max, n_f_max) + h.data.shape[2:], dtype=h.data.dtype)
    out[: fs.n_t, : fs.n_f] = h.data
    return PaddedSample(out, validity_mask(fs, n_t_max, n_f_max), fs, h.domain)


def mask_spec_for(task: str, obs_ratio: float = 0.5, pilot_spacing: int = 4) -> MaskSpec:
    if task == CE:
        return MaskSpec(CE, pilot_spacing=pilot_spacing)
    return MaskSpec(task, obs_ratio=obs_ratio)
