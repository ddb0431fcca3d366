"""Space-time-frequency <-> delay-Doppler-angle reparameterization and real packing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .channel import FrameStructure
from .numerics import FORWARD, INVERSE, fft_axis

STF = "STF"
DDA = "DDA"

# Per-axis direction realizing exp(-j2pi(nu s/Nt - tau k/Nf + q1 n1/N1 + q2 n2/N2)).
_AXIS_DIRECTIONS = (FORWARD, INVERSE, FORWARD, FORWARD)


@dataclass
class CsiTensor:
    domain: str
    data: np.ndarray
    frame: FrameStructure

    def __post_init__(self):
        if self.domain not in (STF, DDA):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.data.shape != self.frame.shape:
            raise ValueError(f"data shape {self.data.shape} does not match frame {self.frame.shape}")


def _flip(direction: str) -> str:
    return INVERSE if direction == FORWARD else FORWARD


def stf_to_dda_array(h: np.ndarray) -> np.ndarray:
    out = np.asarray(h, dtype=np.complex128)
    for axis, direction in enumerate(_AXIS_DIRECTIONS):
        out = fft_axis(out, axis, direction)
    return out


def dda_to_stf_array(h: np.ndarray) -> np.ndarray:
    out = np.asarray(h, dtype=np.complex128)
    for axis, direction in enumerate(_AXIS_DIRECTIONS):
        out = fft_axis(out, axis, _flip(direction))
    return out


def stf_to_dda(h: CsiTensor) -> CsiTensor:
    if h.domain != STF:
        raise ValueError(f"stf_to_dda expects an STF tensor, got {h.domain}")
    return CsiTensor(DDA, stf_to_dda_array(h.data), h.frame)


def dda_to_stf(h: CsiTensor) -> CsiTensor:
    if h.domain != DDA:
        raise ValueError(f"dda_to_stf expects a DDA tensor, got {h.domain}")
    return CsiTensor(STF, dda_to_stf_array(h.data), h.frame)


def naive_stf_to_dda(h: np.ndarray) -> np.ndarray:
    """Direct quadruple sum, one output bin at a time. Oracle for small shapes only."""
    nt, nf, n1, n2 = h.shape
    s, k, a, b = np.meshgrid(*(np.arange(n) for n in h.shape), indexing="ij")
    out = np.zeros(h.shape, dtype=np.complex128)
    for nu, tau, q1, q2 in np.ndindex(*h.shape):
        expo = nu * s / nt - tau * k / nf + q1 * a / n1 + q2 * b / n2
        out[nu, tau, q1, q2] = np.sum(h * np.exp(-2j * np.pi * expo))
    return out / np.sqrt(h.size)


def dda_to_stf_torch(h: torch.Tensor) -> torch.Tensor:
    """Differentiable inverse transform over the last four axes (..., nu, tau, q1, q2)."""
    dims = (-4, -1, -2)
    out = torch.fft.ifftn(h, dim=dims, norm="ortho")
    return torch.fft.fft(out, dim=-3, norm="ortho")


def realify(h: CsiTensor) -> np.ndarray:
    """(N_nu, N_tau, n1, n2) complex -> (N_nu, N_tau, 2*N_rx) real; angle axes flattened n1-major."""
    if h.domain != DDA:
        raise ValueError("realify expects a DDA tensor")
    return realify_array(h.data)


def realify_array(data: np.ndarray) -> np.ndarray:
    flat = data.reshape(data.shape[:2] + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def complexify(x: np.ndarray, frame: FrameStructure) -> CsiTensor:
    return CsiTensor(DDA, complexify_array(x, frame.n_rx1, frame.n_rx2), frame)


def complexify_array(x: np.ndarray, n_rx1: int, n_rx2: int) -> np.ndarray:
    c = x.shape[-1]
    if c % 2:
        raise ValueError(f"channel extent must be even, got {c}")
    half = c // 2
    if half != n_rx1 * n_rx2:
        raise ValueError(f"{c} channels do not match a {n_rx1}x{n_rx2} array")
    z = x[..., :half] + 1j * x[..., half:]
    return z.reshape(x.shape[:-1] + (n_rx1, n_rx2))


def complexify_torch(x: torch.Tensor, n_rx1: int, n_rx2: int) -> torch.Tensor:
    half = x.shape[-1] // 2
    z = torch.complex(x[..., :half], x[..., half:])
    return z.reshape(x.shape[:-1] + (n_rx1, n_rx2))
