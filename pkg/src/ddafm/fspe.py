"""Frame-structure-aware positional encoding on the Doppler-delay patch grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import FrameStructure

REF_RES_TAU = 1.36e-9
REF_RES_NU = 3.15


@dataclass(frozen=True)
class FsPeConfig:
    embed_dim: int
    patch_size: int = 1
    ref_res_tau: float = REF_RES_TAU
    ref_res_nu: float = REF_RES_NU
    sigma: float = 10000.0

    def __post_init__(self):
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4")
        if self.sigma <= 1:
            raise ValueError("sigma must exceed 1")


def resolutions(fs: FrameStructure) -> tuple[float, float]:
    """(delay resolution in s, Doppler resolution in Hz)."""
    return 1.0 / (fs.n_f * fs.df), 1.0 / (fs.n_t * fs.dt)


def unambiguous_region(fs: FrameStructure) -> tuple[float, float]:
    return 1.0 / fs.df, 1.0 / fs.dt


def _axis_encoding(coords: np.ndarray, n_pairs: int, sigma: float) -> np.ndarray:
    omega = sigma ** (-np.arange(n_pairs) / n_pairs)
    ang = coords[:, None] * omega[None, :]
    out = np.empty((coords.size, 2 * n_pairs))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def fs_pe(fs: FrameStructure, cfg: FsPeConfig) -> np.ndarray:
    """Encoding of shape (N_nu/P, N_tau/P, C): Doppler half first, each half interleaved (sin, cos)."""
    p = cfg.patch_size
    if fs.n_t % p or fs.n_f % p:
        raise ValueError(f"grid {fs.n_t}x{fs.n_f} not divisible by patch size {p}")
    r_tau, r_nu = resolutions(fs)
    s_tau = r_tau / cfg.ref_res_tau
    s_nu = r_nu / cfg.ref_res_nu
    u = np.arange(fs.n_t // p) * p * s_nu
    v = np.arange(fs.n_f // p) * p * s_tau
    n_pairs = cfg.embed_dim // 4
    psi_nu = _axis_encoding(u, n_pairs, cfg.sigma)
    psi_tau = _axis_encoding(v, n_pairs, cfg.sigma)
    out = np.empty((u.size, v.size, cfg.embed_dim))
    half = cfg.embed_dim // 2
    out[..., :half] = psi_nu[:, None, :]
    out[..., half:] = psi_tau[None, :, :]
    return out
