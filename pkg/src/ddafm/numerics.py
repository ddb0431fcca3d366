"""Numerical primitives: a unitary mixed-radix FFT and finite-difference gradient checks.

Reverse-mode differentiation is delegated to ``torch.autograd`` (float64);
``gradcheck_fd`` is the independent central-difference oracle used against it.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import torch

FORWARD = "forward"
INVERSE = "inverse"


def _smallest_factor(n: int) -> int:
    for p in (2, 3, 5, 7):
        if n % p == 0:
            return p
    f = 11
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


@lru_cache(maxsize=None)
def _twiddles(n: int, p: int, sign: int) -> np.ndarray:
    m = n // p
    return np.exp(sign * 2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)


_DIRECT_MAX = 16      # lengths at or below this use one dense matrix product
_PRIME_DIRECT_MAX = 64  # longer primes go through Bluestein's chirp-z convolution


@lru_cache(maxsize=None)
def _bluestein_plan(n: int, sign: int):
    m = 1 << (2 * n - 2).bit_length()
    chirp = np.exp(sign * 1j * np.pi * (np.arange(n) ** 2 % (2 * n)) / n)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = chirp.conj()
    b[m - n + 1:] = chirp.conj()[1:][::-1]
    return m, chirp, _fft_last(b, -1)


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    # kn = (k^2 + n^2 - (k-n)^2) / 2 turns the DFT into a circular convolution of length m >= 2n-1
    n = x.shape[-1]
    m, chirp, b_hat = _bluestein_plan(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _fft_last(_fft_last(a, -1) * b_hat, 1) / m
    return conv[..., :n] * chirp


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized DFT along the last axis, decimation in time."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    if n <= _DIRECT_MAX:
        return x @ _dft_matrix(n, sign).T
    p = _smallest_factor(n)
    if p == n:
        if n <= _PRIME_DIRECT_MAX:
            return x @ _dft_matrix(n, sign).T
        return _bluestein(x, sign)
    m = n // p
    # x[p*j + r] -> sub[..., r, j]
    sub = np.swapaxes(x.reshape(x.shape[:-1] + (m, p)), -1, -2)
    y = _fft_last(sub, sign) * _twiddles(n, p, sign)
    # X[k' + m*q] = sum_r W_p^{rq} y[r, k']
    return np.matmul(_dft_matrix(p, sign), y).reshape(x.shape[:-1] + (n,))


def fft_axis(x: np.ndarray, axis: int, direction: str = FORWARD) -> np.ndarray:
    """Unitary DFT of ``x`` along ``axis``.

    ``forward`` uses exp(-2j*pi*k*n/N), ``inverse`` exp(+2j*pi*k*n/N); both
    scale by 1/sqrt(N), so the pair is exactly inverse and norm preserving.
    Any extent is accepted: composite lengths are split by their smallest
    prime factor; short primes use the direct sum and long ones Bluestein's
    algorithm.
    """
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for {x.ndim}-d input")
    if direction not in (FORWARD, INVERSE):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    sign = -1 if direction == FORWARD else 1
    moved = np.moveaxis(x.astype(np.complex128, copy=False), axis, -1)
    n = moved.shape[-1]
    out = _fft_last(moved, sign) / np.sqrt(n)
    return np.moveaxis(out, -1, axis)


def naive_dft(x: np.ndarray, direction: str = FORWARD) -> np.ndarray:
    """Reference O(N^2) unitary DFT of a 1-D sequence, written as an explicit double loop."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    sign = -1.0 if direction == FORWARD else 1.0
    out = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        acc = 0j
        for t in range(n):
            acc += x[t] * np.exp(sign * 2j * np.pi * k * t / n)
        out[k] = acc
    return out / np.sqrt(n)


def gradcheck_fd(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_probes: int = 20,
    step: float = 1e-4,
    seed: int = 0,
    floor_rel: float = 1e-4,
) -> float:
    """Compare autograd gradients of the scalar ``fn()`` with central differences.

    ``n_probes`` scalar entries are drawn uniformly over all ``params``. Returns
    the maximum relative error ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``
    where ``floor = floor_rel * max|grad|`` of the probed tensor. Entries far
    below their tensor's gradient scale are thereby compared on an absolute
    footing, since their central difference is dominated by roundoff.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    floors = [floor_rel * max(float(g.abs().max()), 1e-300) for g in grads]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_probes):
            which = int(rng.choice(len(params), p=sizes / sizes.sum()))
            idx = int(rng.integers(sizes[which]))
            flat = params[which].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = fn().item()
            flat[idx] = orig - step
            down = fn().item()
            flat[idx] = orig
            g_fd = (up - down) / (2 * step)
            g_ad = grads[which].reshape(-1)[idx].item()
            denom = max(abs(g_ad), abs(g_fd), floors[which])
            worst = max(worst, abs(g_ad - g_fd) / denom)
    return worst
