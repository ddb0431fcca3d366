import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ddafm.numerics import fft_axis, gradcheck_fd, naive_dft

from conftest import crandn


def test_dc_impulse():
    out = fft_axis(np.ones(8), 0)
    assert out[0] == pytest.approx(np.sqrt(8), abs=1e-14)
    assert np.abs(out[1:]).max() < 1e-14


@pytest.mark.parametrize("n", [1, 2, 3, 32, 40, 64, 72, 80, 128, 97, 131, 262])
def test_round_trip_and_parseval(rng, n):
    x = crandn(rng, n)
    y = fft_axis(x, 0)
    assert np.linalg.norm(fft_axis(y, 0, "inverse") - x) <= 1e-12 * np.linalg.norm(x)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) <= 1e-12 * np.linalg.norm(x)


@pytest.mark.parametrize("n", [32, 40, 64, 72, 80, 128, 17, 61, 67, 134])
@pytest.mark.parametrize("direction", ["forward", "inverse"])
def test_matches_naive_dft(rng, n, direction):
    x = crandn(rng, n)
    ref = naive_dft(x, direction)
    assert np.abs(fft_axis(x, 0, direction) - ref).max() <= 1e-10 * np.abs(ref).max()


def test_axis_argument_and_errors(rng):
    x = crandn(rng, 4, 6, 5)
    y = fft_axis(x, 1)
    for i in range(4):
        for j in range(5):
            assert np.allclose(y[i, :, j], naive_dft(x[i, :, j]), atol=1e-12)
    assert np.allclose(fft_axis(x, -1), fft_axis(x, 2))
    with pytest.raises(IndexError):
        fft_axis(x, 3)
    with pytest.raises(ValueError):
        fft_axis(x, 0, "sideways")


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=150), st.integers(min_value=0, max_value=2 ** 31))
def test_unitarity_any_length(n, seed):
    x = crandn(np.random.default_rng(seed), n)
    y = fft_axis(x, 0)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) <= 1e-12 * max(np.linalg.norm(x), 1e-300)
    assert np.allclose(fft_axis(y, 0, "inverse"), x, atol=1e-12 * np.abs(x).max())


def test_fft_is_deterministic(rng):
    x = crandn(rng, 72)
    assert np.array_equal(fft_axis(x, 0), fft_axis(x.copy(), 0))


# reverse-mode differentiation (torch.autograd) against analytic and finite-difference oracles


def test_quadratic_gradient():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64, requires_grad=True)
    (x ** 2).sum().backward()
    assert torch.equal(x.grad, 2 * x.detach())


def test_frozen_leaf_gets_no_gradient():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, dtype=torch.float64, requires_grad=False)
    (x * w).sum().backward()
    assert w.grad is None and x.grad is not None


def test_graph_consumed_and_non_scalar():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)
    loss = (x.exp()).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()
    with pytest.raises(RuntimeError):
        (x * 2).backward()
    with pytest.raises(ValueError):
        gradcheck_fd(lambda: x * 2, [x])


def test_softmax_attention_composite_fd():
    g = torch.Generator().manual_seed(0)
    q = torch.randn(6, 4, dtype=torch.float64, generator=g, requires_grad=True)
    k = torch.randn(6, 4, dtype=torch.float64, generator=g, requires_grad=True)
    v = torch.randn(6, 4, dtype=torch.float64, generator=g, requires_grad=True)
    target = torch.randn(6, 4, dtype=torch.float64, generator=g)

    def fn():
        a = torch.softmax(q @ k.T / 2.0, dim=-1)
        return ((a @ v - target) ** 2).sum()

    assert gradcheck_fd(fn, [q, k, v], n_probes=40, step=1e-6) <= 1e-5


@pytest.mark.parametrize("op", [
    lambda x: torch.nn.functional.gelu(x),
    lambda x: torch.nn.functional.layer_norm(x, (x.shape[-1],)),
    lambda x: torch.softmax(x, -1),
    lambda x: torch.fft.ifft(torch.complex(x, x.flip(-1)), norm="ortho").abs() ** 2,
    lambda x: torch.nn.functional.conv2d(x[None, None], torch.ones(1, 1, 3, 3, dtype=x.dtype), padding=1)[0, 0],
    lambda x: torch.roll(x, (2, -1), (0, 1)) * x,
])
def test_primitives_pass_fd_check(op):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(5, 6, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(5, 6, dtype=torch.float64, generator=g)
    assert gradcheck_fd(lambda: (op(x) * w).sum(), [x], n_probes=20) <= 1e-5
