import numpy as np
import pytest

from ddafm.channel import FrameStructure, get_frame
from ddafm.fspe import REF_RES_NU, REF_RES_TAU, FsPeConfig, fs_pe, resolutions


def test_resolutions():
    r_tau, _ = resolutions(get_frame("fs-a-denver"))
    assert r_tau == pytest.approx(1 / (32 * 1.44e6), rel=1e-15)
    assert r_tau * 1e9 == pytest.approx(21.70, abs=0.005)
    _, r_nu = resolutions(FrameStructure(80, 5e-4, 32, 1.44e6))
    assert r_nu == pytest.approx(25.0, rel=1e-15)
    a = resolutions(FrameStructure(10, 1e-3, 16, 1e5))[0]
    b = resolutions(FrameStructure(10, 1e-3, 32, 1e5))[0]
    assert b == a / 2


def test_origin_and_range():
    pe = fs_pe(get_frame("fs-a-beijing"), FsPeConfig(64))
    assert pe.shape == (40, 32, 64)
    assert np.array_equal(pe[0, 0, 0::2], np.zeros(32)) and np.array_equal(pe[0, 0, 1::2], np.ones(32))
    assert pe.min() >= -1 and pe.max() <= 1


def classical(n_positions, n_pairs, base=10000.0):
    out = np.zeros((n_positions, 2 * n_pairs))
    for pos in range(n_positions):
        for i in range(n_pairs):
            out[pos, 2 * i] = np.sin(pos / base ** (i / n_pairs))
            out[pos, 2 * i + 1] = np.cos(pos / base ** (i / n_pairs))
    return out


def test_reference_frame_is_classical_encoding():
    # a frame whose resolutions equal the reference resolutions exactly
    fs = FrameStructure(8, 1 / (8 * REF_RES_NU), 16, 1 / (16 * REF_RES_TAU))
    pe = fs_pe(fs, FsPeConfig(32))
    assert np.abs(pe[:, 0, :16] - classical(8, 8)).max() <= 1e-12
    assert np.abs(pe[0, :, 16:] - classical(16, 8)).max() <= 1e-12


def test_scale_covariance_and_separability():
    a = FrameStructure(40, 0.5e-3, 32, 1.44e6)
    b = FrameStructure(40, 0.5e-3, 128, 0.36e6)   # same N*df product
    pa, pb = fs_pe(a, FsPeConfig(32)), fs_pe(b, FsPeConfig(32))
    assert np.array_equal(pa, pb[:, :32])
    assert np.array_equal(pa[:, 3, :16], pa[:, 17, :16])
    assert np.array_equal(pa[5, :, 16:], pa[11, :, 16:])


def test_errors():
    with pytest.raises(ValueError):
        FsPeConfig(30)
    with pytest.raises(ValueError):
        FsPeConfig(32, sigma=1.0)
    with pytest.raises(ValueError):
        fs_pe(FrameStructure(10, 1e-3, 16, 1e5), FsPeConfig(32, patch_size=4))
