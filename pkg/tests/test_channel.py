import math

import numpy as np
import pytest

from ddafm.channel import (FRAMES, KMH, SPEED_OF_LIGHT, FrameStructure, PathSet, ScenarioConfig,
                           add_noise, array_response, get_frame, normalize_energy, sample_paths,
                           synth_stf)
from ddafm.numerics import fft_axis
from ddafm.transform import stf_to_dda_array

from conftest import crandn


def test_frame_table():
    fs = get_frame("FS-A-Denver")
    assert (fs.n_t, fs.dt, fs.n_f, fs.df, fs.n_rx) == (80, 0.5e-3, 32, 1.44e6, 32)
    assert get_frame("fs-b-rio").n_f == 128
    assert get_frame("fs-b-oklahoma").n_f == 72
    with pytest.raises(KeyError):
        get_frame("fs-z")
    with pytest.raises(ValueError):
        FrameStructure(0, 1e-3, 4, 1e3)
    with pytest.raises(ValueError):
        FrameStructure(4, -1e-3, 4, 1e3)


def test_pathset_validation():
    with pytest.raises(ValueError):
        PathSet([], [], [], [], [])
    with pytest.raises(ValueError):
        PathSet([1], [0], [-1e-9], [0], [0])
    with pytest.raises(ValueError):
        PathSet([1], [0], [0], [0], [2.0])


def test_degenerate_sampler_returns_pinned_path():
    cfg = ScenarioConfig(fixed_paths=((1.0, 0.0, 0.0, 0.0, 0.0),))
    p, _ = sample_paths(cfg, np.random.default_rng(0))
    assert len(p) == 1
    assert p.beta[0] == 1 and p.nu[0] == 0 and p.tau[0] == 0 and p.theta[0] == 0 and p.phi[0] == 0


def test_doppler_bound():
    cfg = ScenarioConfig(carrier_hz=3.5e9, speed_range=(0.0, 120 * KMH))
    nu_max = 3.5e9 * (120 / 3.6) / 2.998e8  # 389.15 Hz with c rounded to 2.998e8
    assert cfg.max_doppler == pytest.approx(nu_max, abs=0.05)
    rng = np.random.default_rng(0)
    worst = max(np.abs(sample_paths(cfg, rng)[0].nu).max() for _ in range(2000))
    assert 0.9 * nu_max < worst <= cfg.max_doppler


def test_sampler_contract():
    cfg = ScenarioConfig(path_count_range=(3, 5))
    rng = np.random.default_rng(5)
    for _ in range(200):
        p, v = sample_paths(cfg, rng)
        assert 3 <= len(p) <= 5
        assert np.sum(np.abs(p.beta) ** 2) == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.abs(p.phi) <= math.pi / 3)
        assert 0 <= v.speed <= 120 * KMH
    with pytest.raises(ValueError):
        ScenarioConfig(path_count_range=(4, 2))
    with pytest.raises(ValueError):
        ScenarioConfig(speed_range=(-1.0, 2.0))


def test_delay_mean_monte_carlo():
    cfg = ScenarioConfig(delay_scale=80e-9, path_count_range=(10, 10))
    rng = np.random.default_rng(11)
    taus = np.concatenate([sample_paths(cfg, rng)[0].tau for _ in range(10_000)])
    assert taus.size == 100_000
    assert abs(taus.mean() / 80e-9 - 1) < 0.05


def test_array_response():
    assert np.array_equal(array_response(0.0, 0.0, 8, 4), np.ones((8, 4)))
    a = array_response(0.7, -0.3, 8, 4)
    assert np.allclose(np.abs(a), 1.0)


@pytest.mark.parametrize("theta,phi", [(0.3, 0.1), (-1.2, 0.4), (2.5, -0.6), (0.0, 0.9)])
def test_array_response_peak(theta, phi):
    n1, n2 = 8, 4
    spec = np.abs(fft_axis(fft_axis(array_response(theta, phi, n1, n2), 0), 1))
    peak = np.unravel_index(np.argmax(spec), spec.shape)
    # the steering phase advances by pi*sin per element: spatial frequency n*sin(.)/2 cycles
    f1 = (n1 * math.sin(theta) * math.cos(phi) / 2) % n1
    f2 = (n2 * math.sin(phi) / 2) % n2
    circ = lambda a, b, n: min(abs(a - b), n - abs(a - b))
    assert circ(peak[0], f1, n1) <= 0.5 + 1e-9
    assert circ(peak[1], f2, n2) <= 0.5 + 1e-9


def test_static_boresight_path_is_all_ones():
    fs = FrameStructure(6, 1e-3, 5, 1e5, 2, 3)
    h = synth_stf(PathSet([1.0], [0.0], [0.0], [0.0], [0.0]), fs)
    assert np.array_equal(h, np.ones(fs.shape))


def test_superposition_and_unit_modulus(rng):
    fs = FrameStructure(10, 0.5e-3, 12, 1.44e6, 4, 2)
    cfg = ScenarioConfig()
    a, _ = sample_paths(cfg, rng)
    b, _ = sample_paths(cfg, rng)
    assert np.allclose(synth_stf(a + b, fs), synth_stf(a, fs) + synth_stf(b, fs), atol=1e-13)
    single = PathSet([0.3 - 0.4j], [123.0], [57e-9], [0.4], [-0.2])
    assert np.allclose(np.abs(synth_stf(single, fs)), 0.5, atol=1e-13)


def test_synth_matches_formula_entrywise(rng):
    fs = FrameStructure(3, 1e-3, 4, 2e5, 2, 2)
    p, _ = sample_paths(ScenarioConfig(path_count_range=(3, 3)), rng)
    h = synth_stf(p, fs)
    s, k, a, b = 2, 3, 1, 1
    val = sum(p.beta[i] * np.exp(2j * np.pi * (p.nu[i] * s * fs.dt - p.tau[i] * k * fs.df))
              * array_response(p.theta[i], p.phi[i], 2, 2)[a, b] for i in range(3))
    assert h[s, k, a, b] == pytest.approx(val, abs=1e-13)


def test_on_grid_path_is_single_dda_bin():
    fs = FrameStructure(16, 0.5e-3, 8, 1.44e6, 4, 4)
    m, n = 3, 5
    nu = m / (fs.n_t * fs.dt)
    tau = n / (fs.n_f * fs.df)
    # angles with N1 sin(theta)cos(phi)/2 = 1 and N2 sin(phi)/2 = q2
    q2 = 1
    phi = math.asin(2 * q2 / fs.n_rx2)
    theta = math.asin(2 / fs.n_rx1 / math.cos(phi))
    h = synth_stf(PathSet([1.0], [nu], [tau], [theta], [phi]), fs)
    d = stf_to_dda_array(h)
    nz = np.argwhere(np.abs(d) > 1e-9)
    assert len(nz) == 1
    assert tuple(nz[0]) == (m, n, 1, q2)
    assert abs(d[tuple(nz[0])]) == pytest.approx(np.sqrt(h.size), rel=1e-12)


def test_normalize_energy(rng):
    h = crandn(rng, 4, 5, 2, 2)
    u = normalize_energy(h)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(normalize_energy(u), u, atol=1e-15)
    assert np.allclose(normalize_energy(7 * h), u, atol=1e-15)
    with pytest.raises(ValueError):
        normalize_energy(np.zeros(3))


def test_noise_injection():
    fs = FrameStructure(80, 0.5e-3, 128, 0.36e6, 8, 4)
    p, _ = sample_paths(ScenarioConfig(), np.random.default_rng(2))
    h = normalize_energy(synth_stf(p, fs))
    assert h.size >= 3e5
    noisy = add_noise(h, 10.0, np.random.default_rng(9))
    realized = 10 * np.log10(np.sum(np.abs(h) ** 2) / np.sum(np.abs(noisy - h) ** 2))
    assert abs(realized - 10.0) <= 0.1
    assert np.array_equal(add_noise(h, math.inf, np.random.default_rng(0)), h)
    assert np.array_equal(add_noise(h, 5.0, np.random.default_rng(4)), add_noise(h, 5.0, np.random.default_rng(4)))
