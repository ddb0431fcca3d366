import dataclasses

import numpy as np
import pytest
import torch
from scipy import stats

from ddafm.channel import FrameStructure, ScenarioConfig
from ddafm.dataio import (ConfigError, FormatError, build_dataclass, file_digest, generate_dataset,
                          load_checkpoint, make_record, read_dataset, save_checkpoint, write_dataset)
from ddafm.model import Backbone, ModelConfig
from ddafm.train import (load_model_tensors, load_optimizer_tensors, make_optimizer, model_tensors,
                         optimizer_tensors, StagePlan)

FRAMES = (FrameStructure(8, 1e-3, 16, 60e3, 2, 2), FrameStructure(4, 1e-3, 8, 120e3, 4, 2))


@pytest.fixture
def records():
    return generate_dataset(ScenarioConfig(), FRAMES, 5, seed=9)


def test_generation_is_deterministic_and_normalized(records):
    again = generate_dataset(ScenarioConfig(), FRAMES, 5, seed=9)
    for a, b in zip(records, again):
        assert np.array_equal(a.obs, b.obs) and np.array_equal(a.gt, b.gt)
    for r in records:
        assert np.linalg.norm(r.gt) == pytest.approx(1.0, abs=1e-12)
        assert 5 <= r.snr_db <= 20
    assert [r.frame for r in records] == [FRAMES[0], FRAMES[1]] * 2 + [FRAMES[0]]
    other = generate_dataset(ScenarioConfig(), FRAMES, 5, seed=10)
    assert not np.array_equal(records[0].gt, other[0].gt)


def test_eval_style_fixes_snr():
    recs = generate_dataset(ScenarioConfig(), FRAMES, 3, seed=1, style="eval")
    assert {r.snr_db for r in recs} == {10.0}
    with pytest.raises(ValueError):
        generate_dataset(ScenarioConfig(), FRAMES, 3, seed=1, style="bogus")


def test_train_snr_is_uniform():
    snrs = [make_record(ScenarioConfig(path_count_range=(1, 1)), FRAMES[1], (0, i)).snr_db for i in range(1500)]
    assert stats.kstest(snrs, stats.uniform(loc=5, scale=15).cdf).pvalue > 0.01


def test_round_trip_and_size(tmp_path, records):
    path = tmp_path / "d.bin"
    digest = write_dataset(records, path, ScenarioConfig(), style="train")
    header, back = read_dataset(path)
    assert header["payload_sha256"] == digest and header["record_count"] == 5
    elems = sum(int(np.prod(r.frame.shape)) for r in records)
    assert header["payload_bytes"] == 2 * elems * 2 * 4
    assert header["scenario_digest"] == ScenarioConfig().digest()
    for a, b in zip(records, back):
        assert b.frame == a.frame and b.seed == a.seed and b.snr_db == a.snr_db
        assert np.array_equal(b.gt, a.gt.astype(np.complex64))
        assert np.array_equal(b.obs, a.obs.astype(np.complex64))
        assert np.array_equal(b.paths.tau, a.paths.tau) and np.array_equal(b.paths.beta, a.paths.beta)
        assert b.velocity == a.velocity
    write_dataset(back, tmp_path / "again.bin", ScenarioConfig(), style="train")
    assert file_digest(tmp_path / "again.bin") == file_digest(path)


def flip_byte(path, offset_from_end):
    raw = bytearray(path.read_bytes())
    raw[-offset_from_end] ^= 0x01
    path.write_bytes(bytes(raw))


def test_corruption_is_detected(tmp_path, records):
    path = tmp_path / "d.bin"
    write_dataset(records, path)
    flip_byte(path, 10)
    with pytest.raises(FormatError, match="digest"):
        read_dataset(path)
    write_dataset(records, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="bytes"):
        read_dataset(path)
    path.write_bytes(b"NOT-A-FILE v1 3\n{}")
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)
    write_dataset(records, path)
    path.write_bytes(path.read_bytes().replace(b"DDAFM-DATASET v1", b"DDAFM-DATASET v9", 1))
    with pytest.raises(FormatError, match="version"):
        read_dataset(path)


def test_checkpoint_round_trip_is_forward_exact(tmp_path):
    cfg = ModelConfig(embed_dim=16, heads=2, blocks_per_module=2, module_count=1, in_channels=8)
    for dtype in (torch.float64, torch.float32):
        model = Backbone(cfg, seed=2, dtype=dtype)
        opt = make_optimizer(model, 1e-3)
        x = torch.randn(2, 8, 8, 8, dtype=dtype)
        model(x).square().sum().backward()
        opt.step()
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, cfg.to_dict(), model_tensors(model), optimizer_tensors(model, opt),
                        counters={"global_step": 1}, extra={"plan": {"seed": 0}})
        ck = load_checkpoint(path)
        assert ck["counters"] == {"global_step": 1} and ck["model_config"] == cfg.to_dict()
        clone = Backbone(ModelConfig(**ck["model_config"]), seed=77, dtype=dtype)
        load_model_tensors(clone, ck["params"])
        opt2 = make_optimizer(clone, 1e-3)
        load_optimizer_tensors(clone, opt2, ck["optimizer"])
        with torch.no_grad():
            assert torch.equal(model(x), clone(x))
        for p, q in zip(model.parameters(), clone.parameters()):
            a, b = opt.state[p], opt2.state[q]
            assert a.keys() == b.keys()
            for k in a:
                assert torch.equal(a[k], b[k]), (k, a[k], b[k])
    flip_byte(path, 3)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_build_dataclass_reports_field_paths():
    plan = build_dataclass(StagePlan, "train.stage1", {"epochs": 3, "obs_ratio_range": [0.5, 0.6]})
    assert plan.epochs == 3 and plan.obs_ratio_range == (0.5, 0.6)
    with pytest.raises(ConfigError, match="train.stage1.epochz: unknown field"):
        build_dataclass(StagePlan, "train.stage1", {"epochz": 3})
    with pytest.raises(ConfigError, match="train.stage1.initial_lr: expected a number"):
        build_dataclass(StagePlan, "train.stage1", {"initial_lr": "fast"})
    with pytest.raises(ConfigError, match="scenario"):
        build_dataclass(ScenarioConfig, "scenario", {"carrier": -1.0})
    assert dataclasses.is_dataclass(build_dataclass(ScenarioConfig, "scenario", None))
