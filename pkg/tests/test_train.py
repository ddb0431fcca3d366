import numpy as np
import pytest
import torch

from ddafm.channel import FrameStructure, ScenarioConfig
from ddafm.dataio import generate_dataset
from ddafm.model import Backbone, ModelConfig
from ddafm.tasks import CE, FP, TP, MaskSpec
from ddafm.train import (STAGE_ONE, STAGE_TWO, Preprocessor, Progress, StagePlan, TrainPlan, adam_step,
                         build_batch, epoch_batches, lr_at, make_optimizer, nmse_loss, predict_stf,
                         run_curriculum)

FRAMES = (FrameStructure(8, 1e-3, 16, 60e3, 2, 2), FrameStructure(16, 0.5e-3, 16, 30e3, 2, 2))
CFG = ModelConfig(embed_dim=16, heads=2, blocks_per_module=2, module_count=1, in_channels=8)


@pytest.fixture(scope="module")
def pool():
    return generate_dataset(ScenarioConfig(), FRAMES, 24, seed=3)


def test_nmse_loss_properties():
    g = torch.randn(3, 4, 5, 2, 2, dtype=torch.complex128)
    assert float(nmse_loss(g, g)) == 0
    assert float(nmse_loss(g, torch.zeros_like(g))) == pytest.approx(1.0, rel=1e-15)
    assert float(nmse_loss(g, 1.5 * g)) == pytest.approx(0.25, rel=1e-14)
    assert float(nmse_loss(3 * g, 3 * 1.5 * g)) == pytest.approx(0.25, rel=1e-14)
    with pytest.raises(ValueError):
        nmse_loss(g, g[:, :3])
    with pytest.raises(ValueError):
        nmse_loss(torch.zeros_like(g), g)


def test_nmse_loss_ignores_padding():
    g = torch.randn(2, 6, 6, 2, 2, dtype=torch.complex128)
    v = torch.zeros(2, 6, 6, dtype=torch.float64)
    v[:, :4, :3] = 1
    p = g + 0.1 * torch.randn_like(g)
    q = p.clone()
    q[:, 4:] = 1e6
    q[:, :, 3:] = -1e6
    assert float(nmse_loss(g, p, v)) == float(nmse_loss(g, q, v))
    crop = nmse_loss(g[:, :4, :3], p[:, :4, :3])
    assert float(nmse_loss(g, p, v)) == pytest.approx(float(crop), rel=1e-14)


def test_lr_schedule():
    assert lr_at(0, STAGE_ONE) == 6e-5
    assert lr_at(399, STAGE_ONE) == 6e-5
    assert lr_at(400, STAGE_ONE) == pytest.approx(4.8e-5, rel=1e-12)
    assert lr_at(10_000, STAGE_ONE) == 3e-5
    assert lr_at(4999, STAGE_TWO) == 3e-5
    assert lr_at(5000, STAGE_TWO) == pytest.approx(2.7e-5, rel=1e-12)
    assert lr_at(10**7, STAGE_TWO) == 5e-6
    with pytest.raises(ValueError):
        lr_at(-1, STAGE_ONE)
    with pytest.raises(ValueError):
        StagePlan(min_lr=1.0, initial_lr=0.1)


def test_adam_converges_on_quadratic():
    w = torch.nn.Parameter(torch.tensor([3.0, -2.0], dtype=torch.float64))
    opt = torch.optim.Adam([w], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ((w - torch.tensor([1.0, 0.5], dtype=torch.float64)) ** 2).sum().backward()
        adam_step(opt, 0.05)
    assert torch.allclose(w, torch.tensor([1.0, 0.5], dtype=torch.float64), atol=1e-6)


def test_adam_first_step_and_clip():
    w = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    opt = make_optimizer(torch.nn.ParameterList([w]), 1e-3)
    w.grad = torch.tensor([30.0, 0.0, -40.0, 0.0], dtype=torch.float64)
    norm = adam_step(opt, 1e-3, grad_clip=1.0)
    assert norm == pytest.approx(50.0)
    # bias-corrected Adam moves each coordinate by ~lr * sign(g) on step one
    assert torch.allclose(w.detach(), torch.tensor([-1e-3, 0, 1e-3, 0], dtype=torch.float64), atol=1e-8)
    w.grad = torch.tensor([float("nan"), 0, 0, 0], dtype=torch.float64)
    with pytest.raises(FloatingPointError):
        adam_step(opt, 1e-3)


def test_build_batch_task_statistics(pool):
    stage = StagePlan(obs_ratio_range=(0.5, 0.75), pilot_spacings=(2, 4), batch_size=8)
    rng = np.random.default_rng(0)
    specs = build_batch(pool, [0] * 6000, stage, rng).specs
    counts = {t: sum(s.task == t for s in specs) for t in (TP, FP, CE)}
    for c in counts.values():
        assert abs(c / 6000 - 1 / 3) < 0.02
    xs = [s.obs_ratio for s in specs if s.task != CE]
    assert min(xs) >= 0.5 and max(xs) <= 0.75
    ds = {s.pilot_spacing for s in specs if s.task == CE}
    assert ds == {2, 4}
    one = build_batch(pool, [0] * 300, StagePlan(obs_ratio_range=(0.75, 0.75), pilot_spacings=(2,)), rng).specs
    assert {s.obs_ratio for s in one if s.task != CE} == {0.75}
    with pytest.raises(ValueError):
        build_batch([], [0], stage, rng)


def test_epoch_batches_partition_subset():
    stage = StagePlan(data_fraction=0.5, batch_size=7)
    batches = epoch_batches(40, 0, 0, stage, seed=1)
    flat = np.concatenate(batches)
    assert flat.size == 20 and np.unique(flat).size == 20
    assert np.array_equal(np.sort(flat), np.sort(np.concatenate(epoch_batches(40, 0, 1, stage, seed=1))))
    assert not np.array_equal(flat, np.concatenate(epoch_batches(40, 0, 1, stage, seed=1)))


def test_heterogeneous_batch_padding_is_inert(pool):
    prep = Preprocessor((16, 16), CFG.embed_dim)
    model = Backbone(CFG, seed=0)
    a, b = pool[0], pool[1]
    assert a.frame != b.frame
    specs = [MaskSpec(TP, obs_ratio=0.5), MaskSpec(FP, obs_ratio=0.75)]
    mixed = prep.assemble([a.obs, b.obs], [a.gt, b.gt], [a.frame, b.frame], specs)
    solo = prep.assemble([a.obs], [a.gt], [a.frame], specs[:1])
    pm, ps = predict_stf(model, mixed), predict_stf(model, solo)
    assert torch.allclose(pm[0], ps[0], rtol=0, atol=1e-12)
    n_t, n_f = a.frame.n_t, a.frame.n_f
    assert not pm[0, n_t:].any() and not pm[0, :, n_f:].any()


def test_input_gain_is_undone(pool):
    prep = Preprocessor((16, 16), CFG.embed_dim)
    model = Backbone(CFG, seed=0)
    r = pool[0]
    spec = [MaskSpec(CE, pilot_spacing=2)]
    p1 = predict_stf(model, prep.assemble([r.obs], [r.gt], [r.frame], spec))
    p2 = predict_stf(model, prep.assemble([5 * r.obs], [r.gt], [r.frame], spec))
    assert torch.allclose(5 * p1, p2, atol=1e-12)


def tiny_plan(**kw):
    stage = StagePlan(1.0, 2, 3e-3, 1e-3, 0.5, 2, 6, (0.5, 0.75), (2, 4))
    return TrainPlan(stages=(StagePlan(0.5, 1, 3e-3, 3e-3, 1.0, 10, 6, (0.75, 0.75), (2,)), stage), seed=5, **kw)


def test_curriculum_reduces_loss_and_logs(pool):
    prep = Preprocessor((16, 16), CFG.embed_dim)
    model = Backbone(CFG, seed=0)
    logs = []
    plan = tiny_plan()
    prog = run_curriculum(plan, pool, model, prep, val=pool[:6], log=logs.append)
    steps = [r for r in logs if r["kind"] == "step"]
    assert prog.done and prog.global_step == len(steps) == 2 + 8
    assert [r["stage"] for r in steps[:3]] == [1, 1, 2]
    assert steps[2]["lr"] == 3e-3 and steps[4]["lr"] == 1.5e-3
    vals = [r["val_loss"] for r in logs if r["kind"] == "val"]
    assert vals[-1] < vals[0]


def test_resume_is_bit_exact(pool):
    plan = tiny_plan()
    prep = Preprocessor((16, 16), CFG.embed_dim)

    full = Backbone(CFG, seed=0)
    run_curriculum(plan, pool, full, prep)

    part = Backbone(CFG, seed=0)
    opt = make_optimizer(part, 1e-3)
    prog = run_curriculum(plan, pool, part, prep, optimizer=opt, max_steps=4)
    assert not prog.done and prog.global_step == 4
    state = {k: v.clone() for k, v in part.state_dict().items()}
    opt_state = opt.state_dict()
    saved = Progress(**vars(prog))

    resumed = Backbone(CFG, seed=99)
    resumed.load_state_dict(state)
    opt2 = make_optimizer(resumed, 1e-3)
    opt2.load_state_dict(opt_state)
    run_curriculum(plan, pool, resumed, prep, optimizer=opt2, progress=saved)
    for (n, p), q in zip(full.named_parameters(), resumed.parameters()):
        assert torch.equal(p, q), n


def test_float32_plan_runs(pool):
    plan = tiny_plan(dtype="float32")
    prep = Preprocessor((16, 16), CFG.embed_dim, dtype=plan.torch_dtype)
    model = Backbone(CFG, seed=0, dtype=plan.torch_dtype)
    run_curriculum(plan, pool, model, prep, max_steps=2)
    assert next(model.parameters()).dtype == torch.float32
