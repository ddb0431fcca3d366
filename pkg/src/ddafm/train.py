"""Reconstruction loss, heterogeneous batches, StepLR schedules, and the two-stage curriculum."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .channel import FrameStructure
from .dataio import Record
from .fspe import FsPeConfig, fs_pe
from .model import Backbone
from .tasks import CE, FP, TASKS, TP, MaskSpec, apply_mask, build_mask, validity_mask
from .transform import complexify_torch, dda_to_stf_torch, realify_array, stf_to_dda_array


@dataclass(frozen=True)
class StagePlan:
    data_fraction: float = 1.0
    epochs: int = 1
    initial_lr: float = 3e-5
    min_lr: float = 5e-6
    decay_factor: float = 0.9
    decay_interval: int = 5000
    batch_size: int = 176
    obs_ratio_range: tuple = (0.5, 0.75)
    pilot_spacings: tuple = (2, 4)

    def __post_init__(self):
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.min_lr > self.initial_lr:
            raise ValueError("min_lr exceeds initial_lr")
        if self.decay_interval < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("decay_interval and batch_size must be >= 1, epochs >= 0")
        lo, hi = self.obs_ratio_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("obs_ratio_range must satisfy 0 < x_min <= x_max <= 1")
        if not self.pilot_spacings or min(self.pilot_spacings) < 1:
            raise ValueError("pilot_spacings must be a nonempty list of positive integers")


@dataclass(frozen=True)
class TrainPlan:
    stages: tuple = ()
    seed: int = 0
    grad_clip: float = 1.0
    dtype: str = "float64"
    val_every: int = 0

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {**asdict(self), "stages": [asdict(s) for s in self.stages]}


STAGE_ONE = StagePlan(0.1, 10, 6e-5, 3e-5, 0.8, 400, 176, (0.75, 0.75), (2,))
STAGE_TWO = StagePlan(1.0, 30, 3e-5, 5e-6, 0.9, 5000, 176, (0.5, 0.75), (2, 4))
REFERENCE_PLAN = TrainPlan(stages=(STAGE_ONE, STAGE_TWO))


def lr_at(step: int, stage: StagePlan) -> float:
    """StepLR with a floor: max(min_lr, initial_lr * factor ** (step // interval))."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(stage.min_lr, stage.initial_lr * stage.decay_factor ** (step // stage.decay_interval))


def nmse_loss(gt: torch.Tensor, pred: torch.Tensor, validity: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of ||gt - pred||^2 / ||gt||^2 per sample, over valid (time, freq) cells.

    ``gt``/``pred``: (B, N_t, N_f, ...), real or complex; ``validity``: (B, N_t, N_f).
    """
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    err = (gt - pred).abs() ** 2
    ref = gt.abs() ** 2
    if validity is not None:
        v = validity.reshape(validity.shape + (1,) * (gt.dim() - validity.dim())).to(err.dtype)
        err = err * v
        ref = ref * v
    dims = tuple(range(1, gt.dim()))
    den = ref.sum(dim=dims)
    if torch.any(den == 0):
        raise ValueError("ground truth has zero energy")
    return (err.sum(dim=dims) / den).mean()


# ----------------------------------------------------------------------------
# batches


@dataclass
class BatchSpec:
    indices: list[int]
    specs: list[MaskSpec]
    frames: list[FrameStructure]


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def draw_mask_spec(stage: StagePlan, frame: FrameStructure, rng: np.random.Generator) -> MaskSpec:
    task = TASKS[int(rng.integers(3))]
    if task == CE:
        allowed = [d for d in stage.pilot_spacings if frame.n_f % d == 0]
        return MaskSpec(CE, pilot_spacing=int(allowed[int(rng.integers(len(allowed)))]))
    lo, hi = stage.obs_ratio_range
    x = lo if lo == hi else float(rng.uniform(lo, hi))
    return MaskSpec(task, obs_ratio=x)


def build_batch(pool: Sequence[Record], indices: Sequence[int], stage: StagePlan,
                rng: np.random.Generator) -> BatchSpec:
    """Assign an independent uniform task and its mask parameters to every sample."""
    if not len(pool):
        raise ValueError("empty sample pool")
    specs = [draw_mask_spec(stage, pool[i].frame, rng) for i in indices]
    return BatchSpec(list(indices), specs, [pool[i].frame for i in indices])


class Preprocessor:
    """Mask -> transform -> real packing -> pad; caches positional encodings per frame."""

    def __init__(self, grid: tuple[int, int], embed_dim: int, pe_cfg: FsPeConfig | None = None,
                 use_pe: bool = True, dtype=torch.float64):
        self.grid = grid
        self.pe_cfg = pe_cfg or FsPeConfig(embed_dim)
        self.use_pe = use_pe
        self.dtype = dtype
        self._pe: dict[FrameStructure, np.ndarray] = {}

    def pe(self, fs: FrameStructure) -> np.ndarray:
        if fs not in self._pe:
            full = np.zeros(self.grid + (self.pe_cfg.embed_dim,))
            full[: fs.n_t, : fs.n_f] = fs_pe(fs, self.pe_cfg)
            self._pe[fs] = full
        return self._pe[fs]

    def model_input(self, obs: np.ndarray, fs: FrameStructure, spec: MaskSpec) -> np.ndarray:
        n_t, n_f = self.grid
        if fs.n_t > n_t or fs.n_f > n_f:
            raise ValueError(f"frame {fs.n_t}x{fs.n_f} exceeds the {n_t}x{n_f} grid")
        m = build_mask(spec, fs)
        dda = stf_to_dda_array(apply_mask(obs, m, spec.axis))
        out = np.zeros((n_t, n_f, 2 * fs.n_rx))
        out[: fs.n_t, : fs.n_f] = realify_array(dda)
        return out

    def assemble(self, observations: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                 frames: Sequence[FrameStructure], specs: Sequence[MaskSpec]) -> dict:
        n_t, n_f = self.grid
        x = np.stack([self.model_input(o, fs, s) for o, fs, s in zip(observations, frames, specs)])
        v = np.stack([validity_mask(fs, n_t, n_f) for fs in frames])
        # unit mean-square input per sample; undone on the output (NMSE is gain invariant)
        power = np.einsum("bijc,bij->b", x * x, v) / (v.sum(axis=(1, 2)) * x.shape[-1])
        gain = np.sqrt(np.where(power > 0, power, 1.0))
        x = x / gain[:, None, None, None]
        fs0 = frames[0]
        gt = np.zeros((len(frames), n_t, n_f, fs0.n_rx1, fs0.n_rx2), dtype=np.complex128)
        for i, (g, fs) in enumerate(zip(truths, frames)):
            gt[i, : fs.n_t, : fs.n_f] = g
        batch = {
            "x": torch.from_numpy(x).to(self.dtype),
            "validity": torch.from_numpy(v).to(self.dtype),
            "gt": torch.from_numpy(gt).to(torch.complex128 if self.dtype == torch.float64 else torch.complex64),
            "gain": torch.from_numpy(gain).to(self.dtype),
            "frames": list(frames),
            "specs": list(specs),
        }
        batch["pe"] = (torch.from_numpy(np.stack([self.pe(fs) for fs in frames])).to(self.dtype)
                       if self.use_pe else None)
        return batch


def predict_stf(model: Backbone, batch: dict) -> torch.Tensor:
    """Run the backbone and map its DDA output back to a padded STF tensor."""
    out = model(batch["x"], batch["pe"], batch["validity"])
    frames = batch["frames"]
    pred = torch.zeros_like(batch["gt"])
    for i, fs in enumerate(frames):
        z = complexify_torch(out[i, : fs.n_t, : fs.n_f] * batch["gain"][i], fs.n_rx1, fs.n_rx2)
        pred[i, : fs.n_t, : fs.n_f] = dda_to_stf_torch(z)
    return pred


def per_sample_nmse(gt: torch.Tensor, pred: torch.Tensor, validity: torch.Tensor) -> torch.Tensor:
    v = validity[..., None, None]
    err = ((gt - pred).abs() ** 2 * v).flatten(1).sum(1)
    ref = (gt.abs() ** 2 * v).flatten(1).sum(1)
    return err / ref


# ----------------------------------------------------------------------------
# optimizer


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(optimizer: torch.optim.Adam, lr: float, grad_clip: float | None = None) -> float:
    """Clip, check, and apply one Adam update at ``lr``. Returns the pre-clip gradient norm."""
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            bad = int((~torch.isfinite(p.grad)).sum())
            raise FloatingPointError(f"non-finite gradient: {bad} entries in a {tuple(p.shape)} parameter")
    if grad_clip:
        norm = float(torch.nn.utils.clip_grad_norm_(params, grad_clip))
    else:
        norm = float(torch.sqrt(sum((p.grad ** 2).sum() for p in params))) if params else 0.0
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.step()
    return norm


# ----------------------------------------------------------------------------
# curriculum


@dataclass
class Progress:
    stage: int = 0
    epoch: int = 0
    batch: int = 0
    stage_step: int = 0
    global_step: int = 0
    done: bool = False


def stage_subset(n: int, stage_idx: int, stage: StagePlan, seed: int) -> np.ndarray:
    k = max(1, int(round(stage.data_fraction * n)))
    if k >= n:
        return np.arange(n)
    return np.sort(_stream(seed, 1, stage_idx).choice(n, size=k, replace=False))


def epoch_batches(n: int, stage_idx: int, epoch: int, stage: StagePlan, seed: int) -> list[np.ndarray]:
    subset = stage_subset(n, stage_idx, stage, seed)
    order = subset[_stream(seed, 2, stage_idx, epoch).permutation(subset.size)]
    return [order[i:i + stage.batch_size] for i in range(0, order.size, stage.batch_size)]


def validation_batches(records: Sequence[Record], stage: StagePlan, seed: int, size: int = 16):
    rng = _stream(seed, 3)
    specs = [draw_mask_spec(stage, r.frame, rng) for r in records]
    for i in range(0, len(records), size):
        yield records[i:i + size], specs[i:i + size]


def evaluate_loss(model: Backbone, prep: Preprocessor, records: Sequence[Record], stage: StagePlan,
                  seed: int) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for recs, specs in validation_batches(records, stage, seed):
            batch = prep.assemble([r.obs for r in recs], [r.gt for r in recs], [r.frame for r in recs], specs)
            pred = predict_stf(model, batch)
            total += float(per_sample_nmse(batch["gt"], pred, batch["validity"]).sum())
            count += len(recs)
    return total / count


def train_step(model: Backbone, optimizer, prep: Preprocessor, pool: Sequence[Record],
               spec: BatchSpec, lr: float, grad_clip: float | None) -> dict:
    recs = [pool[i] for i in spec.indices]
    batch = prep.assemble([r.obs for r in recs], [r.gt for r in recs], spec.frames, spec.specs)
    optimizer.zero_grad(set_to_none=True)
    pred = predict_stf(model, batch)
    per = per_sample_nmse(batch["gt"], pred, batch["validity"])
    loss = per.mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    loss.backward()
    gnorm = adam_step(optimizer, lr, grad_clip)
    per_task = {}
    for t in TASKS:
        sel = [j for j, s in enumerate(spec.specs) if s.task == t]
        per_task[t] = float(per[sel].detach().mean()) if sel else None
    return {"loss": float(loss.detach()), "grad_norm": gnorm, "per_task": per_task}


def run_curriculum(plan: TrainPlan, pool: Sequence[Record], model: Backbone, prep: Preprocessor,
                   val: Sequence[Record] = (), optimizer=None, progress: Progress | None = None,
                   log: Callable[[dict], None] | None = None,
                   checkpoint: Callable[[Progress], None] | None = None,
                   checkpoint_every: int = 0, max_steps: int | None = None) -> Progress:
    """Train through every stage of ``plan``; resumable from ``progress``.

    Sampling order, subsets, and task draws are pure functions of
    (seed, stage, epoch, batch), so restarting from a saved ``Progress``
    replays exactly the batches an uninterrupted run would have seen.
    ``max_steps`` stops after that many optimizer steps in this call.
    """
    log = log or (lambda rec: None)
    progress = progress or Progress()
    optimizer = optimizer or make_optimizer(model, plan.stages[0].initial_lr)
    taken = 0
    final_stage = plan.stages[-1]
    if progress.global_step == 0 and val:
        log({"kind": "val", "global_step": 0, "stage": 0,
             "val_loss": evaluate_loss(model, prep, val, final_stage, plan.seed)})

    while progress.stage < len(plan.stages):
        stage = plan.stages[progress.stage]
        while progress.epoch < stage.epochs:
            batches = epoch_batches(len(pool), progress.stage, progress.epoch, stage, plan.seed)
            while progress.batch < len(batches):
                if max_steps is not None and taken >= max_steps:
                    return progress
                idx = batches[progress.batch]
                rng = _stream(plan.seed, 4, progress.stage, progress.epoch, progress.batch)
                spec = build_batch(pool, idx, stage, rng)
                lr = lr_at(progress.stage_step, stage)
                t0 = time.perf_counter()
                out = train_step(model, optimizer, prep, pool, spec, lr, plan.grad_clip)
                log({"kind": "step", "global_step": progress.global_step, "stage": progress.stage + 1,
                     "epoch": progress.epoch, "lr": lr, "loss": out["loss"],
                     "nmse_TP": out["per_task"][TP], "nmse_FP": out["per_task"][FP],
                     "nmse_CE": out["per_task"][CE], "grad_norm": out["grad_norm"],
                     "seconds": round(time.perf_counter() - t0, 4)})
                progress.batch += 1
                progress.stage_step += 1
                progress.global_step += 1
                taken += 1
                if plan.val_every and val and progress.global_step % plan.val_every == 0:
                    log({"kind": "val", "global_step": progress.global_step, "stage": progress.stage + 1,
                         "val_loss": evaluate_loss(model, prep, val, final_stage, plan.seed)})
                if checkpoint and checkpoint_every and progress.global_step % checkpoint_every == 0:
                    checkpoint(progress)
            progress.epoch += 1
            progress.batch = 0
        progress.stage += 1
        progress.epoch = 0
        progress.stage_step = 0
    progress.done = True
    if val:
        log({"kind": "val", "global_step": progress.global_step, "stage": len(plan.stages),
             "val_loss": evaluate_loss(model, prep, val, final_stage, plan.seed)})
    if checkpoint:
        checkpoint(progress)
    return progress


def make_model_predictor(model: Backbone, prep: Preprocessor, batch_size: int = 16):
    """Callable (records, specs) -> list of STF predictions cropped to each record's frame."""

    def predict(records, specs):
        outs = []
        with torch.no_grad():
            for i in range(0, len(records), batch_size):
                recs = records[i:i + batch_size]
                sp = specs[i:i + batch_size]
                batch = prep.assemble([r.obs for r in recs], [r.gt for r in recs], [r.frame for r in recs], sp)
                pred = predict_stf(model, batch).to(torch.complex128).numpy()
                outs.extend(pred[j, : r.frame.n_t, : r.frame.n_f] for j, r in enumerate(recs))
        return outs

    return predict


# ----------------------------------------------------------------------------
# checkpoint tensors


def model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {n: t.detach().cpu().to(torch.float64).numpy() for n, t in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, tensors: dict[str, np.ndarray]):
    ref = model.state_dict()
    missing = sorted(set(ref) ^ set(tensors))
    if missing:
        raise ValueError(f"checkpoint/model tensor names differ: {missing[:5]}")
    model.load_state_dict({n: torch.from_numpy(tensors[n]).to(ref[n].dtype) for n in ref})


def optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        for key, value in optimizer.state.get(p, {}).items():
            out[f"{name}/{key}"] = value.detach().cpu().to(torch.float64).numpy()
    return out


def load_optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Adam, tensors: dict[str, np.ndarray]):
    state = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            if f"{name}/{key}" in tensors:
                dtype = torch.float32 if key == "step" else p.dtype
                entry[key] = torch.from_numpy(tensors[f"{name}/{key}"]).to(dtype)
        if entry:
            state[i] = entry
    sd = optimizer.state_dict()
    optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
