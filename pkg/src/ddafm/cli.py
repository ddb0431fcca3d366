"""ddafm command line: gen / train / eval / verify / transform / replay.

Config precedence is flag > file > preset > built-in default. Every command
writes a JSON manifest holding the resolved arguments and config, input and
output digests, and timing; ``ddafm replay`` re-executes a manifest.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .channel import FRAMES, ScenarioConfig, get_frame
from .dataio import (ConfigError, FormatError, build_dataclass, file_digest, generate_dataset, load_checkpoint,
                     load_yaml, read_dataset, save_checkpoint, write_dataset)
from .eval import KAPPAS, SNR_GRID_DB, evaluate, kappa_sweep
from .model import Backbone, ModelConfig
from .tasks import CE, FP, TP, MaskSpec, apply_mask, build_mask
from .train import (Preprocessor, Progress, StagePlan, TrainPlan, load_model_tensors, load_optimizer_tensors,
                    make_model_predictor, make_optimizer, model_tensors, optimizer_tensors, run_curriculum)
from .transform import stf_to_dda_array

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


DEFAULTS = {
    "scenario": {},
    "data": {"frames": ["fs-a-denver"], "count": 100, "seed": 0, "style": "train", "snr_db": None},
    "model": {},
    "train": {"seed": 0, "grad_clip": 1.0, "dtype": "float64", "val_every": 0,
              "stages": [
                  {"data_fraction": 0.1, "epochs": 10, "initial_lr": 6e-5, "min_lr": 3e-5, "decay_factor": 0.8,
                   "decay_interval": 400, "batch_size": 176, "obs_ratio_range": [0.75, 0.75],
                   "pilot_spacings": [2]},
                  {"data_fraction": 1.0, "epochs": 30, "initial_lr": 3e-5, "min_lr": 5e-6, "decay_factor": 0.9,
                   "decay_interval": 5000, "batch_size": 176, "obs_ratio_range": [0.5, 0.75],
                   "pilot_spacings": [2, 4]}]},
    "run": {"checkpoint_every": 100, "grid": None, "use_pe": True},
    "eval": {"tasks": ["TP:0.5", "FP:0.5", "CE:4"], "snr_grid": list(SNR_GRID_DB), "kappas": list(KAPPAS),
             "seed": 0, "batch_size": 16},
}


# ----------------------------------------------------------------------------
# config plumbing


def load_preset(name: str) -> dict:
    try:
        text = resources.files("ddafm").joinpath("presets", f"{name}.yaml").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return yaml.safe_load(text) or {}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(cfg: dict, assignments) -> dict:
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if p.isdigit() and isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        value = yaml.safe_load(raw)
        if last.isdigit() and isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return cfg


def resolve_config(args, sections: tuple[str, ...]) -> dict:
    cfg = {s: copy.deepcopy(DEFAULTS[s]) for s in sections}
    if getattr(args, "preset", None):
        cfg = _merge(cfg, {k: v for k, v in load_preset(args.preset).items() if k in sections})
    if getattr(args, "config", None):
        data = load_yaml(args.config)
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown section(s) {sorted(unknown)}")
        cfg = _merge(cfg, {k: v for k, v in data.items() if k in sections})
    return _apply_set(cfg, getattr(args, "set", None))


def scenario_from(cfg: dict) -> ScenarioConfig:
    return build_dataclass(ScenarioConfig, "scenario", cfg.get("scenario"))


def plan_from(cfg: dict) -> TrainPlan:
    section = dict(cfg["train"])
    stages = section.pop("stages", None)
    if not stages:
        raise ConfigError("train.stages: at least one stage is required")
    plans = tuple(build_dataclass(StagePlan, f"train.stages.{i}", s) for i, s in enumerate(stages))
    return build_dataclass(TrainPlan, "train", {**section, "stages": plans})


def parse_task(text: str) -> MaskSpec:
    try:
        name, value = text.split(":")
        name = name.upper()
        if name == CE:
            return MaskSpec(CE, pilot_spacing=int(value))
        if name in (TP, FP):
            return MaskSpec(name, obs_ratio=float(value))
    except ValueError:
        pass
    raise ConfigError(f"task {text!r}: expected TP:<ratio>, FP:<ratio> or CE:<spacing>")


# ----------------------------------------------------------------------------
# manifests


def _versions() -> dict:
    return {"ddafm": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def write_manifest(path, command: str, args: dict, config: dict, inputs: dict, outputs: dict,
                   started: float, status: str = "ok", extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs if Path(p).exists()},
        "status": status,
        "timing": {"seconds": round(time.time() - started, 3)},
        "versions": _versions(),
        **(extra or {}),
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    os.replace(tmp, path)
    return manifest


def _replayable(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config", "preset", "set")}


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: dict) -> int:
    started = time.time()
    data = cfg["data"]
    if args.frame:
        data["frames"] = list(args.frame)
    for key in ("count", "seed", "style", "snr_db"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    unknown = set(data) - set(DEFAULTS["data"])
    if unknown:
        raise ConfigError(f"data.{sorted(unknown)[0]}: unknown field")
    try:
        frames = [get_frame(f) for f in data["frames"]]
    except KeyError as e:
        raise ConfigError(f"data.frames: {e.args[0]}") from None
    scenario = scenario_from(cfg)
    records = generate_dataset(scenario, frames, int(data["count"]), int(data["seed"]), data["style"],
                               data["snr_db"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(records, out, scenario, data["style"])
    m = write_manifest(str(out) + ".manifest.json", "gen", _replayable(args), cfg, [], [out], started)
    print(f"wrote {len(records)} records to {out} (sha256 {m['outputs'][str(out)][:16]})")
    return EXIT_OK


def _frames_channels(records) -> int:
    chans = {2 * r.frame.n_rx for r in records}
    if len(chans) != 1:
        raise FormatError(f"records mix antenna arrays ({sorted(chans)} real channels)")
    return chans.pop()


def _grid(records, window: int, override=None) -> tuple[int, int]:
    if override:
        return int(override[0]), int(override[1])
    n_t = max(r.frame.n_t for r in records)
    n_f = max(r.frame.n_f for r in records)
    return -(-n_t // window) * window, -(-n_f // window) * window


def _set_threads(args):
    if args.threads:
        torch.set_num_threads(args.threads)
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)
        if not args.threads:
            torch.set_num_threads(1)


def cmd_train(args, cfg: dict) -> int:
    started = time.time()
    _set_threads(args)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.dtype:
        cfg["train"]["dtype"] = args.dtype
    plan = plan_from(cfg)
    run = cfg["run"]
    unknown = set(run) - set(DEFAULTS["run"])
    if unknown:
        raise ConfigError(f"run.{sorted(unknown)[0]}: unknown field")
    _, pool = read_dataset(args.data)
    val = read_dataset(args.val)[1] if args.val else []
    channels = _frames_channels(pool + val)
    model_section = dict(cfg["model"])
    model_section.setdefault("in_channels", channels)
    mcfg = build_dataclass(ModelConfig, "model", model_section)
    if mcfg.in_channels != channels:
        raise ConfigError(f"model.in_channels: {mcfg.in_channels} does not match the data ({channels})")
    grid = _grid(pool + val, mcfg.window_size, run.get("grid"))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    last, final, log_path = out / "last.ckpt", out / "model.ckpt", out / "metrics.jsonl"
    resolved = {**cfg, "model": mcfg.to_dict(), "run": {**run, "grid": list(grid)}}

    model = Backbone(mcfg, seed=plan.seed, dtype=plan.torch_dtype)
    optimizer = make_optimizer(model, plan.stages[0].initial_lr)
    progress = Progress()
    log_lines: list[str] = []
    if args.resume:
        if not last.exists():
            raise FormatError(f"--resume: no checkpoint at {last}")
        ck = load_checkpoint(last)
        if ck["extra"].get("config") != json.loads(json.dumps(resolved)):
            raise ConfigError("--resume: configuration differs from the checkpointed run")
        load_model_tensors(model, ck["params"])
        load_optimizer_tensors(model, optimizer, ck["optimizer"])
        progress = Progress(**ck["counters"])
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                rec = json.loads(line)
                keep = rec["global_step"] < progress.global_step if rec["kind"] == "step" \
                    else rec["global_step"] <= progress.global_step
                if keep:
                    log_lines.append(line)
    elif log_path.exists():
        log_path.unlink()

    prep = Preprocessor(grid, mcfg.embed_dim, use_pe=bool(run["use_pe"]), dtype=plan.torch_dtype)
    data_digest = file_digest(args.data)
    log_f = open(log_path, "w")
    for line in log_lines:
        log_f.write(line + "\n")
    records = [json.loads(x) for x in log_lines]

    def log(rec):
        rec = {k: v for k, v in rec.items() if k != "seconds"}  # keep the log deterministic
        records.append(rec)
        log_f.write(json.dumps(rec, sort_keys=True) + "\n")
        log_f.flush()
        if not args.quiet and (rec["kind"] == "val" or rec["global_step"] % 25 == 0):
            print(json.dumps(rec), flush=True)

    def save(path, prog):
        save_checkpoint(path, mcfg.to_dict(), model_tensors(model), optimizer_tensors(model, optimizer),
                        counters=vars(prog).copy(),
                        extra={"config": resolved, "grid": list(grid), "use_pe": bool(run["use_pe"]),
                               "dtype": plan.dtype, "data_sha256": data_digest})

    status = "ok"
    try:
        progress = run_curriculum(plan, pool, model, prep, val=val, optimizer=optimizer, progress=progress,
                                  log=log, checkpoint=lambda p: save(last, p),
                                  checkpoint_every=int(run["checkpoint_every"]), max_steps=args.max_steps)
    except FloatingPointError as e:
        status = "numeric-failure"
        print(f"error: {e}; parameters are unchanged since the last good step", file=sys.stderr)
    finally:
        log_f.close()
    # the failing step never reaches the optimizer, so the current weights are the last good ones
    save(last, progress)
    outputs = [last, log_path]
    if progress.done and status == "ok":
        save(final, progress)
        outputs.append(final)
    if not args.no_plots and records:
        from .plotting import plot_training_log
        plot_training_log(records, out / "loss.png")
    inputs = [args.data] + ([args.val] if args.val else [])
    write_manifest(out / "manifest.json", "train", _replayable(args), resolved, inputs, outputs, started, status,
                   {"progress": vars(progress)})
    if status != "ok":
        return EXIT_NUMERIC
    print(f"{'finished' if progress.done else 'stopped'} at step {progress.global_step}; checkpoint {last}")
    return EXIT_OK


def load_model(path):
    ck = load_checkpoint(path)
    mcfg = ModelConfig(**ck["model_config"])
    dtype = torch.float64 if ck["extra"].get("dtype", "float64") == "float64" else torch.float32
    model = Backbone(mcfg, dtype=dtype)
    load_model_tensors(model, ck["params"])
    model.eval()
    grid = tuple(ck["extra"]["grid"])
    prep = Preprocessor(grid, mcfg.embed_dim, use_pe=ck["extra"].get("use_pe", True), dtype=dtype)
    return model, prep, ck


def cmd_eval(args, cfg: dict) -> int:
    started = time.time()
    _set_threads(args)
    ev = cfg["eval"]
    if args.task:
        ev["tasks"] = list(args.task)
    specs = [parse_task(t) for t in ev["tasks"]]
    _, records = read_dataset(args.data)
    predictors = {}
    inputs = [args.data]
    if args.checkpoint:
        model, prep, ck = load_model(args.checkpoint)
        inputs.append(args.checkpoint)
        for r in records:
            if 2 * r.frame.n_rx != model.cfg.in_channels:
                raise FormatError(f"record frame has {2 * r.frame.n_rx} channels; model expects "
                                  f"{model.cfg.in_channels}")
            if r.frame.n_t > prep.grid[0] or r.frame.n_f > prep.grid[1]:
                raise FormatError(f"frame {r.frame.n_t}x{r.frame.n_f} exceeds the model grid {prep.grid}")
        predictors["model"] = make_model_predictor(model, prep, int(ev["batch_size"]))
    if args.oracle_pred:
        predictors["oracle"] = lambda recs, sp: [r.gt for r in recs]
    snr_grid = [] if args.no_snr_sweep else [float(s) for s in ev["snr_grid"]]
    report = evaluate(records, specs, predictors, snr_grid=snr_grid, seed=int(ev["seed"]))
    if args.kappa_sweep:
        report.sweeps["kappa"] = kappa_sweep(records, specs, predictors, [int(k) for k in ev["kappas"]],
                                             seed=int(ev["seed"]))
    report.meta = {"records": len(records), "tasks": [s.label() for s in specs]}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text_path, json_path = out / "report.txt", out / "report.json"
    text_path.write_text(report.render())
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    outputs = [text_path, json_path]
    if not args.no_plots:
        from .plotting import plot_kappa_sweep, plot_strata
        for name, xlabel in (("speed_kmh", "speed (km/h)"), ("rms_delay_spread", "RMS delay spread"),
                             ("snr_db", "SNR (dB)")):
            if report.strata.get(name):
                p = out / f"nmse_vs_{name}.png"
                plot_strata(report.strata[name], xlabel, p)
                outputs.append(p)
        if report.sweeps.get("kappa"):
            plot_kappa_sweep(report.sweeps["kappa"], out / "nmse_vs_kappa.png")
            outputs.append(out / "nmse_vs_kappa.png")
    write_manifest(out / "manifest.json", "eval", _replayable(args), cfg, inputs, outputs, started)
    print(report.render(), end="")
    return EXIT_OK


def cmd_verify(args, cfg: dict) -> int:
    from .verify import broken_frequency_sign, render, run_checks
    started = time.time()
    transform = broken_frequency_sign if args.inject_fft_sign_error else None
    checks = run_checks(quick=args.quick, transform=transform)
    print(render(checks), end="")
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        Path(args.out).write_text(json.dumps([c.to_dict() for c in checks], indent=1))
        write_manifest(str(args.out) + ".manifest.json", "verify", _replayable(args), {}, [], [args.out], started,
                       "ok" if not failed else "failed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_transform(args, cfg: dict) -> int:
    started = time.time()
    _, records = read_dataset(args.data)
    if not 0 <= args.index < len(records):
        raise UsageError(f"--index {args.index} out of range (file has {len(records)} records)")
    r = records[args.index]
    views = {"ground truth": stf_to_dda_array(r.gt), f"observation ({r.snr_db:g} dB)": stf_to_dda_array(r.obs)}
    if args.task:
        spec = parse_task(args.task)
        views[f"masked {spec.label()}"] = stf_to_dda_array(apply_mask(r.obs, build_mask(spec, r.frame), spec.axis))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    if out.suffix == ".npz":
        np.savez(out, **{k.split(" ")[0]: v for k, v in views.items()})
    else:
        from .plotting import plot_dda_views
        plot_dda_views(views, out)
    write_manifest(str(out) + ".manifest.json", "transform", _replayable(args), {}, [args.data], outputs, started)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_replay(args, cfg: dict) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{args.manifest}: unreadable manifest ({e})") from None
    stored = dict(manifest["args"])
    if args.out:
        stored["out"] = args.out
    ns = argparse.Namespace(**stored)
    handler = COMMANDS[manifest["command"]]
    return handler(ns, copy.deepcopy(manifest["config"]))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "transform": cmd_transform, "replay": cmd_replay}
SECTIONS = {"gen": ("scenario", "data"), "train": ("model", "train", "run"), "eval": ("eval",),
            "verify": (), "transform": (), "replay": ()}


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddafm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ddafm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML config file")
            sp.add_argument("--preset", help="packaged config preset (e.g. desk)")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override one config value (repeatable)")
        sp.add_argument("--threads", type=int, default=0, help="cap torch intra-op threads")
        sp.add_argument("--quiet", action="store_true")

    g = sub.add_parser("gen", help="generate a synthetic dataset file")
    common(g)
    g.add_argument("--out", required=True, help="dataset path")
    g.add_argument("--frame", action="append", choices=sorted(FRAMES), help="frame structure (repeatable)")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--style", choices=("train", "eval"))
    g.add_argument("--snr-db", type=float, dest="snr_db")

    t = sub.add_parser("train", help="run the two-stage curriculum")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val", help="validation dataset")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--dtype", choices=("float64", "float32"))
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--max-steps", type=int, dest="max_steps", help="stop after this many steps (resumable)")
    t.add_argument("--no-plots", action="store_true", dest="no_plots")

    e = sub.add_parser("eval", help="score a checkpoint and the classical baselines")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", help="model checkpoint; omit to score baselines only")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--task", action="append", help="TP:<x>, FP:<x> or CE:<D> (repeatable)")
    e.add_argument("--kappa-sweep", action="store_true", dest="kappa_sweep")
    e.add_argument("--no-snr-sweep", action="store_true", dest="no_snr_sweep")
    e.add_argument("--oracle-pred", action="store_true", dest="oracle_pred",
                   help="debug: add a predictor that returns the ground truth")
    e.add_argument("--deterministic", action="store_true")
    e.add_argument("--no-plots", action="store_true", dest="no_plots")

    v = sub.add_parser("verify", help="run the oracle identity suite")
    common(v, config=False)
    v.add_argument("--quick", action="store_true", help="fewer seeds and probes")
    v.add_argument("--out", help="write check results as JSON")
    v.add_argument("--inject-fft-sign-error", action="store_true", dest="inject_fft_sign_error",
                   help="debug: verify a transform with a flipped frequency exponent")

    x = sub.add_parser("transform", help="dump DDA-domain views of one record")
    common(x, config=False)
    x.add_argument("--data", required=True)
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--task", help="also show the masked observation, e.g. CE:4")
    x.add_argument("--out", required=True, help=".png figure or .npz arrays")

    r = sub.add_parser("replay", help="re-execute the command recorded in a manifest")
    common(r, config=False)
    r.add_argument("manifest")
    r.add_argument("--out", help="write outputs here instead of the recorded path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args, SECTIONS[args.command])
        if args.command != "replay" and args.threads:
            torch.set_num_threads(args.threads)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
