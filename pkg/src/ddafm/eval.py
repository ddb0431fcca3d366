"""Task-level NMSE, stratified reports, sensitivity frames, and classical baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import FrameStructure, PathSet, add_noise, normalize_energy, synth_stf
from .dataio import Record, rms_delay_spread_of
from .numerics import FORWARD, INVERSE, fft_axis
from .tasks import CE, FP, TP, FREQ, TIME, MaskSpec, apply_mask, build_mask

NMSE_FLOOR_DB = -100.0

DELAY_SPREAD_BINS = (
    ("ultra-low", 0.0, 10e-9),
    ("low", 10e-9, 30e-9),
    ("medium", 30e-9, 100e-9),
    ("high", 100e-9, 300e-9),
    ("ultra-high", 300e-9, 1000e-9),
)
SPEED_BINS_KMH = (0, 20, 40, 60, 80, 100, 120)
SNR_GRID_DB = (5.0, 10.0, 15.0, 20.0)
KAPPAS = (1, 2, 4, 8)
REGION_REDUCTION = "region-reduction"
RESOLUTION_COARSENING = "resolution-coarsening"


def to_db(x: float) -> float:
    if x <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(x), NMSE_FLOOR_DB)


# ----------------------------------------------------------------------------
# metric


def evaluation_region(spec: MaskSpec, fs: FrameStructure) -> np.ndarray:
    """(n_t, n_f) boolean map of cells the metric reads."""
    region = np.ones((fs.n_t, fs.n_f), dtype=bool)
    if spec.task == TP:
        region &= (build_mask(spec, fs) == 0)[:, None]
    elif spec.task == FP:
        region &= (build_mask(spec, fs) == 0)[None, :]
    return region


def nmse_ratio(gt: np.ndarray, pred: np.ndarray, spec: MaskSpec, fs: FrameStructure) -> float:
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    region = evaluation_region(spec, fs)
    if not region.any():
        raise ValueError(f"{spec.label()} leaves no cells to evaluate")
    ref = np.sum(np.abs(gt[region]) ** 2)
    if ref == 0:
        raise ValueError("ground truth has zero energy on the evaluation region")
    return float(np.sum(np.abs(gt[region] - pred[region]) ** 2) / ref)


def nmse_eval(gt: np.ndarray, pred: np.ndarray, spec: MaskSpec, fs: FrameStructure) -> float:
    """NMSE in dB: masked region only for TP/FP, whole tensor for CE; exact recovery -> -100 dB."""
    return to_db(nmse_ratio(gt, pred, spec, fs))


# ----------------------------------------------------------------------------
# stratification helpers


def rms_delay_spread(paths: PathSet) -> tuple[float, str]:
    tau = rms_delay_spread_of(paths)
    return tau, delay_spread_bin(tau)


def delay_spread_bin(tau: float) -> str:
    for name, lo, hi in DELAY_SPREAD_BINS:
        if lo <= tau < hi:
            return name
    return "beyond"


def speed_bin(speed_kmh: float) -> str:
    edges = SPEED_BINS_KMH
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo <= speed_kmh < hi or (hi == edges[-1] and speed_kmh <= hi + 1e-9 and speed_kmh >= lo):
            return f"{lo}-{hi}"
    return f">{edges[-1]}"


@dataclass(frozen=True)
class SensitivityCase:
    kappa: int
    case: str

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.case not in (REGION_REDUCTION, RESOLUTION_COARSENING):
            raise ValueError(f"unknown case {self.case!r}")


def sensitivity_frame(fs: FrameStructure, case: SensitivityCase) -> FrameStructure:
    """Case 1 scales spacings up and counts down by kappa; Case 2 only divides the counts."""
    k = case.kappa
    if fs.n_t % k or fs.n_f % k:
        raise ValueError(f"kappa={k} does not divide N_t={fs.n_t} and N_f={fs.n_f}")
    if case.case == REGION_REDUCTION:
        return FrameStructure(fs.n_t // k, fs.dt * k, fs.n_f // k, fs.df * k, fs.n_rx1, fs.n_rx2)
    return FrameStructure(fs.n_t // k, fs.dt, fs.n_f // k, fs.df, fs.n_rx1, fs.n_rx2)


def sensitivity_records(records: Sequence[Record], case: SensitivityCase, snr_db: float | None = None,
                        seed: int = 0) -> list[Record]:
    """Re-synthesize each record's stored paths on its derived frame, then normalize and add noise."""
    out = []
    for i, r in enumerate(records):
        fs = sensitivity_frame(r.frame, case)
        gt = normalize_energy(synth_stf(r.paths, fs))
        snr = r.snr_db if snr_db is None else snr_db
        rng = np.random.default_rng([seed, 11, i, case.kappa])
        meta = {**r.meta, "kappa": case.kappa, "case": case.case}
        out.append(Record(add_noise(gt, snr, rng), gt, fs, snr, r.seed, r.velocity, r.paths, meta))
    return out


def kappa_sweep(records: Sequence[Record], specs: Sequence[MaskSpec], predictors: dict[str, Predictor],
                kappas: Sequence[int] = KAPPAS, seed: int = 0) -> list[dict]:
    """NMSE rows over both sensitivity cases; kappas that do not divide a frame or make a task empty are skipped."""
    rows = []
    for case in (REGION_REDUCTION, RESOLUTION_COARSENING):
        for k in kappas:
            sc = SensitivityCase(k, case)
            try:
                recs = sensitivity_records(records, sc, seed=seed)
            except ValueError:
                continue
            for spec in specs:
                try:
                    scores = score_records(recs, spec, predictors)
                except ValueError:
                    continue
                rows.append({"case": case, "kappa": k, "task": spec.label(),
                             **{m: _mean_db(v) for m, v in scores.items()}})
    return rows


# ----------------------------------------------------------------------------
# classical baselines


def baseline_ce_dft(h_obs: np.ndarray, d: int) -> np.ndarray:
    """Comb-pilot estimate: pilot subband -> delay bins -> zero-pad to N_f -> back to frequency.

    Exact when every path delay lies on the delay grid below the reduced
    unambiguous range 1/(D*df); paths beyond it fold back onto low delays.
    """
    n_f = h_obs.shape[1]
    if n_f % d:
        raise ValueError(f"D={d} does not divide N_f={n_f}")
    if d == 1:
        return h_obs.copy()
    pilots = h_obs[:, ::d]
    n_p = n_f // d
    # frequency -> delay uses the positive exponent, matching the transform's frequency axis
    delay = fft_axis(pilots, 1, INVERSE) * np.sqrt(n_p)
    padded = np.zeros(h_obs.shape, dtype=np.complex128)
    padded[:, :n_p] = delay
    return fft_axis(padded, 1, FORWARD) * np.sqrt(n_f) / n_p


def _interp_matrix(observed: np.ndarray, n: int) -> np.ndarray:
    """(n, len(observed)) weights: linear between observed indices, hold-nearest outside."""
    eye = np.eye(observed.size)
    grid = np.arange(n)
    return np.stack([np.interp(grid, observed, eye[j]) for j in range(observed.size)], axis=1)


def baseline_interp_linear(h_obs: np.ndarray, mask: np.ndarray, axis: str) -> np.ndarray:
    ax = 0 if axis == TIME else 1
    observed = np.flatnonzero(mask)
    if observed.size < 2:
        raise ValueError("linear interpolation needs at least two observed entries")
    w = _interp_matrix(observed, mask.size)
    taken = np.take(h_obs, observed, axis=ax)
    out = np.tensordot(w, np.moveaxis(taken, ax, 0), axes=(1, 0))
    return np.moveaxis(out, 0, ax)


def baseline_predict(h_obs: np.ndarray, spec: MaskSpec, fs: FrameStructure) -> tuple[str, np.ndarray]:
    """Default classical column for a task: DFT interpolation for CE, linear/hold-last otherwise."""
    m = build_mask(spec, fs)
    masked = apply_mask(h_obs, m, spec.axis)
    if spec.task == CE:
        return "dft", baseline_ce_dft(masked, spec.pilot_spacing)
    return "interp", baseline_interp_linear(masked, m, spec.axis)


# ----------------------------------------------------------------------------
# reports


Predictor = Callable[[Sequence[Record], Sequence[MaskSpec]], list]


@dataclass
class EvalReport:
    tasks: dict = field(default_factory=dict)        # label -> {method: dB}
    counts: dict = field(default_factory=dict)       # label -> n
    strata: dict = field(default_factory=dict)       # name -> {label: {bin: {method: dB, "n": n}}}
    sweeps: dict = field(default_factory=dict)       # name -> rows
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "counts": self.counts, "strata": self.strata,
                "sweeps": self.sweeps, "meta": self.meta}

    def render(self) -> str:
        """Pipe-delimited text tables."""
        lines = []
        methods = sorted({m for v in self.tasks.values() for m in v})
        lines.append("# task NMSE (dB)")
        lines.append("|".join(["task", "n"] + methods))
        for label, vals in self.tasks.items():
            lines.append("|".join([label, str(self.counts[label])] +
                                  [_fmt(vals.get(m)) for m in methods]))
        for name, per_task in self.strata.items():
            lines.append("")
            lines.append(f"# {name}")
            lines.append("|".join(["task", "bin", "n"] + methods))
            for label, bins in per_task.items():
                for b, vals in bins.items():
                    lines.append("|".join([label, b, str(vals["n"])] + [_fmt(vals.get(m)) for m in methods]))
        for name, rows in self.sweeps.items():
            lines.append("")
            lines.append(f"# {name}")
            if rows:
                fixed = [k for k in rows[0] if isinstance(rows[0][k], (str, int)) and not isinstance(rows[0][k], float)]
                keys = fixed + sorted({k for r in rows for k in r} - set(fixed))
                lines.append("|".join(keys))
                for r in rows:
                    lines.append("|".join(_fmt(r.get(k)) if not isinstance(r.get(k), (str, int)) else str(r[k])
                                          for k in keys))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.2f}"


def _mean_db(values: Sequence[float]) -> float:
    return to_db(float(np.mean(values))) if len(values) else float("nan")


def score_records(records: Sequence[Record], spec: MaskSpec, predictors: dict[str, Predictor],
                  use_baseline: bool = True) -> dict[str, list[float]]:
    """Per-record linear NMSE for every method; observations are taken from ``record.obs``."""
    specs = [spec] * len(records)
    scores: dict[str, list[float]] = {}
    for name, fn in predictors.items():
        preds = fn(records, specs)
        scores[name] = [nmse_ratio(r.gt, p, spec, r.frame) for r, p in zip(records, preds)]
    if use_baseline:
        base = []
        for r in records:
            _, p = baseline_predict(r.obs, spec, r.frame)
            base.append(nmse_ratio(r.gt, p, spec, r.frame))
        scores["baseline"] = base
    return scores


def evaluate(records: Sequence[Record], specs: Sequence[MaskSpec], predictors: dict[str, Predictor],
             snr_grid: Sequence[float] = SNR_GRID_DB, seed: int = 0) -> EvalReport:
    """Per-task NMSE plus speed / delay-spread strata and a CE SNR sweep."""
    report = EvalReport()
    speed_labels = [speed_bin(r.speed_kmh) for r in records]
    ds_labels = [delay_spread_bin(rms_delay_spread_of(r.paths)) for r in records]
    for spec in specs:
        label = spec.label()
        scores = score_records(records, spec, predictors)
        report.tasks[label] = {m: _mean_db(v) for m, v in scores.items()}
        report.counts[label] = len(records)
        for name, labels in (("speed_kmh", speed_labels), ("rms_delay_spread", ds_labels)):
            bins: dict = {}
            for b in sorted(set(labels), key=_bin_order):
                sel = [i for i, lab in enumerate(labels) if lab == b]
                bins[b] = {"n": len(sel), **{m: _mean_db([v[i] for i in sel]) for m, v in scores.items()}}
            report.strata.setdefault(name, {})[label] = bins
        if spec.task == CE and snr_grid:
            for snr in snr_grid:
                noisy = renoise(records, snr, seed)
                s = score_records(noisy, spec, predictors)
                report.strata.setdefault("snr_db", {}).setdefault(label, {})[f"{snr:g}"] = {
                    "n": len(records), **{m: _mean_db(v) for m, v in s.items()}}
    return report


def _bin_order(label: str):
    names = [b[0] for b in DELAY_SPREAD_BINS]
    if label in names:
        return (0, names.index(label))
    try:
        return (1, float(label.split("-")[0].lstrip(">")))
    except ValueError:
        return (2, label)


def renoise(records: Sequence[Record], snr_db: float, seed: int) -> list[Record]:
    out = []
    for i, r in enumerate(records):
        rng = np.random.default_rng([seed, 7, i, int(round(snr_db * 100))])
        obs = add_noise(r.gt, snr_db, rng)
        out.append(Record(obs, r.gt, r.frame, snr_db, r.seed, r.velocity, r.paths, r.meta))
    return out
