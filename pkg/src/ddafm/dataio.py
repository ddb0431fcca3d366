"""Dataset files, checkpoints, and YAML run configs.

Both binary formats share one layout::

    <MAGIC> v<version> <header_bytes>\\n
    <header_bytes of UTF-8 JSON>
    <payload>

Datasets store little-endian float32 interleaved (re, im) tensors, C-order
(time, freq, rx1, rx2), observation then ground truth for every record. The
header records the SHA-256 of the payload. Checkpoints store little-endian
float64 tensors in the order listed by the header.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .channel import (FrameStructure, PathSet, ScenarioConfig, Velocity, add_noise,
                      normalize_energy, sample_paths, synth_stf)

DATASET_MAGIC = b"DDAFM-DATASET"
CHECKPOINT_MAGIC = b"DDAFM-CHECKPOINT"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
TRAIN_SNR_RANGE = (5.0, 20.0)
EVAL_SNR_DB = 10.0


class FormatError(Exception):
    """Malformed, truncated, or corrupted file."""


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class Record:
    obs: np.ndarray
    gt: np.ndarray
    frame: FrameStructure
    snr_db: float
    seed: list
    velocity: Velocity
    paths: PathSet
    meta: dict = field(default_factory=dict)

    @property
    def speed_kmh(self) -> float:
        return self.velocity.speed * 3.6


def rms_delay_spread_of(paths: PathSet) -> float:
    p = np.abs(paths.beta) ** 2
    mean = np.sum(p * paths.tau) / np.sum(p)
    second = np.sum(p * paths.tau ** 2) / np.sum(p)
    return float(np.sqrt(max(second - mean ** 2, 0.0)))


# ----------------------------------------------------------------------------
# generation


def make_record(scenario: ScenarioConfig, frame: FrameStructure, seed: Sequence[int],
                snr_db: float | None = None) -> Record:
    """sample paths -> synthesize -> unit-energy normalize -> add noise.

    ``snr_db=None`` draws the SNR uniformly from the training range.
    """
    rng = np.random.default_rng(list(seed))
    paths, vel = sample_paths(scenario, rng)
    gt = normalize_energy(synth_stf(paths, frame))
    if snr_db is None:
        snr_db = float(rng.uniform(*TRAIN_SNR_RANGE))
    obs = add_noise(gt, snr_db, rng)
    return Record(obs, gt, frame, float(snr_db), list(seed), vel, paths)


def generate_dataset(scenario: ScenarioConfig, frames: Sequence[FrameStructure], count: int,
                     seed: int, style: str = "train", snr_db: float | None = None) -> list[Record]:
    """``count`` records cycling through ``frames``; record i uses the stream seeded by (seed, i).

    ``style='eval'`` fixes the SNR at 10 dB unless ``snr_db`` is given;
    ``style='train'`` draws it per record from [5, 20] dB.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if style not in ("train", "eval"):
        raise ValueError(f"unknown dataset style {style!r}")
    if style == "eval" and snr_db is None:
        snr_db = EVAL_SNR_DB
    return [make_record(scenario, frames[i % len(frames)], (seed, i), snr_db) for i in range(count)]


# ----------------------------------------------------------------------------
# shared container


def _write_container(path: str | os.PathLike, magic: bytes, version: int, header: dict,
                     payload: bytes | Iterable[bytes]):
    blob = json.dumps(header, sort_keys=True, indent=1).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic + b" v%d %d\n" % (version, len(blob)))
        f.write(blob)
        for chunk in [payload] if isinstance(payload, bytes) else payload:
            f.write(chunk)
    os.replace(tmp, path)


def _read_container(path: str | os.PathLike, magic: bytes, version: int) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    try:
        tag, ver, size = raw[:nl].split(b" ")
        size = int(size)
    except ValueError:
        raise FormatError(f"{path}: not a {magic.decode()} file") from None
    if tag != magic:
        raise FormatError(f"{path}: bad magic {tag!r}")
    if ver != b"v%d" % version:
        raise FormatError(f"{path}: version {ver.decode()} unsupported (expected v{version})")
    start = nl + 1
    if len(raw) < start + size:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + size])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    return header, raw[start + size:]


# ----------------------------------------------------------------------------
# datasets


def _interleave(h: np.ndarray) -> bytes:
    out = np.empty(h.shape + (2,), dtype="<f4")
    out[..., 0] = h.real
    out[..., 1] = h.imag
    return out.tobytes()


def record_header(r: Record) -> dict:
    return {
        "frame": r.frame.to_dict(),
        "seed": list(r.seed),
        "snr_db": r.snr_db,
        "velocity": {"speed": r.velocity.speed, "heading": r.velocity.heading},
        "paths": r.paths.to_rows(),
        "rms_delay_spread": rms_delay_spread_of(r.paths),
        **({"meta": r.meta} if r.meta else {}),
    }


def write_dataset(records: Iterable[Record], path: str | os.PathLike,
                  scenario: ScenarioConfig | None = None, style: str = "train") -> str:
    """Write ``records``; returns the payload SHA-256."""
    records = list(records)
    # two passes so the payload is never held in memory as a whole
    h, size = hashlib.sha256(), 0
    for r in records:
        for chunk in (_interleave(r.obs), _interleave(r.gt)):
            h.update(chunk)
            size += len(chunk)
    digest = h.hexdigest()
    header = {
        "format": "ddafm-dataset",
        "format_version": DATASET_VERSION,
        "record_count": len(records),
        "style": style,
        "scenario": None if scenario is None else scenario.to_dict(),
        "scenario_digest": None if scenario is None else scenario.digest(),
        "dtype": "<f4 interleaved complex",
        "layout": "C-order (time, freq, rx1, rx2); obs then gt per record",
        "payload_bytes": size,
        "payload_sha256": digest,
        "records": [record_header(r) for r in records],
    }
    chunks = (c for r in records for c in (_interleave(r.obs), _interleave(r.gt)))
    _write_container(path, DATASET_MAGIC, DATASET_VERSION, header, chunks)
    return digest


def read_dataset(path: str | os.PathLike) -> tuple[dict, list[Record]]:
    header, payload = _read_container(path, DATASET_MAGIC, DATASET_VERSION)
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise FormatError(f"{path}: payload digest mismatch")
    records = []
    offset = 0
    for rh in header["records"]:
        fs = FrameStructure(**rh["frame"])
        n = int(np.prod(fs.shape))
        pair = []
        for _ in range(2):
            # stored precision is float32, so complex64 holds the values exactly
            a = np.frombuffer(payload, dtype="<c8", count=n, offset=offset).reshape(fs.shape)
            pair.append(a.astype(np.complex64))
            offset += 8 * n
        v = rh["velocity"]
        records.append(Record(pair[0], pair[1], fs, rh["snr_db"], rh["seed"],
                              Velocity(v["speed"], v["heading"]), PathSet.from_rows(rh["paths"]),
                              rh.get("meta", {})))
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return header, records


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | os.PathLike, model_config: dict, params: dict[str, np.ndarray],
                    optimizer: dict[str, np.ndarray] | None = None, counters: dict | None = None,
                    extra: dict | None = None):
    """Parameters (then optimizer tensors) as float64 LE, names in sorted order."""
    entries = []
    chunks = []
    for group, tensors in (("param", params), ("optim", optimizer or {})):
        for name in sorted(tensors):
            a = np.asarray(tensors[name], dtype="<f8", order="C")
            entries.append({"group": group, "name": name, "shape": list(a.shape)})
            chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = {
        "format": "ddafm-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "model_config": model_config,
        "tensors": entries,
        "counters": counters or {},
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    _write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload)


def load_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    header, payload = _read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise FormatError(f"{path}: payload digest mismatch")
    out = {"param": {}, "optim": {}}
    offset = 0
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(e["shape"]).copy()
        out[e["group"]][e["name"]] = a
        offset += 8 * n
    return {"model_config": header["model_config"], "params": out["param"], "optimizer": out["optim"],
            "counters": header["counters"], "extra": header["extra"]}


# ----------------------------------------------------------------------------
# configs


def build_dataclass(cls, section: str, data: dict | None):
    """Instantiate ``cls`` from a mapping, reporting bad fields as ``section.field``."""
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field")
    for key, value in list(data.items()):
        if isinstance(value, list):
            data[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    for key, value in data.items():
        default = names[key].default
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, (int, float)):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None
    return obj


def load_yaml(path: str | os.PathLike) -> dict:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def dump_yaml(data: dict, path: str | os.PathLike):
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)
