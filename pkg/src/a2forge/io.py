"""Config documents, checkpoints, and CSV / JSON run artifacts.

Checkpoint layout (all integers little-endian)::

    b"A2CKPT\\x00\\x00"   8-byte magic
    uint32             format version
    uint64             header length in bytes
    header             UTF-8 JSON: array table (name, shape, offset) + metadata
    payload            float64 ("<f8") arrays back to back

Serialisation is canonical (sorted keys, fixed separators), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import tomli

from . import model as M
from . import policy as P
from .ops import OpKind
from .training import CSV_COLUMNS, EvalReport, TrainConfig, TrainResult

MAGIC = b"A2CKPT\x00\x00"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"checkpoint field {field_name!r}: {message}")


# atomic writes -------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# config --------------------------------------------------------------------

SECTIONS = {
    "data": ("dataset", "n_train", "n_val", "n_test", "blob_dim", "blob_classes", "blob_separation"),
    "model": ("hidden",),
    "budget": ("eps", "eta", "steps"),
    "train": ("epochs", "batch_size", "attacker", "loss_kind", "lr", "momentum", "weight_decay", "lr_schedule", "seed"),
    "attacker": (
        "alpha_lr", "alpha_weight_decay", "embed_dim", "alpha_init_scale",
        "tau", "tau_gumbel", "mc_samples", "momentum_decay",
    ),
    "eval": ("eval_steps", "eval_every"),
}
_FLOAT_KEYS = {"eps", "eta", "lr", "momentum", "weight_decay", "alpha_lr", "alpha_weight_decay",
               "alpha_init_scale", "tau", "tau_gumbel", "momentum_decay", "blob_separation"}


def parse_number(value):
    """Accept numbers and ``"a/b"`` fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return value
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse number {value!r}") from exc
    raise ConfigError(f"expected a number, got {value!r}")


def config_from_document(doc: dict) -> TrainConfig:
    flat = {}
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            flat[key] = float(parse_number(value)) if key in _FLOAT_KEYS else value
    try:
        return TrainConfig.from_dict(flat)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_document(doc)


def config_to_toml(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = d[key]
            if isinstance(v, bool):
                lines.append(f"{key} = {'true' if v else 'false'}")
            elif isinstance(v, str):
                lines.append(f'{key} = "{v}"')
            elif isinstance(v, list):
                lines.append(f"{key} = [{', '.join(str(x) for x in v)}]")
            else:
                lines.append(f"{key} = {v!r}")
        lines.append("")
    return "\n".join(lines)


# checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    theta: M.DefenseParams
    best: M.DefenseParams | None = None
    alpha: P.AttackerParams | None = None
    theta_state: M.OptimizerState | None = None
    alpha_state: M.OptimizerState | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    report: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _state_meta(state: M.OptimizerState | None):
    if state is None:
        return None
    return {k: getattr(state, k) for k in ("kind", "lr", "weight_decay", "momentum", "beta1", "beta2", "eps", "step")}


def _collect_arrays(ck: Checkpoint):
    arrays: list[tuple[str, np.ndarray]] = []
    for tag, params in (("theta", ck.theta), ("best", ck.best)):
        if params is not None:
            for i, (w, b) in enumerate(zip(params.weights, params.biases)):
                arrays += [(f"{tag}.w{i}", w), (f"{tag}.b{i}", b)]
    if ck.alpha is not None:
        for k, (q, o, s) in enumerate(zip(ck.alpha.query, ck.alpha.op_keys, ck.alpha.step_keys)):
            arrays += [(f"alpha.query{k}", q), (f"alpha.op_keys{k}", o), (f"alpha.step_keys{k}", s)]
    for tag, state in (("theta_state", ck.theta_state), ("alpha_state", ck.alpha_state)):
        if state is not None:
            for i, a in enumerate(state.first):
                arrays.append((f"{tag}.first{i}", a))
            for i, a in enumerate(state.second):
                arrays.append((f"{tag}.second{i}", a))
    return arrays


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, a in _collect_arrays(ck):
        a = np.ascontiguousarray(a, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "version": ck.version,
        "arrays": table,
        "meta": {
            "config": ck.config,
            "seed": ck.seed,
            "epoch": ck.epoch,
            "report": ck.report,
            "theta_state": _state_meta(ck.theta_state),
            "alpha_state": _state_meta(ck.alpha_state),
            "op_encoding": {k.name: int(k) for k in OpKind},
        },
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode("utf-8")
    return MAGIC + struct.pack("<IQ", ck.version, len(hbytes)) + hbytes + b"".join(chunks)


def write_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ck))


def _parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("magic", "not an a2forge checkpoint")
    if len(raw) < 20:
        raise CheckpointError("header", "truncated")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError("version", f"unsupported version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("header", f"corrupt JSON ({exc})") from exc
    if header.get("version") != version:
        raise CheckpointError("version", "header and container versions disagree")
    payload = raw[20 + hlen :]
    arrays, end = {}, 0
    for entry in header.get("arrays", []):
        name = entry.get("name", "?")
        shape = entry.get("shape")
        offset = entry.get("offset")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise CheckpointError(f"{name}.shape", f"invalid shape {shape!r}")
        if offset != end:
            raise CheckpointError(f"{name}.offset", f"expected {end}, found {offset!r}")
        nbytes = 8 * math.prod(shape)
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{name}.shape", "shape overruns the payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        end = offset + nbytes
    if end != len(payload):
        raise CheckpointError("payload", f"{len(payload) - end} unaccounted bytes")
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise CheckpointError(name, "non-finite entries")
    meta = header.get("meta", {})

    def layers(tag):
        ws = []
        i = 0
        while f"{tag}.w{i}" in arrays:
            if f"{tag}.b{i}" not in arrays:
                raise CheckpointError(f"{tag}.b{i}", "missing bias")
            ws += [arrays[f"{tag}.w{i}"], arrays[f"{tag}.b{i}"]]
            i += 1
        if not ws:
            return None
        try:
            return M.DefenseParams.from_arrays(ws)
        except ValueError as exc:
            raise CheckpointError(f"{tag}", str(exc)) from exc

    theta = layers("theta")
    if theta is None:
        raise CheckpointError("theta", "missing defense parameters")
    best = layers("best")
    if best is not None and best.sizes != theta.sizes:
        raise CheckpointError("best", "layer sizes differ from theta")
    alpha = None
    if "alpha.query0" in arrays:
        parts = []
        k = 0
        while f"alpha.query{k}" in arrays:
            for nm in ("query", "op_keys", "step_keys"):
                if f"alpha.{nm}{k}" not in arrays:
                    raise CheckpointError(f"alpha.{nm}{k}", "missing")
                parts.append(arrays[f"alpha.{nm}{k}"])
            k += 1
        try:
            alpha = P.AttackerParams.from_arrays(parts)
        except ValueError as exc:
            raise CheckpointError("alpha", str(exc)) from exc
        if alpha.input_dim != theta.sizes[0]:
            raise CheckpointError("alpha", f"input dim {alpha.input_dim} != defense input {theta.sizes[0]}")

    def state(tag, params_shapes):
        m = meta.get(tag)
        if m is None:
            return None
        st = M.OptimizerState(**m)
        st.first = [arrays[f"{tag}.first{i}"] for i in range(len(params_shapes)) if f"{tag}.first{i}" in arrays]
        st.second = [arrays[f"{tag}.second{i}"] for i in range(len(params_shapes)) if f"{tag}.second{i}" in arrays]
        for buf in (st.first, st.second):
            if buf and [b.shape for b in buf] != params_shapes:
                raise CheckpointError(tag, "optimizer buffers do not mirror parameter shapes")
        return st

    theta_state = state("theta_state", [a.shape for a in theta.arrays()])
    alpha_state = state("alpha_state", [a.shape for a in alpha.arrays()] if alpha else [])
    return Checkpoint(theta, best, alpha, theta_state, alpha_state, meta.get("config", {}),
                      meta.get("seed", 0), meta.get("epoch", 0), meta.get("report", {}), version)


def read_checkpoint(path) -> Checkpoint:
    return _parse_checkpoint(Path(path).read_bytes())


def checkpoint_from_result(result: TrainResult) -> Checkpoint:
    return Checkpoint(
        theta=result.last,
        best=result.best,
        alpha=result.alpha,
        theta_state=result.theta_state,
        alpha_state=result.alpha_state,
        config=result.config.to_dict(),
        seed=result.config.seed,
        epoch=result.epoch,
        report=result.report.to_dict(),
    )


def result_from_checkpoint(ck: Checkpoint) -> TrainResult:
    cfg = TrainConfig.from_dict(ck.config)
    rep = EvalReport(**ck.report) if ck.report else EvalReport()
    return TrainResult(ck.best or ck.theta, ck.theta, ck.alpha, rep, cfg, ck.theta_state, ck.alpha_state, ck.epoch)


# tabular artifacts -----------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_metrics_csv(path, curves) -> None:
    atomic_write_text(path, csv_text(curves, CSV_COLUMNS))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def histogram_document(histograms, seed: int, config: dict) -> dict:
    return {
        "op_encoding": {k.name: int(k) for k in OpKind},
        "seed": seed,
        "config": config,
        "epochs": [{"epoch": i + 1, "cells": h} for i, h in enumerate(histograms)],
    }
