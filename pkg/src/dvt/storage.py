"""Checkpoint and exit-trace files.

Both formats are a single JSON manifest line followed by a little-endian
float64 payload. Checkpoint layout::

    DVT-CHECKPOINT\\n
    {manifest json, sorted keys}\\n
    payload: every tensor's data, C order, at the manifest's byte offsets

Trace layout::

    DVT-TRACE\\n
    {"classes": C, "exits": K, "exit_mean_flops": [...], "samples": n, "version": 1}\\n
    n records of (label as float64, K*C probs, K cumulative flops)

Writes are atomic (temp file + rename) and serialised through an advisory
``<path>.lock`` file.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np
from filelock import FileLock

from .budget import ExitTrace
from .cascade import CascadeConfig, CascadeParams, init_cascade, named_parameters
from .embed import TokenGridSpec
from .encoder import EncoderConfig

CHECKPOINT_MAGIC = b"DVT-CHECKPOINT\n"
TRACE_MAGIC = b"DVT-TRACE\n"
CHECKPOINT_VERSION = 1
TRACE_VERSION = 1
_LE = np.dtype("<f8")


class FormatError(ValueError):
    """File is not a valid checkpoint/trace, or its contents are inconsistent."""


def config_to_dict(config: CascadeConfig) -> dict:
    d = dataclasses.asdict(config)
    d["grids"] = [dataclasses.asdict(g) for g in config.grids]
    return d


def config_from_dict(d: dict) -> CascadeConfig:
    d = dict(d)
    try:
        grids = tuple(TokenGridSpec(**g) for g in d.pop("grids"))
        encoder = EncoderConfig(**d.pop("encoder"))
        return CascadeConfig(grids=grids, encoder=encoder, **d)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad cascade config in manifest: {exc}") from exc


def _atomic_write(path: Path, chunks) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                for c in chunks:
                    f.write(c)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _split_header(raw: bytes, magic: bytes, what: str) -> tuple[dict, bytes]:
    if not raw.startswith(magic):
        raise FormatError(f"{what}: missing {magic.strip().decode()} header")
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise FormatError(f"{what}: manifest line is not terminated")
    try:
        manifest = json.loads(raw[len(magic) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"{what}: manifest must be a JSON object")
    return manifest, raw[end + 1 :]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: CascadeParams, config: CascadeConfig, path, seed: int = 0) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in named_parameters(params):
        blob = np.ascontiguousarray(t.data, dtype=_LE).tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob), "crc32": zlib.crc32(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "config": config_to_dict(config),
        "tensors": entries,
        "payload_bytes": offset,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    _atomic_write(Path(path), [CHECKPOINT_MAGIC, header, *blobs])


def load_checkpoint(path) -> tuple[CascadeParams, CascadeConfig, int]:
    """Return ``(params, config, seed)``; every tensor is checksum-verified."""
    path = Path(path)
    manifest, payload = _split_header(path.read_bytes(), CHECKPOINT_MAGIC, str(path))
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    if manifest.get("payload_bytes") != len(payload):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    config = config_from_dict(manifest["config"])
    seed = int(manifest.get("seed", 0))
    params = init_cascade(config, seed)
    slots = dict(named_parameters(params))
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in slots:
            raise FormatError(f"{path}: tensor {name!r} does not belong to this config")
        if name in seen:
            raise FormatError(f"{path}: tensor {name!r} appears twice")
        seen.add(name)
        blob = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(blob) != e["nbytes"]:
            raise FormatError(f"{path}: tensor {name!r} runs past the payload")
        if zlib.crc32(blob) != e["crc32"]:
            raise FormatError(f"{path}: checksum mismatch in tensor {name!r}")
        shape = tuple(e["shape"])
        if shape != slots[name].shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {shape}, config implies {slots[name].shape}")
        slots[name].data = np.frombuffer(blob, dtype=_LE).astype(np.float64).reshape(shape)
    missing = set(slots) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return params, config, seed


# --------------------------------------------------------------------- traces


def export_trace(trace: ExitTrace, path) -> None:
    n, k, c = trace.probs.shape
    manifest = {
        "version": TRACE_VERSION,
        "samples": n,
        "exits": k,
        "classes": c,
        "exit_mean_flops": [float(trace.flops[:, i].mean()) for i in range(k)],
    }
    records = np.concatenate(
        [trace.labels[:, None].astype(np.float64), trace.probs.reshape(n, k * c), trace.flops], axis=1
    )
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    _atomic_write(Path(path), [TRACE_MAGIC, header, records.astype(_LE).tobytes()])


def import_trace(path) -> ExitTrace:
    path = Path(path)
    manifest, payload = _split_header(path.read_bytes(), TRACE_MAGIC, str(path))
    if manifest.get("version") != TRACE_VERSION:
        raise FormatError(f"{path}: trace version {manifest.get('version')}, expected {TRACE_VERSION}")
    try:
        n, k, c = int(manifest["samples"]), int(manifest["exits"]), int(manifest["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: manifest lacks samples/exits/classes") from exc
    if n <= 0 or k <= 0 or c <= 0:
        raise FormatError(f"{path}: empty trace ({n} samples, {k} exits, {c} classes)")
    width = 1 + k * c + k
    expected = n * width * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    rec = np.frombuffer(payload, dtype=_LE).astype(np.float64).reshape(n, width)
    labels = rec[:, 0]
    if not np.array_equal(labels, np.round(labels)):
        raise FormatError(f"{path}: non-integer label field")
    try:
        return ExitTrace(labels.astype(np.int64), rec[:, 1 : 1 + k * c].reshape(n, k, c), rec[:, 1 + k * c :])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
