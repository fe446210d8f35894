"""SEPM1 checkpoint files.

Layout: a UTF-8 text header followed by one little-endian binary blob::

    SEPM1
    [config]
    base_dim = 64
    ...
    [train]
    step = 120                  (values are JSON)
    ...
    [tensors]
    stem.w<TAB>float32<TAB>64,1,16<TAB>0<TAB>4096
    opt.m.stem.w<TAB>...
    [end] sha256=<hex digest of the blob>
    <blob>

Model tensors use their registry names; AdamW moments are stored under
``opt.m.<name>`` and ``opt.v.<name>``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Tensor
from .separator import ModelWeights, SeparatorConfig, param_shapes

MAGIC = "SEPM1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


@dataclass
class Checkpoint:
    weights: ModelWeights
    train: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> SeparatorConfig:
        return self.weights.config


def _fmt_value(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def save_checkpoint(path, weights: ModelWeights, train: dict | None = None, optimizer: dict[str, np.ndarray] | None = None) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    arrays = [(k, t.data) for k, t in weights.items()] + sorted((optimizer or {}).items())
    lines = [MAGIC, "[config]"]
    lines += [f"{k} = {_fmt_value(v)}" for k, v in weights.config.to_dict().items()]
    lines.append("[train]")
    lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted((train or {}).items())]
    lines.append("[tensors]")
    chunks, offset = [], 0
    for name, arr in arrays:
        if "\t" in name or "\n" in name:
            raise DataError(f"tensor name {name!r} contains a tab or newline")
        dt = np.dtype(arr.dtype).name
        if dt not in _DTYPES:
            raise DataError(f"cannot store dtype {dt} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{dt}\t{shape}\t{offset}\t{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    lines.append(f"[end] sha256={hashlib.sha256(blob).hexdigest()}")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        f.write(blob)
    os.replace(tmp, path)


def _parse_kv(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise DataError(f"{where}: expected 'key = value', got {line!r}")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; any corruption raises :class:`DataError`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith((MAGIC + "\n").encode()):
        raise DataError(f"{path}: not a {MAGIC} checkpoint")
    end = raw.find(b"\n[end] sha256=")
    if end < 0:
        raise DataError(f"{path}: header terminator missing")
    nl = raw.find(b"\n", end + 1)
    if nl < 0:
        raise DataError(f"{path}: truncated header")
    try:
        header = raw[:end].decode().split("\n")[1:]
        digest = raw[end + 1 : nl].decode().split("=", 1)[1]
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: header is not valid text") from exc
    blob = raw[nl + 1 :]
    if hashlib.sha256(blob).hexdigest() != digest:
        raise DataError(f"{path}: checksum mismatch (file is corrupt or truncated)")

    section, cfg, train, entries = None, {}, {}, []
    for i, line in enumerate(header, 2):
        where = f"{path}:{i}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "config":
            k, v = _parse_kv(line, where)
            cfg[k] = v
        elif section == "train":
            k, v = _parse_kv(line, where)
            try:
                train[k] = json.loads(v)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: bad value for {k}: {exc}") from exc
        elif section == "tensors":
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{where}: malformed tensor entry")
            entries.append(parts)
        else:
            raise DataError(f"{where}: content outside a section")

    try:
        config = SeparatorConfig.from_dict(cfg)
    except ConfigError as exc:
        raise DataError(f"{path}: bad config section: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for name, dt, shape_s, off_s, n_s in entries:
        if dt not in _DTYPES:
            raise DataError(f"{path}: tensor {name} has unsupported dtype {dt}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        off, n = int(off_s), int(n_s)
        if off + n > len(blob) or n != int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dt]).itemsize:
            raise DataError(f"{path}: tensor {name} extends past the data blob or has the wrong size")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPES[dt], count=n // np.dtype(_DTYPES[dt]).itemsize, offset=off).reshape(shape).astype(dt)

    expected = param_shapes(config)
    tensors = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise DataError(f"{path}: missing tensor {name}")
        if arrays[name].shape != shape:
            raise DataError(f"{path}: tensor {name} has shape {arrays[name].shape}, config expects {shape}")
        tensors[name] = Tensor(arrays.pop(name), requires_grad=True)
    optimizer = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    stray = set(arrays) - set(optimizer)
    if stray:
        raise DataError(f"{path}: unexpected tensors {sorted(stray)}")
    return Checkpoint(ModelWeights(config, tensors), train, optimizer)
