"""CCKP binary checkpoints: named little-endian arrays with a CRC32 trailer.

Layout::

    b"CCKP" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | dtype u8 | rank u8 | dims u64 x rank | raw data
    CRC32 (u32) of every preceding byte

dtype codes: 0 = float32, 1 = float64, 2 = uint8 (used for the JSON metadata
entry ``meta.config``).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .exceptions import ChecksumError, FormatError, NameMismatchError

MAGIC = b"CCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
META_KEY = "meta.config"


@dataclass
class Checkpoint:
    """Named arrays plus a JSON-serialisable metadata dict."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    entries = dict(ckpt.arrays)
    entries[META_KEY] = np.frombuffer(
        json.dumps(ckpt.meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    parts = [struct.pack("<4sHI", MAGIC, VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 14:
        raise FormatError(f"{source}: truncated checkpoint")
    magic, version, count = struct.unpack_from("<4sHI", raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: CRC mismatch")
    pos = 10
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", payload, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(payload):
                raise FormatError(f"{source}: entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: corrupt entry table ({exc})") from None
    if pos != len(payload):
        raise FormatError(f"{source}: {len(payload) - pos} trailing bytes")
    meta_raw = arrays.pop(META_KEY, None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    return Checkpoint(arrays, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Atomically write ``ckpt`` (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode(path.read_bytes(), str(path))


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{name}": t.detach().cpu().numpy().copy()
            for name, t in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix``-named arrays into ``module``; names must match exactly."""
    state = module.state_dict()
    found = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(found))
    unexpected = sorted(set(found) - set(state))
    if missing or unexpected:
        raise NameMismatchError(
            f"checkpoint does not match model under {prefix!r}: "
            f"missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, target in state.items():
        src = found[name]
        if tuple(src.shape) != tuple(target.shape):
            raise NameMismatchError(f"{prefix}{name}: shape {src.shape} != {tuple(target.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(state[k].dtype) for k, v in found.items()})


def optimizer_arrays(opt: torch.optim.Optimizer, names: Mapping[int, str], prefix: str) -> dict[str, np.ndarray]:
    """Adam-style optimizer state keyed by parameter name."""
    out = {}
    params = [p for group in opt.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        for key, value in opt.state.get(p, {}).items():
            arr = value.detach().cpu().numpy().copy() if torch.is_tensor(value) else np.float64(value)
            if key == "step":
                arr = np.asarray(arr, dtype=np.float64)
            out[f"{prefix}{names[i]}.{key}"] = np.asarray(arr)
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, names: Mapping[int, str],
                          arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    params = [p for group in opt.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        state = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            name = f"{prefix}{names[i]}.{key}"
            if name in arrays:
                value = torch.from_numpy(np.array(arrays[name]))
                state[key] = value.to(torch.float32) if key == "step" else value.to(p.dtype)
        if state:
            opt.state[p] = state
