"""Binary checkpoint container for SDCNet parameters and training state.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SDCNETCK"
    8       4     u32 format version (currently 1)
    12      32    sha256 of the network spec JSON
    44      4     u32 spec JSON length S
    48      S     network spec, canonical JSON (sorted keys, UTF-8)
    ...     4     u32 metadata JSON length M
    ...     M     metadata JSON (training config, counters, loss history; may be "{}")
    ...     4     u32 record count R
    R records, each:
            2     u16 name length, then the UTF-8 name
                  ("<layer>.weight", "<layer>.bias", "momentum/<layer>.weight", ...)
            1     dtype code: b"f" float32 or b"d" float64
            1     u8 ndim, then ndim x u32 shape
            ...   raw little-endian values in C order

Weights round-trip bit-exactly.  Files are written to a temporary name and
renamed into place so a crash never leaves a truncated checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import NetworkSpec, ParameterStore, layer_sequence
from .tensor import ConvParams

MAGIC = b"SDCNETCK"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): b"f", np.dtype("<f8"): b"d"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Malformed or unreadable checkpoint file."""


class SpecMismatchError(CheckpointError):
    """Checkpoint was written for a different network spec."""


@dataclass
class Checkpoint:
    params: ParameterStore
    metadata: dict = field(default_factory=dict)
    momentum: ParameterStore | None = None


def _records(store: ParameterStore, prefix: str = ""):
    for name, arr in store.arrays():
        yield prefix + name, arr


def to_bytes(params: ParameterStore, metadata: dict | None = None,
             momentum: ParameterStore | None = None) -> bytes:
    spec_json = params.spec.to_json().encode("utf-8")
    meta_json = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    records = list(_records(params))
    if momentum is not None:
        records += list(_records(momentum, "momentum/"))

    parts = [MAGIC, struct.pack("<I", VERSION), params.spec.digest(),
             struct.pack("<I", len(spec_json)), spec_json,
             struct.pack("<I", len(meta_json)), meta_json,
             struct.pack("<I", len(records))]
    for name, arr in records:
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"cannot store {name} with dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, _DTYPE_CODES[dtype],
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=dtype).tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, expected_spec: NetworkSpec | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("not an SDCNet checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    spec_json = r.take(n).decode("utf-8")
    try:
        spec = NetworkSpec.from_dict(json.loads(spec_json))
    except (TypeError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad network spec in checkpoint: {exc}") from exc
    if spec.digest() != digest:
        raise CheckpointError("spec digest does not match stored spec")
    if expected_spec is not None and expected_spec.digest() != digest:
        raise SpecMismatchError("checkpoint was saved for a different network spec")
    (n,) = r.unpack("<I")
    metadata = json.loads(r.take(n).decode("utf-8"))

    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code = r.take(1)
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code!r} for {name}")
        dtype = _CODE_DTYPES[code]
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last record")

    params = _assemble(spec, arrays, "", metadata.get("seed"))
    momentum = None
    if any(k.startswith("momentum/") for k in arrays):
        momentum = _assemble(spec, arrays, "momentum/", None)
    return Checkpoint(params, metadata, momentum)


def _assemble(spec: NetworkSpec, arrays: dict, prefix: str, seed) -> ParameterStore:
    layers: OrderedDict[str, ConvParams] = OrderedDict()
    for layer in layer_sequence(spec):
        try:
            w = arrays[f"{prefix}{layer.name}.weight"]
            b = arrays[f"{prefix}{layer.name}.bias"]
        except KeyError as exc:
            raise CheckpointError(f"missing record {exc.args[0]}") from None
        expected = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
        if w.shape != expected or b.shape != (layer.c_out,):
            raise CheckpointError(f"record shapes for {layer.name} do not match the network spec")
        layers[layer.name] = ConvParams.same(w, b)
    return ParameterStore(spec, layers, seed)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ParameterStore, metadata: dict | None = None,
                    momentum: ParameterStore | None = None) -> None:
    metadata = dict(metadata or {})
    metadata.setdefault("seed", params.seed)
    atomic_write(path, to_bytes(params, metadata, momentum))


def load_checkpoint(path, expected_spec: NetworkSpec | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_spec)
