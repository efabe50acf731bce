"""Binary checkpoints.

Layout (little-endian)::

    b"DSFC"  u32 version
    section*2:  u32 count, then per entry:
        u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 data[prod(dims)]

The first section holds the model parameters, the second the optimizer and
batch-norm state (``adam.step``, ``adam.m.<param>``, ``adam.v.<param>``,
``bn.<layer>.mean``, ``bn.<layer>.var``, ``bn.<layer>.steps``). Values are
stored as raw float64 so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .autodiff import AdamState

MAGIC = b"DSFC"
VERSION = 1


class CheckpointError(Exception):
    pass


def _write_section(f, entries: list[tuple[str, np.ndarray]]) -> None:
    f.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")  # keeps rank 0 for scalars
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_section(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            name = _read_exact(f, nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("entry name is not UTF-8") from None
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        if rank > 16:
            raise CheckpointError(f"implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
        size = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        data = np.frombuffer(_read_exact(f, 8 * size), dtype="<f8").reshape(dims)
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = data.astype(np.float64)
    return out


def state_entries(model, adam: AdamState | None):
    params = [(name, p.data) for name, p in model.params.items()]
    extra = []
    if adam is not None:
        extra.append(("adam.step", np.array(float(adam.step))))
        for name in model.params:
            if name in adam.m:
                extra.append((f"adam.m.{name}", adam.m[name]))
                extra.append((f"adam.v.{name}", adam.v[name]))
    for name, st in model.bn.items():
        extra += [(f"bn.{name}.mean", st.mean), (f"bn.{name}.var", st.var),
                  (f"bn.{name}.steps", np.array(float(st.steps)))]
    return params, extra


def dumps(model, adam: AdamState | None = None) -> bytes:
    params, extra = state_entries(model, adam)
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    _write_section(f, params)
    _write_section(f, extra)
    return f.getvalue()


def save(path, model, adam: AdamState | None = None) -> None:
    payload = dumps(model, adam)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    f = io.BytesIO(buf)
    if f.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = _read_section(f)
    extra = _read_section(f)
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return params, extra


def load(path, model, adam: AdamState | None = None) -> None:
    """Restore parameters (and BN/Adam state) into ``model`` in place."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    params, extra = loads(buf)
    if set(params) != set(model.params):
        missing = sorted(set(model.params) - set(params))
        unexpected = sorted(set(params) - set(model.params))
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, p in model.params.items():
        if params[name].shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != model {p.data.shape}")
    for name, p in model.params.items():
        p.data[...] = params[name]  # in place: layers share these buffers
    for name, st in model.bn.items():
        try:
            st.mean = extra[f"bn.{name}.mean"].copy()
            st.var = extra[f"bn.{name}.var"].copy()
            st.steps = int(extra[f"bn.{name}.steps"].reshape(-1)[0])
        except KeyError:
            raise CheckpointError(f"missing batch-norm state for {name}") from None
    if adam is not None:
        adam.step = int(np.asarray(extra.get("adam.step", 0)).reshape(-1)[0])
        adam.m = {n: extra[f"adam.m.{n}"].copy() for n in model.params if f"adam.m.{n}" in extra}
        adam.v = {n: extra[f"adam.v.{n}"].copy() for n in model.params if f"adam.v.{n}" in extra}
