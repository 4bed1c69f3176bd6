"""Self-describing binary checkpoint container.

Layout (all integers little-endian, all floats little-endian IEEE-754
binary64, parameter entries sorted by name):

    magic    8 bytes  b"DPLXCKP1"
    step     u64      optimizer step counter
    hyper    5 x f64  beta1, beta2, eps, weight_decay, clip_norm
    nparam   u32
    entry    repeated nparam times:
        nlen u16, name utf-8, tag u8 (0 understanding / 1 generation /
        2 artifact), ndim u8, dims ndim x u32, data f64 row-major
    nopt     u32      parameters carrying optimizer state
    optent   repeated nopt times:
        nlen u16, name utf-8, m f64 (param shape), v f64 (param shape)

The format is stable: readers must reject unknown magic rather than guess.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .optim import OptimizerState
from .params import ParamTree, branch_of

MAGIC = b"DPLXCKP1"

_TAG_CODE = {"understanding": 0, "generation": 1, "artifact": 2}
_CODE_TAG = {v: k for k, v in _TAG_CODE.items()}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    tags: dict[str, str]
    step: int = 0
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-15
    weight_decay: float = 0.0
    clip_norm: float = 1.0

    def param_bytes(self, name: str) -> bytes:
        return self.params[name].astype("<f8").tobytes()


def _write_name(buf: bytearray, name: str) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw))
    buf += raw


def _read_name(view: memoryview, off: int) -> tuple[str, int]:
    (nlen,) = struct.unpack_from("<H", view, off)
    off += 2
    name = bytes(view[off:off + nlen]).decode("utf-8")
    return name, off + nlen


def serialize(tree: ParamTree, state: OptimizerState | None = None) -> bytes:
    buf = bytearray(MAGIC)
    step = state.step if state is not None else 0
    betas = state.betas if state is not None else (0.9, 0.95)
    eps = state.eps if state is not None else 1e-15
    wd = state.weight_decay if state is not None else 0.0
    clip = state.clip_norm if state is not None else 1.0
    buf += struct.pack("<Q", step)
    buf += struct.pack("<5d", betas[0], betas[1], eps, wd, clip)

    names = sorted(tree.names())
    buf += struct.pack("<I", len(names))
    for n in names:
        data = tree[n].data
        _write_name(buf, n)
        buf += struct.pack("<B", _TAG_CODE[branch_of(n)])
        buf += struct.pack("<B", data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        buf += np.ascontiguousarray(data, dtype="<f8").tobytes()

    opt_names = sorted(state.names) if state is not None else []
    buf += struct.pack("<I", len(opt_names))
    for n in opt_names:
        _write_name(buf, n)
        buf += np.ascontiguousarray(state.m[n], dtype="<f8").tobytes()
        buf += np.ascontiguousarray(state.v[n], dtype="<f8").tobytes()
    return bytes(buf)


def deserialize(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a duplex checkpoint (bad magic)")
    off = 8
    (step,) = struct.unpack_from("<Q", view, off)
    off += 8
    b1, b2, eps, wd, clip = struct.unpack_from("<5d", view, off)
    off += 40

    (nparam,) = struct.unpack_from("<I", view, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for _ in range(nparam):
        name, off = _read_name(view, off)
        tag_code, ndim = struct.unpack_from("<2B", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = arr.astype(np.float64)
        tags[name] = _CODE_TAG[tag_code]

    (nopt,) = struct.unpack_from("<I", view, off)
    off += 4
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for _ in range(nopt):
        name, off = _read_name(view, off)
        shape = params[name].shape
        count = params[name].size
        opt_m[name] = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        opt_v[name] = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count

    return Checkpoint(
        params=params, tags=tags, step=step,
        opt_m=opt_m or None, opt_v=opt_v or None,
        betas=(b1, b2), eps=eps, weight_decay=wd, clip_norm=clip,
    )


def save(path, tree: ParamTree, state: OptimizerState | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(tree, state))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def restore_optimizer(ckpt: Checkpoint, names) -> OptimizerState:
    state = OptimizerState(
        names=list(names), betas=ckpt.betas, eps=ckpt.eps,
        weight_decay=ckpt.weight_decay, clip_norm=ckpt.clip_norm, step=ckpt.step,
    )
    for n in state.names:
        state.m[n] = ckpt.opt_m[n].copy()
        state.v[n] = ckpt.opt_v[n].copy()
    return state
