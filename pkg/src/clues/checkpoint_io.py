"""Versioned binary persistence for checkpoints and adapters.

Layout (all integers little-endian)::

    b"CLUESCKPT"  u32 version
    u32 header_len, header JSON (utf-8)        kind/rank/alpha/arch/task
    u32 n_segments, then per segment:
        u32 name_len, name (utf-8), u32 ndim, u32 dims..., f64 values
    f64 lr, i64 t
    u8 has_state, and if set: u64 step, m and v written as segments

Floats are stored as raw IEEE-754 doubles so a round trip is bit-exact.
Merge provenance lives in a JSON sidecar next to the binary file.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import LoraAdapter, ModelParams
from .optim import Checkpoint, OptimizerKind, OptimState, Trajectory

MAGIC = b"CLUESCKPT"
VERSION = 1


def _w_seg(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _r_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ConfigError("truncated checkpoint file")
    return data


def _r_seg(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _r_exact(buf, 4))
    name = _r_exact(buf, n).decode("utf-8")
    (ndim,) = struct.unpack("<I", _r_exact(buf, 4))
    shape = struct.unpack(f"<{ndim}I", _r_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_r_exact(buf, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def _segments(trainable) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if isinstance(trainable, LoraAdapter):
        head = {"kind": "adapter", "rank": trainable.rank, "alpha": trainable.alpha}
        segs = []
        for n, a, b in trainable.layers:
            segs += [(f"{n}.A", a), (f"{n}.B", b)]
        return head, segs
    return {"kind": "params", "arch": trainable.arch, "task": trainable.task}, list(trainable.segments)


def dumps(ck: Checkpoint) -> bytes:
    head, segs = _segments(ck.trainable)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    hj = json.dumps(head, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(hj)))
    buf.write(hj)
    buf.write(struct.pack("<I", len(segs)))
    for name, arr in segs:
        _w_seg(buf, name, arr)
    buf.write(struct.pack("<dq", ck.lr, ck.t))
    if ck.state is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", ck.state.step))
        _w_seg(buf, "m", ck.state.m)
        _w_seg(buf, "v", ck.state.v)
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _r_exact(buf, len(MAGIC)) != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _r_exact(buf, 4))
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (hl,) = struct.unpack("<I", _r_exact(buf, 4))
    head = json.loads(_r_exact(buf, hl).decode("utf-8"))
    (nseg,) = struct.unpack("<I", _r_exact(buf, 4))
    segs = [_r_seg(buf) for _ in range(nseg)]
    lr, t = struct.unpack("<dq", _r_exact(buf, 16))
    state = None
    if _r_exact(buf, 1) == b"\x01":
        (step,) = struct.unpack("<Q", _r_exact(buf, 8))
        state = OptimState(_r_seg(buf)[1], _r_seg(buf)[1], step)
    if buf.read(1):
        raise ConfigError("trailing bytes after checkpoint")
    if head["kind"] == "adapter":
        layers = []
        for (na, a), (nb, b) in zip(segs[::2], segs[1::2]):
            layer = na[:-2]
            if na != f"{layer}.A" or nb != f"{layer}.B":
                raise ConfigError(f"malformed adapter segments {na!r}, {nb!r}")
            layers.append((layer, a, b))
        trainable = LoraAdapter(tuple(layers), int(head["rank"]), float(head["alpha"]))
    else:
        trainable = ModelParams(head["arch"], tuple(segs), head["task"])
    return Checkpoint(t, trainable, lr, state)


def save_checkpoint(path, ck: Checkpoint, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ck))
    if provenance is not None:
        sidecar(path).write_text(json.dumps(provenance, sort_keys=True, indent=2) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def save_adapter(path, adapter: LoraAdapter, provenance: dict | None = None) -> Path:
    """A bare adapter is stored as a stateless checkpoint with ``t = 0``."""
    return save_checkpoint(path, Checkpoint(0, adapter, 0.0, None), provenance)


def load_adapter(path) -> LoraAdapter:
    tr = load_checkpoint(path).trainable
    if not isinstance(tr, LoraAdapter):
        raise ConfigError(f"{path} holds full parameters, not an adapter")
    return tr


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_provenance(path) -> dict | None:
    p = sidecar(path)
    return json.loads(p.read_text()) if p.exists() else None


def save_trajectory(out_dir, traj: Trajectory) -> Path:
    """One checkpoint file per snapshot plus ``trajectory.json`` (optimizer and cadence)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ck in enumerate(traj.checkpoints):
        name = f"ckpt_{i:04d}.ckpt"
        save_checkpoint(out / name, ck)
        files.append(name)
    kind = traj.kind
    meta = {"cadence": traj.cadence, "checkpoints": files,
            "optimizer": {"variant": kind.variant, "lr": list(kind.lr) if isinstance(kind.lr, tuple) else kind.lr,
                          "beta1": kind.beta1, "beta2": kind.beta2, "eps": kind.eps,
                          "weight_decay": kind.weight_decay}}
    (out / "trajectory.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return out


def load_trajectory(in_dir, base: ModelParams) -> Trajectory:
    src = Path(in_dir)
    try:
        meta = json.loads((src / "trajectory.json").read_text())
    except OSError as exc:
        raise ConfigError(f"no trajectory in {src}: {exc}") from exc
    opt = dict(meta["optimizer"])
    if isinstance(opt["lr"], list):
        opt["lr"] = tuple(opt["lr"])
    cks = tuple(load_checkpoint(src / name) for name in meta["checkpoints"])
    return Trajectory(cks, meta["cadence"], OptimizerKind(**opt), base)
