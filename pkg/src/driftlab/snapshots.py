"""Model + optimizer snapshots with an exact binary file format.

In-memory snapshots back the restore-on-domain-change semantics; the file
format is a versioned little-endian container (magic, arch, flat float64
arrays) whose write -> read -> write round trip is byte-identical.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .model import ArchSpec, ModelState, OptimizerState

MAGIC = b"DRIFTSNP"
FORMAT_VERSION = 1

_OPT_KINDS = ("sgd", "adam")


class SnapshotError(ValueError):
    """Corrupt snapshot file or architecture mismatch on restore."""


@dataclass
class Snapshot:
    model: ModelState
    opt: OptimizerState | None

    @classmethod
    def take(cls, model: ModelState, opt: OptimizerState | None = None) -> "Snapshot":
        return cls(model=model.copy(), opt=None if opt is None else opt.copy())

    def restore(self, into_arch: ArchSpec | None = None) -> tuple[ModelState, OptimizerState | None]:
        """Fresh copies of the stored state; optionally assert the target arch."""
        if into_arch is not None and into_arch != self.model.arch:
            raise SnapshotError(
                f"snapshot arch {self.model.arch} does not match target {into_arch}")
        return self.model.copy(), None if self.opt is None else self.opt.copy()


def _write_array(buf: io.BytesIO, arr: np.ndarray | None) -> None:
    if arr is None:
        buf.write(struct.pack("<Q", 0))
        return
    data = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<Q", data.size))
    buf.write(data.tobytes())


def _read_array(buf: io.BytesIO) -> np.ndarray | None:
    (n,) = struct.unpack("<Q", buf.read(8))
    if n == 0:
        return None
    raw = buf.read(8 * n)
    if len(raw) != 8 * n:
        raise SnapshotError("truncated array data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def dump_bytes(snap: Snapshot) -> bytes:
    m = snap.model
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<II", m.arch.input_dim, len(m.arch.hidden)))
    for w in m.arch.hidden:
        buf.write(struct.pack("<I", w))
    buf.write(struct.pack("<I", m.arch.classes))
    buf.write(struct.pack("<d", m.norm_eps))
    _write_array(buf, m.full_vector())
    for i in range(len(m.arch.hidden)):
        _write_array(buf, m.running_mean[i])
        _write_array(buf, m.running_var[i])
    if snap.opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        o = snap.opt
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<B", _OPT_KINDS.index(o.kind)))
        buf.write(struct.pack("<5d", o.lr, o.momentum, o.beta1, o.beta2, o.adam_eps))
        buf.write(struct.pack("<Q", o.t))
        _write_array(buf, o.velocity)
        _write_array(buf, o.second)
    return buf.getvalue()


def load_bytes(raw: bytes) -> Snapshot:
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise SnapshotError("bad magic: not a snapshot file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot format version {version}")
    input_dim, n_hidden = struct.unpack("<II", buf.read(8))
    hidden = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(n_hidden))
    (classes,) = struct.unpack("<I", buf.read(4))
    arch = ArchSpec(input_dim, hidden, classes)
    (norm_eps,) = struct.unpack("<d", buf.read(8))

    from .model import init_model  # deterministic scaffold, then overwritten
    m = init_model(arch, seed=0, norm_eps=norm_eps)
    params = _read_array(buf)
    if params is None or params.size != m.num_full():
        raise SnapshotError("parameter vector size mismatch")
    m.set_full_vector(params)
    for i in range(n_hidden):
        mean = _read_array(buf)
        var = _read_array(buf)
        if mean is None or var is None or mean.size != hidden[i] or var.size != hidden[i]:
            raise SnapshotError("running statistics size mismatch")
        m.running_mean[i] = mean
        m.running_var[i] = var
    m.version = 0

    (has_opt,) = struct.unpack("<B", buf.read(1))
    opt = None
    if has_opt:
        (kind_idx,) = struct.unpack("<B", buf.read(1))
        lr, momentum, beta1, beta2, adam_eps = struct.unpack("<5d", buf.read(40))
        (t,) = struct.unpack("<Q", buf.read(8))
        velocity = _read_array(buf)
        second = _read_array(buf)
        opt = OptimizerState(kind=_OPT_KINDS[kind_idx], lr=lr, momentum=momentum,
                             beta1=beta1, beta2=beta2, adam_eps=adam_eps, t=t,
                             velocity=velocity, second=second)
    if buf.read(1):
        raise SnapshotError("trailing bytes after snapshot payload")
    return Snapshot(model=m, opt=opt)


def save(snap: Snapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(snap))


def load(path) -> Snapshot:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
