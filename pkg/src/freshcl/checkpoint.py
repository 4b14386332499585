"""Binary model checkpoints.

Layout (all integers and floats little-endian)::

    b"FRESHCL1"
    u32 section count
    per section: 16-byte NUL-padded ASCII name, u64 offset, u64 length
    section payloads

Sections: ``config`` (canonical JSON), ``experts``, ``routers``, ``registry``,
``prototypes``, ``meta``. Arrays are stored as ``u32 ndim, u64 dims..., f64
data`` in row-major order, so identical models give identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import ParseError
from .etf import EtfFrame
from .experts import Expert, Status
from .numerics import AdamWState
from .routing import Router
from .taskid import TaskPrototypeBank
from .trainer import ModelState, TrainConfig

MAGIC = b"FRESHCL1"
SECTIONS = ("config", "experts", "routers", "registry", "prototypes", "meta")


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def i64(self, v):
        self.buf.write(struct.pack("<q", v))

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim)
        for n in a.shape:
            self.u64(n)
        self.buf.write(a.tobytes())

    def adam(self, s: AdamWState):
        self.u64(s.step)
        self.array(s.first_moment)
        self.array(s.second_moment)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, section: str):
        self.data = data
        self.pos = 0
        self.section = section

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"checkpoint section {self.section!r} is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def adam(self) -> AdamWState:
        step = self.u64()
        return AdamWState(step, self.array(), self.array())


def config_json(config: TrainConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def _encode(state: ModelState) -> dict[str, bytes]:
    out = {"config": config_json(state.config).encode("utf-8")}

    w = _Writer()
    w.u32(len(state.experts))
    for e in state.experts:
        w.u32(e.id)
        w.u8(1 if e.frozen else 0)
        w.u64(e.usage_count)
        w.array(e.projection)
        w.array(e.frame.targets)
        w.adam(e.opt_state)
    out["experts"] = w.getvalue()

    w = _Writer()
    w.u32(len(state.routers))
    for t in sorted(state.routers):
        r = state.routers[t]
        w.i64(r.task_id)
        w.u8(1 if r.frozen else 0)
        w.array(r.weights)
        w.array(r.bias)
        w.adam(r.weights_state)
        w.adam(r.bias_state)
    out["routers"] = w.getvalue()

    w = _Writer()
    w.u32(len(state.class_registry))
    for c in sorted(state.class_registry):
        w.i64(c)
        w.u32(state.class_registry[c])
        w.i64(state.class_task[c])
    out["registry"] = w.getvalue()

    w = _Writer()
    w.u32(len(state.bank.prototypes))
    for t in sorted(state.bank.prototypes):
        w.i64(t)
        w.u64(state.bank.counts.get(t, 0))
        w.array(state.bank.prototypes[t])
    out["prototypes"] = w.getvalue()

    w = _Writer()
    w.u32(len(state.tasks_trained))
    for t in state.tasks_trained:
        w.i64(t)
    w.u32(len(state.usage_at_task_start))
    for u in state.usage_at_task_start:
        w.u64(u)
    out["meta"] = w.getvalue()
    return out


def to_bytes(state: ModelState) -> bytes:
    payloads = _encode(state)
    header_len = len(MAGIC) + 4 + len(SECTIONS) * (16 + 8 + 8)
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<I", len(SECTIONS)))
    offset = header_len
    for name in SECTIONS:
        head.write(name.encode("ascii").ljust(16, b"\0"))
        head.write(struct.pack("<QQ", offset, len(payloads[name])))
        offset += len(payloads[name])
    return head.getvalue() + b"".join(payloads[n] for n in SECTIONS)


def from_bytes(data: bytes) -> ModelState:
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint: bad magic header")
    if len(data) < len(MAGIC) + 4:
        raise ParseError("checkpoint header is truncated")
    (count,) = struct.unpack_from("<I", data, len(MAGIC))
    sections = {}
    pos = len(MAGIC) + 4
    if len(data) < pos + 32 * count:
        raise ParseError("checkpoint section table is truncated")
    for _ in range(count):
        name = data[pos:pos + 16].rstrip(b"\0").decode("ascii")
        offset, length = struct.unpack_from("<QQ", data, pos + 16)
        pos += 32
        if offset + length > len(data):
            raise ParseError(f"checkpoint section {name!r} points past the end of the file")
        sections[name] = data[offset:offset + length]
    missing = [s for s in SECTIONS if s not in sections]
    if missing:
        raise ParseError(f"checkpoint is missing sections {missing}")

    raw = json.loads(sections["config"].decode("utf-8"))
    known = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in raw.items() if k in known})

    r = _Reader(sections["experts"], "experts")
    experts = []
    for _ in range(r.u32()):
        eid = r.u32()
        status = Status.FROZEN if r.u8() else Status.TRAINABLE
        usage = r.u64()
        projection = r.array()
        frame = EtfFrame(r.array())
        experts.append(Expert(eid, projection, frame, status, usage, r.adam()))

    r = _Reader(sections["routers"], "routers")
    routers = {}
    for _ in range(r.u32()):
        tid = r.i64()
        frozen = bool(r.u8())
        weights, bias = r.array(), r.array()
        routers[tid] = Router(tid, weights, bias, frozen, r.adam(), r.adam())

    r = _Reader(sections["registry"], "registry")
    registry, class_task = {}, {}
    for _ in range(r.u32()):
        c = r.i64()
        registry[c] = r.u32()
        class_task[c] = r.i64()

    r = _Reader(sections["prototypes"], "prototypes")
    bank = TaskPrototypeBank()
    for _ in range(r.u32()):
        t = r.i64()
        bank.counts[t] = r.u64()
        bank.prototypes[t] = r.array()

    r = _Reader(sections["meta"], "meta")
    tasks = [r.i64() for _ in range(r.u32())]
    usage_start = [r.u64() for _ in range(r.u32())]

    return ModelState(config=config, experts=experts, routers=routers, class_registry=registry,
                      class_task=class_task, bank=bank, usage_at_task_start=usage_start,
                      tasks_trained=tasks)


def save(state: ModelState, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(state))


def load(path: str | Path) -> ModelState:
    return from_bytes(Path(path).read_bytes())


def tensor_checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()
