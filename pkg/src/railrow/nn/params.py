import math
import struct
from dataclasses import dataclass

import numpy as np

from ..exceptions import CheckpointFormatError

MAGIC = b"RAILROW1"


class ParamStore:
    """Named parameter arrays with gradients and Adam moments.

    Gradients and moments are allocated lazily so that large inference-only
    configurations do not pay for optimizer state.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0
        self.frozen = set()

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    @property
    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def grad(self, name):
        g = self.grads.get(name)
        if g is None:
            g = self.grads[name] = np.zeros_like(self.params[name])
        return g

    def accumulate(self, name, value):
        if name in self.frozen:
            return
        g = self.grad(name)
        g += value

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype):
        out = ParamStore(dtype)
        for k, p in self.params.items():
            out.add(k, p)
        out.frozen = set(self.frozen)
        return out

    def copy(self):
        out = self.astype(self.dtype)
        out.step = self.step
        for d_src, d_dst in ((self.m, out.m), (self.v, out.v)):
            for k, a in d_src.items():
                d_dst[k] = a.copy()
        return out

    def equal(self, other) -> bool:
        return (list(self.params) == list(other.params)
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every non-frozen parameter, in place."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    step_size = lr / c1
    for name, p in store.params.items():
        if name in store.frozen:
            continue
        g = store.grad(name)
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p)
            store.v[name] = np.zeros_like(p)
        v = store.v[name]
        # in place to avoid full-size temporaries on the large head matrices
        buf = np.multiply(g, 1.0 - beta1, dtype=p.dtype)
        m *= beta1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - beta2
        v *= beta2
        v += buf
        if lr == 0:
            continue
        np.multiply(v, 1.0 / c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= step_size
        p -= buf
    return store


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float = 4e-4
    total_steps: int = 1

    def __call__(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        s = min(max(step, 0), self.total_steps)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * s / self.total_steps))


def save_checkpoint(path, store: ParamStore):
    """Little-endian: magic, then per parameter (name len, name, rank, dims, float32 data)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, p in store.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    store = ParamStore(np.float32)
    pos = len(MAGIC)
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointFormatError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            store.add(name, arr)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return store
