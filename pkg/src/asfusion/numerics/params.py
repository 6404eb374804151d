"""Named parameters, AdamW, and the binary tensor-record format."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor, get_dtype

MAGIC = b"ASFT"
FORMAT_VERSION = 1


class ParamStore:
    """Trainable tensors with gradient accumulators and AdamW moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._by_id: dict[int, str] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=get_dtype())
        t = Tensor(arr, requires_grad=True, name=name)
        self.params[name] = t
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self._by_id[id(t)] = name
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by the remaining suffix."""
        p = prefix + "."
        return {k[len(p):]: t for k, t in self.params.items() if k.startswith(p)}

    def accumulate(self, leaf_grads: Mapping[int, np.ndarray]) -> None:
        for key, g in leaf_grads.items():
            name = self._by_id.get(key)
            if name is not None:
                self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            t = self.params[k]
            if t.shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def cast(self, dtype) -> None:
        """Change the scalar width of every parameter and buffer in place."""
        for k, t in self.params.items():
            t.data = t.data.astype(dtype)
            self.grads[k] = self.grads[k].astype(dtype)
            self.m[k] = self.m[k].astype(dtype)
            self.v[k] = self.v[k].astype(dtype)


def adamw_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update; clears gradients afterwards."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g.fill(0.0)


# --------------------------------------------------------------------------
# tensor-record files: header (magic, version, scalar width, count), then
# per record: u32 name length, name, u32 rank, u64 extents, little-endian data


def encode_records(tensors: Mapping[str, np.ndarray], width: int | None = None) -> bytes:
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    if width is None:
        width = 8 if any(a.dtype == np.float64 for a in arrays.values()) else 4
    if width not in (4, 8):
        raise ValueError("scalar width must be 4 or 8 bytes")
    dt = np.dtype("<f4" if width == 4 else "<f8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBI", FORMAT_VERSION, width, len(arrays)))
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    return buf.getvalue()


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor-record file (bad magic)")
    version, width, count = struct.unpack_from("<HBI", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported record format version {version}")
    dt = np.dtype("<f4" if width == 4 else "<f8")
    off = 4 + struct.calcsize("<HBI")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        size = int(np.prod(shape, dtype=np.int64)) * width
        out[name] = np.frombuffer(blob, dtype=dt, count=size // width, offset=off).reshape(shape).copy()
        off += size
    if off != len(blob):
        raise ValueError("trailing bytes after tensor records")
    return out


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(encode_records(store.state()))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())
