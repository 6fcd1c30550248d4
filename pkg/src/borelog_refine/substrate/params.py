"""Named parameter store with seeded init and a binary checkpoint format.

Initialization draws from a per-parameter-name PCG64 stream derived from
(seed, name), so adding or reordering parameters never perturbs the values
of existing ones and two models sharing names and shapes start identical.

Checkpoint container (versioned, fixed little-endian):
    magic 'BLCK' | u32 version | u64 seed | u32 meta_len | meta JSON (utf-8)
    u32 n_params | per param: u16 name_len, name, u8 ndim, u32*ndim dims,
    float64 little-endian raw values
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterator

import numpy as np

from .tensor import DTYPE, SubstrateError, Tensor

_MAGIC = b"BLCK"
_VERSION = 1


def stream_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for the (seed, label) pair."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


_name_seed = stream_seed


class ParameterStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, fan_in: int | None = None,
            init: str = "uniform") -> Tensor:
        """Create a parameter; 'uniform' is fan-in-scaled U(-b, b), b=1/sqrt(fan_in)."""
        if name in self._params:
            raise SubstrateError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=DTYPE)
        elif init == "ones":
            data = np.ones(shape, dtype=DTYPE)
        elif init == "uniform":
            if fan_in is None:
                raise SubstrateError(f"{name}: uniform init requires fan_in")
            rng = np.random.Generator(np.random.PCG64(_name_seed(self.seed, name)))
            bound = 1.0 / np.sqrt(float(fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        else:
            raise SubstrateError(f"unknown init scheme: {init}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Collect gradients after backward; missing grads become zeros."""
        out = {}
        for name, t in self._params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise SubstrateError(f"checkpoint missing parameter: {name}")
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != t.data.shape:
                raise SubstrateError(
                    f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
            t.data = arr.copy()

    # ------------------------------------------------------------------
    # checkpoint serialization

    def save(self, path, meta: dict | None = None) -> None:
        meta_bytes = json.dumps(meta or {}, sort_keys=True,
                                separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQ", _VERSION, self.seed & (2**64 - 1)))
            fh.write(struct.pack("<I", len(meta_bytes)))
            fh.write(meta_bytes)
            fh.write(struct.pack("<I", len(self._params)))
            for name, t in self._params.items():
                nb = name.encode()
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", t.data.ndim))
                for d in t.data.shape:
                    fh.write(struct.pack("<I", d))
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @staticmethod
    def read(path) -> tuple[dict[str, np.ndarray], dict, int]:
        """Read a checkpoint: (arrays, meta, seed)."""
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise SubstrateError(f"{path}: not a checkpoint file")
        version, seed = struct.unpack_from("<IQ", raw, 4)
        if version != _VERSION:
            raise SubstrateError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        (meta_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
            off += 8 * n
            arrays[name] = arr.reshape(dims).astype(DTYPE)
        return arrays, meta, seed

    def load(self, path) -> dict:
        arrays, meta, seed = self.read(path)
        self.load_state_dict(arrays)
        self.seed = seed
        return meta
