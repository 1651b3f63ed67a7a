"""Named parameter sets: construction, initialization, and the FDWT wire format."""

from __future__ import annotations

import hashlib
import struct
from typing import Iterator, Mapping

import numpy as np

from ..engine import Tensor
from .config import ModelConfig

MAGIC = b"FDWT"
VERSION = 1


class SchemaError(ValueError):
    """Serialized weight data does not match the expected schema."""


class WeightSet(Mapping[str, Tensor]):
    """Ordered name -> Tensor map; iteration is lexicographic by name."""

    def __init__(self, arrays: Mapping[str, Tensor]):
        self._arrays: dict[str, Tensor] = {k: arrays[k] for k in sorted(arrays)}

    def __getitem__(self, name: str) -> Tensor:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def copy(self, requires_grad: bool = True) -> "WeightSet":
        return WeightSet({k: t.copy(requires_grad) for k, t in self._arrays.items()})

    def schema(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((k, t.shape) for k, t in self._arrays.items())

    def n_parameters(self) -> int:
        return sum(t.size for t in self._arrays.values())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._arrays))]
        for name, t in self._arrays.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, requires_grad: bool = False) -> "WeightSet":
        view = memoryview(blob)
        if len(view) < 12 or bytes(view[:4]) != MAGIC:
            raise SchemaError("bad magic: not a weight payload")
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise SchemaError(f"unsupported weight format version {version}")
        pos = 12
        arrays: dict[str, Tensor] = {}
        for _ in range(count):
            try:
                (name_len,) = struct.unpack_from("<H", view, pos)
                pos += 2
                name = bytes(view[pos : pos + name_len]).decode("utf-8")
                pos += name_len
                (rank,) = struct.unpack_from("<I", view, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", view, pos)
                pos += 4 * rank
                n = int(np.prod(dims)) if rank else 1
                data = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(dims)
                pos += 8 * n
            except (struct.error, ValueError) as exc:
                raise SchemaError(f"truncated weight payload: {exc}") from exc
            arrays[name] = Tensor(data.astype(np.float64), requires_grad)
        if pos != len(view):
            raise SchemaError(f"trailing {len(view) - pos} bytes after weight payload")
        return cls(arrays)

    def schema_hash(self) -> int:
        h = hashlib.sha256()
        for name, shape in self.schema():
            h.update(name.encode("utf-8"))
            h.update(b"\x00")
            h.update(",".join(str(d) for d in shape).encode("ascii"))
            h.update(b"\n")
        return struct.unpack("<Q", h.digest()[:8])[0]

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_weights(ws: WeightSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ws.to_bytes())


def load_weights(path, requires_grad: bool = False) -> WeightSet:
    with open(path, "rb") as fh:
        return WeightSet.from_bytes(fh.read(), requires_grad)


def expected_names(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Schema (name -> shape) implied by a model configuration."""
    d, h = cfg.embed_dim, cfg.mlp_dim
    names: dict[str, tuple[int, ...]] = {
        "cls": (1, d),
        "embed": (d, cfg.patch_voxels),
        "pos": (cfg.n_tokens, d),
        "head.ln.g": (d,),
        "head.ln.b": (d,),
        "head.w1": (h, d),
        "head.b1": (h,),
        "head.w2": (cfg.n_voxels, h),
        "head.b2": (cfg.n_voxels,),
    }
    for i in range(cfg.blocks):
        p = f"block{i:02d}."
        names[p + "ln1.g"] = (d,)
        names[p + "ln1.b"] = (d,)
        names[p + "wq"] = (d, d)
        names[p + "wk"] = (d, d)
        names[p + "wv"] = (d, d)
        names[p + "wo"] = (d, d)
        names[p + "ln2.g"] = (d,)
        names[p + "ln2.b"] = (d,)
        names[p + "mlp.w1"] = (h, d)
        names[p + "mlp.b1"] = (h,)
        names[p + "mlp.w2"] = (d, h)
        names[p + "mlp.b2"] = (d,)
    return names


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in expected_names(cfg).values())


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightSet:
    """Deterministic initialization: uniform +-sqrt(6/(fan_in+fan_out)) matrices,
    unit LayerNorm gains, zeros for biases, positional table, and CLS token."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, Tensor] = {}
    for name, shape in sorted(expected_names(cfg).items()):
        if name.endswith((".g",)):
            data = np.ones(shape)
        elif len(shape) >= 2 and not name.startswith(("pos", "cls")):
            fan_out, fan_in = shape[0], shape[1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        arrays[name] = Tensor(data, requires_grad=True)
    return WeightSet(arrays)


def check_complete(ws: WeightSet, cfg: ModelConfig) -> None:
    expected = expected_names(cfg)
    missing = sorted(set(expected) - set(ws))
    if missing:
        raise SchemaError(f"weight set missing arrays: {missing}")
    for name, shape in expected.items():
        if ws[name].shape != shape:
            raise SchemaError(
                f"weight {name} has shape {ws[name].shape}, expected {shape}"
            )
