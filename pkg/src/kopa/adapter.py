"""Knowledge prefix adapter: an affine map from structural embedding space
into the language model's token-embedding space.

A triple's three structural vectors (head, relation, tail) become exactly
three "virtual knowledge tokens" that are spliced into the token sequence
without corresponding vocabulary entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"KPA1"

POSITIONS = ("prefix", "infix", "suffix")


@dataclass
class PrefixAdapter:
    W: np.ndarray  # (d_in, d_model), row-vector convention: token = v @ W + b
    b: np.ndarray  # (d_model,)

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_model(self) -> int:
        return self.W.shape[1]


@dataclass
class VirtualTokenPrefix:
    """Exactly three projected vectors, in (head, relation, tail) order."""

    tokens: np.ndarray  # (3, d_model)
    position: str = "prefix"

    def __post_init__(self):
        if self.tokens.shape[0] != 3:
            raise ValueError(f"a virtual token prefix holds exactly 3 vectors, got {self.tokens.shape[0]}")
        if self.position not in POSITIONS:
            raise ValueError(f"position must be one of {POSITIONS}, got {self.position!r}")


def init_adapter(d_in: int, d_model: int, rng: np.random.Generator) -> PrefixAdapter:
    """Small uniform init, half-width 1/sqrt(d_in); zero offset."""
    half = 1.0 / np.sqrt(d_in)
    return PrefixAdapter(
        W=rng.uniform(-half, half, size=(d_in, d_model)),
        b=np.zeros(d_model),
    )


def adapt(adapter: PrefixAdapter, h_vec, r_vec, t_vec, position: str = "prefix") -> VirtualTokenPrefix:
    """Project the three structural vectors; tokens[i] = v_i @ W + b."""
    vecs = []
    for name, v in (("head", h_vec), ("relation", r_vec), ("tail", t_vec)):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (adapter.d_in,):
            raise ValueError(
                f"{name} vector has width {v.shape}, adapter expects ({adapter.d_in},)"
            )
        vecs.append(v @ adapter.W + adapter.b)
    return VirtualTokenPrefix(np.stack(vecs), position)


def save_adapter(adapter: PrefixAdapter, path) -> None:
    """Magic 'KPA1', little-endian u32 {d_in, d_model}, W row-major f32, b f32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<2I", adapter.d_in, adapter.d_model))
        f.write(adapter.W.astype("<f4").tobytes())
        f.write(adapter.b.astype("<f4").tobytes())


def load_adapter(path) -> PrefixAdapter:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    d_in, d_model = struct.unpack("<2I", blob[4:12])
    expected = 12 + 4 * (d_in * d_model + d_model)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    W = np.frombuffer(blob, dtype="<f4", count=d_in * d_model, offset=12)
    b = np.frombuffer(blob, dtype="<f4", count=d_model, offset=12 + 4 * d_in * d_model)
    return PrefixAdapter(W.reshape(d_in, d_model).astype(np.float64), b.astype(np.float64))
