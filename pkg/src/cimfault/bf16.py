"""Bit-exact bfloat16 codec and the tile machinery built on top of it.

Matrices are plain 2-D ``numpy.float32`` arrays whose entries are exactly
bf16-representable. Bit patterns are ``numpy.uint16`` (or Python ``int`` for
the scalar API).

Layout of a bf16 word::

    bit 15     sign
    bits 14-7  exponent (bias 127)
    bits 6-0   mantissa
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGN_MASK = 0x8000
EXPONENT_MASK = 0x7F80
MANTISSA_MASK = 0x007F
MANTISSA_BITS = 7

BF16_MAX_FINITE = 0x7F7F
BF16_POS_INF = 0x7F80


class NaNPatternError(ValueError):
    """Raised when a NaN bit pattern is decoded."""


def _is_nan_pattern(bits: np.ndarray) -> np.ndarray:
    return ((bits & EXPONENT_MASK) == EXPONENT_MASK) & ((bits & MANTISSA_MASK) != 0)


def _round_f32_bits(u32: np.ndarray) -> np.ndarray:
    # round-to-nearest-even on the low 16 bits
    lsb = (u32 >> np.uint32(16)) & np.uint32(1)
    return ((u32 + np.uint32(0x7FFF) + lsb) >> np.uint32(16)).astype(np.uint16)


def to_bf16_bits(x, saturate: bool = True) -> np.ndarray:
    """Round an array of reals to bf16 bit patterns (round-to-nearest-even).

    ``float64`` input is rounded directly from its exact value; the detour
    through ``float32`` is corrected where it would double-round. Infinite
    inputs map to the infinity patterns. Finite inputs that round past the
    largest finite bf16 value saturate to it unless ``saturate`` is False.
    """
    x = np.asarray(x)
    shape = x.shape
    x = x.reshape(-1)
    if x.dtype.kind not in "fiu":
        raise TypeError(f"expected a real array, got dtype {x.dtype}")
    if x.dtype.kind in "iu":
        x = x.astype(np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN cannot be encoded as bf16")

    if x.dtype == np.float32:
        x32 = x
        u = x32.view(np.uint32).copy()
    else:
        x64 = x.astype(np.float64, copy=False)
        with np.errstate(over="ignore"):
            x32 = x64.astype(np.float32)
        u = x32.view(np.uint32).copy()
        tie = ((u & np.uint32(0xFFFF)) == np.uint32(0x8000)) & np.isfinite(x32)
        inexact = tie & (x32.astype(np.float64) != x64)
        if inexact.any():
            up = inexact & (np.abs(x64) > np.abs(x32.astype(np.float64)))
            down = inexact & ~up
            u[up] += np.uint32(1)
            u[down] -= np.uint32(1)

    bits = _round_f32_bits(u)
    if saturate:
        finite_in = np.isfinite(x)
        overflow = finite_in & ((bits & 0x7FFF) == BF16_POS_INF)
        if overflow.any():
            bits[overflow] = (bits[overflow] & SIGN_MASK) | BF16_MAX_FINITE
    return bits.reshape(shape)


def from_bf16_bits(bits) -> np.ndarray:
    """Decode bf16 patterns to ``float32`` values (exact). NaN patterns raise."""
    bits = np.asarray(bits)
    if bits.dtype != np.uint16:
        if bits.size and (bits.min() < 0 or bits.max() > 0xFFFF):
            raise ValueError("bf16 patterns must fit in 16 bits")
        bits = bits.astype(np.uint16)
    if _is_nan_pattern(bits).any():
        raise NaNPatternError("NaN bf16 pattern has no real value")
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def quantize_bf16(x) -> np.ndarray:
    """Round to the nearest bf16 value, returned as ``float32``. Saturating."""
    return from_bf16_bits(to_bf16_bits(x))


def is_bf16(x) -> bool:
    """True when every entry of ``x`` is exactly bf16-representable."""
    x = np.asarray(x, dtype=np.float32)
    return bool(((x.view(np.uint32) & np.uint32(0xFFFF)) == 0).all())


def encode_bf16(x: float) -> int:
    """Encode one finite real as a bf16 bit pattern."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    return int(to_bf16_bits(np.float64(x)))


def decode_bf16(w: int) -> float:
    """Decode one bf16 bit pattern to its exact real value."""
    w = int(w)
    if not 0 <= w <= 0xFFFF:
        raise ValueError(f"{w:#x} is not a 16-bit pattern")
    return float(from_bf16_bits(np.uint16(w)))


def format_bits(w: int) -> str:
    """Render a pattern as ``s eeeeeeee mmmmmmm``."""
    s = f"{int(w):016b}"
    return f"{s[0]} {s[1:9]} {s[9:]}"


@dataclass(frozen=True)
class TileShape:
    """Crossbar tile dimensions ``m x n``."""

    m: int = 64
    n: int = 64

    def __post_init__(self):
        if int(self.m) < 1 or int(self.n) < 1:
            raise ValueError(f"tile dimensions must be positive, got {self.m}x{self.n}")

    @classmethod
    def parse(cls, text: str) -> "TileShape":
        m, _, n = text.lower().partition("x")
        return cls(int(m), int(n))

    def __str__(self):
        return f"{self.m}x{self.n}"


@dataclass(frozen=True)
class BlockGrid:
    """A ``k x t`` grid of sub-matrix views produced by :func:`split_blocks`."""

    blocks: tuple
    tile: TileShape

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def t(self) -> int:
        return len(self.blocks[0]) if self.blocks else 0

    def __iter__(self):
        for i, row in enumerate(self.blocks):
            for j, block in enumerate(row):
                yield i, j, block


def as_matrix(W) -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {W.shape}")
    return W


def split_blocks(W, tile: TileShape = TileShape()) -> BlockGrid:
    """Ceil-partition ``W`` into tiles; edge tiles hold the remainder."""
    W = as_matrix(W)
    d1, d2 = W.shape
    k = -(-d1 // tile.m)
    t = -(-d2 // tile.n)
    blocks = tuple(
        tuple(W[i * tile.m:(i + 1) * tile.m, j * tile.n:(j + 1) * tile.n] for j in range(t))
        for i in range(k)
    )
    return BlockGrid(blocks, tile)


def concat_blocks(grid: BlockGrid) -> np.ndarray:
    """Reassemble a grid into one matrix, checking that the edges line up."""
    if grid.k == 0 or grid.t == 0:
        raise ValueError("empty block grid")
    for row in grid.blocks:
        if len(row) != grid.t:
            raise ValueError("ragged block grid")
        heights = {b.shape[0] for b in row}
        if len(heights) != 1:
            raise ValueError(f"blocks in one block-row disagree on height: {sorted(heights)}")
    for j in range(grid.t):
        widths = {row[j].shape[1] for row in grid.blocks}
        if len(widths) != 1:
            raise ValueError(f"blocks in block-column {j} disagree on width: {sorted(widths)}")
    return np.block([[np.asarray(b) for b in row] for row in grid.blocks])


def block_abs_max(b) -> float:
    b = np.asarray(b)
    if b.size == 0:
        raise ValueError("block_abs_max of an empty block")
    return float(np.max(np.abs(b)))


def matmul(a, b) -> np.ndarray:
    """Matrix product accumulated in float64.

    A product of two bf16 values is exact in float64. When each operand's
    nonzero magnitudes span at most ~2**15 and the inner dimension is at most
    64, every partial sum is exact too, so the result does not depend on
    summation order. The caller decides whether to narrow
    the result.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a.astype(np.float64) @ b.astype(np.float64)
