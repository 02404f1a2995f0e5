"""Device non-ideality models: tile-scaled Gaussian noise and stuck-at faults.

Programming a weight matrix onto the simulated crossbar runs two stages:

1. each ``m x n`` tile gets i.i.d. ``N(0, sigma^2)`` noise multiplied by that
   tile's clean absolute maximum, and the result is re-quantized to bf16;
2. each of the 7 mantissa bits of every resulting bf16 word flips with
   probability ``p``.

Stage 2 overrides stage 1 because a stuck cell ignores what was programmed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .bf16 import (
    MANTISSA_BITS,
    TileShape,
    as_matrix,
    from_bf16_bits,
    split_blocks,
    to_bf16_bits,
)
from .rng import RngKey

_F32_MAX = np.finfo(np.float32).max


class Redraw(enum.Enum):
    """When the Gaussian realization is drawn."""

    PER_PROGRAMMING = "per_programming"  # device-to-device: fixed for the run
    PER_FORWARD = "per_forward"  # cycle-to-cycle: fresh each forward pass


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    tile: TileShape = TileShape()
    redraw: Redraw = Redraw.PER_PROGRAMMING

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        object.__setattr__(self, "redraw", Redraw(self.redraw))


@dataclass(frozen=True)
class SafSpec:
    p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"SAF probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class FaultedWeights:
    w_star: np.ndarray
    noise: NoiseSpec
    saf: SafSpec
    key: RngKey
    forward_index: int = 0


def sample_noise_matrix(shape, sigma: float, key: RngKey) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` float32 entries from the stream of ``key``."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if sigma == 0:
        return np.zeros(shape, dtype=np.float32)
    z = key.generator().standard_normal(shape, dtype=np.float32)
    z *= np.float32(sigma)
    return z


def inject_block_gaussian(W, spec: NoiseSpec, key: RngKey) -> np.ndarray:
    """Add tile-scaled Gaussian noise to ``W`` and re-quantize to bf16.

    Tile ``(i, j)`` draws from ``key.child("block", i, j)``. A tile whose
    clean maximum is 0 receives exactly zero noise. Overflow saturates at the
    largest finite bf16 magnitude.
    """
    W = as_matrix(W)
    if spec.sigma == 0:
        return np.array(W, dtype=np.float32, copy=True)

    out = np.empty(W.shape, dtype=np.float32)
    tile = spec.tile
    for i, j, block in split_blocks(W, tile):
        block = block.astype(np.float32, copy=False)
        scale = np.float32(np.max(np.abs(block)))
        noise = sample_noise_matrix(block.shape, spec.sigma, key.child("block", i, j))
        with np.errstate(over="ignore"):
            noisy = block + noise * scale
        out[i * tile.m:i * tile.m + block.shape[0], j * tile.n:j * tile.n + block.shape[1]] = noisy
    # float32 overflow becomes +-inf; clip so bf16 rounding saturates instead
    np.clip(out, -_F32_MAX, _F32_MAX, out=out)
    return from_bf16_bits(to_bf16_bits(out))


def saf_flip_masks(count: int, p: float, key: RngKey) -> np.ndarray:
    """Per-word 7-bit flip masks for ``count`` words.

    Each of the ``7 * count`` mantissa bits is an independent Bernoulli(p)
    trial. Flipped positions are generated as a Bernoulli process via
    geometric gaps, which is exact and costs O(7 * count * p) draws.
    """
    count = int(count)
    total = MANTISSA_BITS * count
    if p == 0 or count == 0:
        return np.zeros(count, dtype=np.uint16)
    if p == 1:
        return np.full(count, (1 << MANTISSA_BITS) - 1, dtype=np.uint16)

    rng = key.generator()
    expected = total * p
    chunk = int(expected + 6 * np.sqrt(expected) + 16)
    positions = []
    last = -1
    while True:
        # gaps saturate at int64 max for tiny p; clip so the running sum cannot wrap
        gaps = np.minimum(rng.geometric(p, size=chunk), total + 1)
        pos = last + np.cumsum(gaps)
        positions.append(pos)
        last = int(pos[-1])
        if last >= total:
            break
    pos = np.concatenate(positions)
    pos = pos[pos < total]
    word = pos // MANTISSA_BITS
    bit = pos % MANTISSA_BITS
    masks = np.bincount(word, weights=np.left_shift(1, bit), minlength=count)
    return masks.astype(np.uint16)


def apply_saf_bits(bits, spec: SafSpec, key: RngKey) -> np.ndarray:
    """Flip mantissa bits of an array of bf16 patterns. Sign and exponent are kept."""
    bits = np.asarray(bits, dtype=np.uint16)
    masks = saf_flip_masks(bits.size, spec.p, key).reshape(bits.shape)
    return bits ^ masks


def flip_mantissa_bits(w: int, positions) -> int:
    """Flip the given mantissa positions of ``w``; position 0 is the leading mantissa bit."""
    mask = 0
    for pos in positions:
        if not 0 <= pos < MANTISSA_BITS:
            raise ValueError(f"mantissa position {pos} out of range")
        mask |= 1 << (MANTISSA_BITS - 1 - pos)
    return int(w) ^ mask


def apply_saf(w: int, spec: SafSpec, key: RngKey) -> int:
    """Stuck-at-fault model applied to a single bf16 word."""
    return int(apply_saf_bits(np.array([w], dtype=np.uint16), spec, key)[0])


def program_weights(
    W,
    noise: NoiseSpec,
    saf: SafSpec,
    key: RngKey,
    forward_index: int = 0,
) -> FaultedWeights:
    """Program ``W`` onto a faulty crossbar: Gaussian noise, then SAF.

    The SAF realization always comes from ``key.child("saf")``; the Gaussian
    one from ``key.child("gauss")``, extended with the forward index when
    ``noise.redraw`` is ``PER_FORWARD``.
    """
    W = as_matrix(W)
    if noise.redraw is Redraw.PER_FORWARD:
        gauss_key = key.child("gauss", "forward", int(forward_index))
    else:
        gauss_key = key.child("gauss")
    w = inject_block_gaussian(W, noise, gauss_key)
    if saf.p > 0:
        bits = apply_saf_bits(to_bf16_bits(w), saf, key.child("saf"))
        w = from_bf16_bits(bits)
    return FaultedWeights(w, noise, saf, key, int(forward_index))
