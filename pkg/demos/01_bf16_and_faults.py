"""
bf16 words and the two fault models
===================================

Walk one weight through the codec, flip two of its mantissa bits, then
program a whole matrix onto a noisy crossbar and look at what changed.
"""

import numpy as np

from cimfault import NoiseSpec, RngKey, SafSpec, TileShape
from cimfault.bf16 import decode_bf16, encode_bf16, format_bits, quantize_bf16, to_bf16_bits
from cimfault.faults import flip_mantissa_bits, program_weights

# %%
# A single weight. 0.028 is not representable; the nearest bf16 is 229/8192.
w = encode_bf16(0.028)
print("0.028 ->", format_bits(w), "=", decode_bf16(w))

# %%
# A stuck-at fault flips mantissa bits. Positions count from the leading
# mantissa bit, so flipping 2 and 4 turns 1100101 into 1110001.
w_bad = flip_mantissa_bits(w, [2, 4])
print("flipped ->", format_bits(w_bad), "=", decode_bf16(w_bad))

# %%
# Program a 200 x 150 matrix with sigma = 0.02 block noise and p = 0.01 stuck
# bits. Each 64 x 64 tile gets noise scaled by its own largest magnitude.
rng = np.random.default_rng(0)
W = quantize_bf16(rng.standard_normal((200, 150)) * 0.05)
W[128:, :] *= 10  # a loud bottom stripe of tiles
fw = program_weights(W, NoiseSpec(0.02, TileShape(64, 64)), SafSpec(0.01), RngKey(7, ("demo",)))

delta = (fw.w_star - W).astype(np.float64)
print("noise std, quiet tiles:", delta[:128].std())
print("noise std, loud tiles: ", delta[128:].std())

changed = to_bf16_bits(fw.w_star) != to_bf16_bits(W)
print(f"{changed.mean():.1%} of words changed")

# %%
# The same key gives the same crossbar, bit for bit.
again = program_weights(W, fw.noise, fw.saf, fw.key)
print("reproducible:", again.w_star.tobytes() == fw.w_star.tobytes())
