"""Independent reference implementations used only by the tests.

Nothing here calls into ``cimfault``; values are computed from first
principles with exact rational arithmetic or plain Python loops.
"""

from __future__ import annotations

import bisect
import math
from fractions import Fraction
from functools import lru_cache


def bf16_exact(bits: int) -> Fraction:
    """Exact value of a finite bf16 pattern from the sign/exponent/mantissa formula."""
    sign = -1 if bits >> 15 else 1
    exp = (bits >> 7) & 0xFF
    man = bits & 0x7F
    if exp == 0xFF:
        raise ValueError("not finite")
    if exp == 0:
        return sign * Fraction(man, 128) * Fraction(1, 2**126)
    return sign * (1 + Fraction(man, 128)) * Fraction(2) ** (exp - 127)


@lru_cache(maxsize=None)
def _table():
    # non-negative finite patterns, ascending by value
    pats = [b for b in range(0x7F80)]
    vals = [bf16_exact(b) for b in pats]
    return pats, vals


def nearest_bf16(x: float) -> int:
    """Round-to-nearest-even by exhaustive search over all finite patterns.

    Values beyond the largest finite magnitude saturate to it.
    """
    if math.isnan(x) or math.isinf(x):
        raise ValueError("finite input required")
    pats, vals = _table()
    q = Fraction(abs(x))
    neg = math.copysign(1.0, x) < 0
    i = bisect.bisect_left(vals, q)
    if i == len(vals):
        best = pats[-1]
    elif vals[i] == q or i == 0:
        best = pats[i]
    else:
        lo, hi = i - 1, i
        dlo, dhi = q - vals[lo], vals[hi] - q
        if dlo < dhi:
            best = pats[lo]
        elif dhi < dlo:
            best = pats[hi]
        else:
            best = pats[lo] if pats[lo] % 2 == 0 else pats[hi]
    return best | (0x8000 if neg else 0)


def naive_matmul(a, b):
    """Triple loop, accumulating in Python floats (IEEE double) left to right."""
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return out


def exact_matmul(a, b):
    """Exact rational product."""
    n, k = len(a), len(a[0])
    m = len(b[0])
    return [[sum(Fraction(float(a[i][t])) * Fraction(float(b[t][j])) for t in range(k))
             for j in range(m)] for i in range(n)]


def _vecmat(x, W):
    return [sum(x[i] * float(W[i][j]) for i in range(len(x))) for j in range(len(W[0]))]


def _rope(vec, pos, base):
    hd = len(vec)
    half = hd // 2
    out = [0.0] * hd
    for i in range(half):
        theta = pos * base ** (-2.0 * i / hd)
        c, s = math.cos(theta), math.sin(theta)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def naive_attention(x, wq, wk, wv, wo, n_heads, head_dim, base):
    """Causal multi-head attention, one position and one head at a time."""
    seq = len(x)
    q = [_vecmat(row, wq) for row in x]
    k = [_vecmat(row, wk) for row in x]
    v = [_vecmat(row, wv) for row in x]
    ctx = [[0.0] * (n_heads * head_dim) for _ in range(seq)]
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        qh = [_rope(q[t][sl], t, base) for t in range(seq)]
        kh = [_rope(k[t][sl], t, base) for t in range(seq)]
        for i in range(seq):
            scores = [sum(a * b for a, b in zip(qh[i], kh[j])) / math.sqrt(head_dim) for j in range(i + 1)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for d in range(head_dim):
                ctx[i][h * head_dim + d] = sum(w[j] / z * v[j][sl][d] for j in range(i + 1))
    return [_vecmat(row, wo) for row in ctx]


def naive_ffn(x, w_gate, w_up, w_down):
    out = []
    for row in x:
        g = _vecmat(row, w_gate)
        u = _vecmat(row, w_up)
        hidden = [gi / (1.0 + math.exp(-gi)) * ui for gi, ui in zip(g, u)]
        out.append(_vecmat(hidden, w_down))
    return out
