"""Pure numpy versions of the hot kernels.

Must agree bit-for-bit with ``_ckernels`` on codes and packed bytes; the
per-channel gradient sums may differ in the last ulp (pairwise vs sequential
summation).
"""

import numpy as np

BACKEND = "python"


def round_half_away(x: np.ndarray) -> np.ndarray:
    # same result as C round(): x - trunc(x) is exact in binary floating point
    r = np.trunc(x)
    return r + np.where(np.abs(x - r) >= 0.5, np.sign(x), 0.0)


def quantize_codes(w, scales, zero_offsets, levels):
    """codes[c, j] = clip(round(w[c, j] / s[c]) + z[c], 0, levels - 1)."""
    v = round_half_away(w / scales[:, None]) + zero_offsets[:, None].astype(np.float64)
    return np.clip(v, 0.0, float(levels - 1)).astype(np.int64)


def ste_grads(grad, w, scales, zero_offsets, levels):
    """Clipped-STE weight gradient and the raw (unscaled) per-channel scale gradient."""
    ratio = w / scales[:, None]
    z = zero_offsets[:, None].astype(np.float64)
    v = ratio + z
    top = float(levels - 1)
    low = v < 0.0
    high = v > top
    inside = ~(low | high)
    grad_w = np.where(inside, grad, 0.0)
    ds = np.where(inside, round_half_away(ratio) - ratio, np.where(low, -z, top - z))
    return grad_w, np.sum(grad * ds, axis=1)


def pack_groups(codes, levels, group, width):
    n = codes.size
    n_groups = -(-n // group)
    digits = np.zeros(n_groups * group, dtype=np.uint64)
    digits[:n] = codes
    digits = digits.reshape(n_groups, group)
    powers = np.uint64(levels) ** np.arange(group, dtype=np.uint64)
    words = (digits * powers).sum(axis=1, dtype=np.uint64)
    bits = (words[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_groups(data, n, levels, group, width):
    """Inverse of pack_groups; returns (codes, ok) where ok is False on a digit >= levels."""
    n_groups = -(-n // group)
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: n_groups * width].reshape(n_groups, width)
    words = (bits.astype(np.uint64) << np.arange(width, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)
    out = np.empty((n_groups, group), dtype=np.int64)
    L = np.uint64(levels)
    for k in range(group):
        out[:, k] = (words % L).astype(np.int64)
        words //= L
    ok = not words.any()
    return out.ravel()[:n], ok
