"""Per-channel uniform weight quantization.

A weight ``w`` in channel ``c`` maps to the integer code::

    code = clip(round(w / s[c]) + z[c], 0, L - 1)

and back to ``s[c] * (code - z[c])``.  ``L = 2**b`` levels normally, ``2**b + 1``
when the extra balancing level is added, in which case the zero offset is pinned
to ``2**(b-1)`` so the levels are symmetric around zero.  Rounding is half away
from zero everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lobit import kernels

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    balanced: bool = True
    channel_axis: int = 0

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")

    @property
    def levels(self) -> int:
        return 2**self.bits + 1 if self.balanced else 2**self.bits

    @property
    def center(self) -> int:
        return 2 ** (self.bits - 1)


@dataclass
class ChannelAffine:
    scales: np.ndarray
    zero_offsets: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales)
        self.zero_offsets = np.asarray(self.zero_offsets, dtype=np.int64)

    def copy(self) -> "ChannelAffine":
        return ChannelAffine(self.scales.copy(), self.zero_offsets.copy())


@dataclass
class QuantizedLayer:
    codes: np.ndarray
    spec: QuantSpec
    affine: ChannelAffine
    name: str = ""
    dtype: np.dtype = field(default=np.dtype(np.float32))


def effective_bits(spec: QuantSpec) -> float:
    return math.log2(spec.levels) if spec.balanced else float(spec.bits)


def _channels_first(w: np.ndarray, axis: int) -> np.ndarray:
    w = np.moveaxis(np.asarray(w), axis, 0)
    return w.reshape(w.shape[0], -1)


def _restore(flat: np.ndarray, shape, axis: int) -> np.ndarray:
    moved = (shape[axis],) + tuple(d for i, d in enumerate(shape) if i != axis)
    return np.moveaxis(flat.reshape(moved), 0, axis)


def minmax_init(w: np.ndarray, spec: QuantSpec) -> ChannelAffine:
    w2 = _channels_first(w, spec.channel_axis).astype(np.float64)
    if w2.size == 0:
        raise ValueError("cannot initialise scales for an empty tensor")
    if spec.balanced:
        s = np.abs(w2).max(axis=1) / spec.center
        s = np.maximum(s, SCALE_FLOOR)
        z = np.full(w2.shape[0], spec.center, dtype=np.int64)
    else:
        lo, hi = w2.min(axis=1), w2.max(axis=1)
        s = np.maximum((hi - lo) / (spec.levels - 1), SCALE_FLOOR)
        z = kernels.round_half_away(-lo / s).astype(np.int64)
    return ChannelAffine(s.astype(np.asarray(w).dtype), z)


def _check_affine(w2: np.ndarray, affine: ChannelAffine):
    if affine.scales.shape != (w2.shape[0],) or affine.zero_offsets.shape != (w2.shape[0],):
        raise ValueError(f"affine has {affine.scales.shape[0]} channels, weights have {w2.shape[0]}")
    if not np.all(affine.scales > 0):
        raise ValueError("scales must be strictly positive")


def _codes2d(w2: np.ndarray, s, z, levels: int) -> np.ndarray:
    return kernels.quantize_codes(
        np.ascontiguousarray(w2, dtype=np.float64),
        np.ascontiguousarray(s, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.int64),
        levels,
    )


def quantize(w: np.ndarray, spec: QuantSpec, affine: ChannelAffine, name: str = "") -> QuantizedLayer:
    w = np.asarray(w)
    w2 = _channels_first(w, spec.channel_axis)
    _check_affine(w2, affine)
    codes = _codes2d(w2, affine.scales, affine.zero_offsets, spec.levels)
    return QuantizedLayer(
        _restore(codes, w.shape, spec.channel_axis), spec, affine, name, w.dtype
    )


def dequantize(q: QuantizedLayer) -> np.ndarray:
    axis = q.spec.channel_axis
    codes2 = _channels_first(q.codes, axis)
    s = q.affine.scales.astype(q.dtype)
    steps = (codes2 - q.affine.zero_offsets[:, None]).astype(q.dtype)
    return _restore(s[:, None] * steps, q.codes.shape, axis)


def fake_quantize(w: np.ndarray, spec: QuantSpec, affine: ChannelAffine) -> np.ndarray:
    """Deployed weights: dequantize(quantize(w))."""
    return dequantize(quantize(w, spec, affine))


def channel_errors(w: np.ndarray, spec: QuantSpec, affine: ChannelAffine) -> np.ndarray:
    """Per-channel squared l2 error of the quantize/dequantize roundtrip (float64)."""
    w2 = _channels_first(w, spec.channel_axis).astype(np.float64)
    s = affine.scales.astype(np.float64)
    codes = _codes2d(w2, s, affine.zero_offsets, spec.levels)
    rec = s[:, None] * (codes - affine.zero_offsets[:, None])
    return np.sum((rec - w2) ** 2, axis=1)


def alt_opt_init(
    w: np.ndarray,
    spec: QuantSpec,
    init: ChannelAffine,
    iters: int = 10,
    history: list | None = None,
) -> ChannelAffine:
    """Refine per-channel scales by alternating code assignment and least squares.

    Each round re-quantizes with the current scales, then sets every channel's
    scale to ``<w, q> / <q, q>`` with ``q = codes - zero_offset``.  Channels
    whose codes all sit on the zero offset keep their scale.  When ``history``
    is given, the per-channel error after each round is appended to it
    (index 0 is the error of ``init``).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w2 = _channels_first(w, spec.channel_axis).astype(np.float64)
    _check_affine(w2, init)
    z = init.zero_offsets
    s = init.scales.astype(np.float64)

    def err_of(scales):
        codes = _codes2d(w2, scales, z, spec.levels)
        q = (codes - z[:, None]).astype(np.float64)
        return q, np.sum((scales[:, None] * q - w2) ** 2, axis=1)

    q, err = err_of(s)
    if history is not None:
        history.append(err.copy())
    for _ in range(iters):
        num = np.sum(w2 * q, axis=1)
        den = np.sum(q * q, axis=1)
        ok = den > 0
        cand = s.copy()
        cand[ok] = num[ok] / den[ok]
        cand = np.where(np.isfinite(cand) & (cand > SCALE_FLOOR), cand, s)
        q_new, err_new = err_of(cand)
        # guard against floating-point ties making a channel worse
        keep = err_new > err
        cand[keep] = s[keep]
        s = cand
        if keep.any():
            q_new, err_new = err_of(s)
        q, err = q_new, err_new
        if history is not None:
            history.append(err.copy())
    return ChannelAffine(s.astype(init.scales.dtype), z.copy())


def gradient_scale(spec: QuantSpec, affine: ChannelAffine, per_channel: int) -> np.ndarray:
    """LSQ step-size gradient scale 1/sqrt(N * Q_P), Q_P floored at 1."""
    qp = np.maximum(spec.levels - 1 - affine.zero_offsets, 1).astype(np.float64)
    return 1.0 / np.sqrt(per_channel * qp)


def ste_backward(grad_out, w, spec: QuantSpec, affine: ChannelAffine, grad_scale: bool = True):
    """Gradients of a loss through ``dequantize(quantize(w))``.

    Rounding is treated as identity inside the clip range (clipped STE); the
    scale gradient follows the learned-step-size rule.  Returns ``(grad_w,
    grad_s)`` with ``grad_w`` shaped like ``w`` and ``grad_s`` per channel.
    """
    w = np.asarray(w)
    axis = spec.channel_axis
    w2 = _channels_first(w, axis)
    g2 = _channels_first(np.asarray(grad_out), axis)
    _check_affine(w2, affine)
    gw, gs = kernels.ste_grads(
        np.ascontiguousarray(g2, dtype=np.float64),
        np.ascontiguousarray(w2, dtype=np.float64),
        np.ascontiguousarray(affine.scales, dtype=np.float64),
        np.ascontiguousarray(affine.zero_offsets, dtype=np.int64),
        spec.levels,
    )
    if grad_scale:
        gs = gs * gradient_scale(spec, affine, w2.shape[1])
    out_dtype = np.result_type(w.dtype, np.asarray(grad_out).dtype)
    return _restore(gw, w.shape, axis).astype(out_dtype), gs.astype(affine.scales.dtype)
