"""Sub-byte storage of quantized codes and the ``.bfq`` packed-model container.

Codes with ``L`` levels are grouped ``G`` at a time, with ``G`` the largest
integer such that ``L**G <= 2**64``.  Each group becomes one base-``L`` word
(first code is the least significant digit), and the words are written
back-to-back into a little-endian bit stream, each taking exactly
``W = bit_length(L**G - 1)`` bits.  The last group is zero-padded.

``.bfq`` layout (all integers little-endian)::

    magic "BFQ1" | version u32 | layer count u32
    per layer:  name len u16, utf-8 name | rank u8, dims u32[rank]
                bits u8 | balanced u8 | channel_axis u8 | channels u32
                scales f32[channels] | zero_offsets i32[channels]
                blob length u64 | blob bytes
    time features: step count u32 | steps u32[] | blocks u32 | dim u32
                   f16[blocks][steps][dim]
    extras: config len u32, utf-8 JSON | tensor count u32
            per tensor: name len u16, name | rank u8, dims u32[] | f32 data
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from lobit import kernels
from lobit.quantizer import ChannelAffine, QuantSpec

MAGIC = b"BFQ1"
FORMAT_VERSION = 1


class PackError(ValueError):
    pass


class TruncatedBlobError(PackError):
    pass


class BfqError(Exception):
    """Base class for unreadable packed-model files."""


class BadMagicError(BfqError):
    pass


class UnsupportedVersionError(BfqError):
    pass


class CrcMismatchError(BfqError):
    pass


def group_size(levels: int) -> int:
    if not 2 <= levels <= 256:
        raise PackError(f"level count must be in [2, 256], got {levels}")
    g = 1
    while levels ** (g + 1) <= 2**64:
        g += 1
    return g


def word_bits(levels: int) -> int:
    return (levels ** group_size(levels) - 1).bit_length()


def packed_nbytes(n: int, levels: int) -> int:
    groups = -(-n // group_size(levels))
    return -(-groups * word_bits(levels) // 8)


@dataclass
class PackedBlob:
    level_count: int
    code_count: int
    group_size: int
    data: bytes

    @property
    def bits_per_code(self) -> float:
        return 8.0 * len(self.data) / self.code_count if self.code_count else 0.0


def pack_codes(codes, levels: int) -> PackedBlob:
    codes = np.ascontiguousarray(np.asarray(codes).ravel(), dtype=np.int64)
    g = group_size(levels)
    bad = np.flatnonzero((codes < 0) | (codes >= levels))
    if bad.size:
        i = int(bad[0])
        raise PackError(f"code {int(codes[i])} at index {i} outside [0, {levels - 1}]")
    data = kernels.pack_groups(codes, levels, g, word_bits(levels)) if codes.size else b""
    return PackedBlob(levels, int(codes.size), g, data)


def unpack_codes(blob: PackedBlob) -> np.ndarray:
    n, levels = blob.code_count, blob.level_count
    if group_size(levels) != blob.group_size:
        raise PackError(f"group size {blob.group_size} inconsistent with {levels} levels")
    need = packed_nbytes(n, levels)
    if len(blob.data) < need:
        raise TruncatedBlobError(f"blob holds {len(blob.data)} bytes, {need} required for {n} codes")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    data = np.frombuffer(bytes(blob.data[:need]), dtype=np.uint8)
    codes, ok = kernels.unpack_groups(data, n, levels, blob.group_size, word_bits(levels))
    if not ok:
        raise PackError("corrupt blob: group word exceeds level range")
    return codes


def average_bits(recipe, layer_sizes: dict, n_tf: int = 0) -> float:
    """Average stored bits per linear-layer weight.

    Planned layers cost log2(2**b + 1) bits per weight when balanced (b
    otherwise), fixed 8-bit layers cost 8, cached time-feature scalars cost 16
    each.  The denominator is every weight in ``layer_sizes``, so excluded
    layers (time projections replaced by the cache) count there only.
    """
    priced = dict(recipe.bits)
    for name in recipe.fixed8:
        priced[name] = None
    excluded = set(recipe.excluded)
    for name in layer_sizes:
        if name not in priced and name not in excluded:
            raise KeyError(f"layer {name!r} missing from recipe")
    terms = [16.0 * n_tf]
    for name, b in priced.items():
        if name not in layer_sizes:
            raise KeyError(f"no size given for layer {name!r}")
        if b is None:
            per = 8.0
        else:
            per = math.log2(2**b + 1) if recipe.balanced else float(b)
        terms.append(per * layer_sizes[name])
    total = math.fsum(layer_sizes.values())
    if total <= 0:
        raise ValueError("no weights to average over")
    return math.fsum(terms) / total


def time_cache_storage_ratio(in_dim: int, out_dim: int, n_steps: int) -> float:
    """Storage of an in_dim x out_dim projection over n_steps cached out_dim vectors."""
    return (in_dim * out_dim) / (n_steps * out_dim)


# ---------------------------------------------------------------------------
# packed model container
# ---------------------------------------------------------------------------


@dataclass
class PackedLayer:
    name: str
    shape: tuple
    spec: QuantSpec
    affine: ChannelAffine
    blob: PackedBlob


@dataclass
class TimeFeatureTable:
    """Per-block time features for a fixed list of sampler steps.

    ``features`` has shape (blocks, steps, dim); ``index[t]`` gives the row.
    """

    steps: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.index = {int(t): i for i, t in enumerate(self.steps)}

    @property
    def scalar_count(self) -> int:
        return int(self.features.size)

    def lookup(self, block: int, t: int) -> np.ndarray:
        return self.features[block, self.index[int(t)]][None, :]


@dataclass
class PackedModel:
    layers: list
    time_features: TimeFeatureTable
    tensors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def layer(self, name: str) -> PackedLayer:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)


def _put_name(buf, name: str):
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _put_shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def encode_model(m: PackedModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", m.version, len(m.layers)))
    for lay in m.layers:
        _put_name(buf, lay.name)
        _put_shape(buf, lay.shape)
        channels = lay.affine.scales.shape[0]
        buf.write(struct.pack("<BBBI", lay.spec.bits, int(lay.spec.balanced), lay.spec.channel_axis, channels))
        buf.write(np.asarray(lay.affine.scales, dtype="<f4").tobytes())
        buf.write(np.asarray(lay.affine.zero_offsets, dtype="<i4").tobytes())
        buf.write(struct.pack("<Q", len(lay.blob.data)))
        buf.write(lay.blob.data)
    tf = m.time_features
    blocks, n_steps, dim = tf.features.shape
    buf.write(struct.pack("<I", n_steps))
    buf.write(np.asarray(tf.steps, dtype="<u4").tobytes())
    buf.write(struct.pack("<II", blocks, dim))
    buf.write(np.asarray(tf.features, dtype="<f2").tobytes())
    cfg = json.dumps(m.config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(m.tensors)))
    for name, arr in m.tensors.items():
        _put_name(buf, name)
        _put_shape(buf, arr.shape)
        buf.write(np.asarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BfqError("unexpected end of file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()

    def shape(self) -> tuple:
        (rank,) = self.unpack("<B")
        return self.unpack(f"<{rank}I") if rank else ()

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).copy()


def decode_model(data: bytes) -> PackedModel:
    if len(data) < 16 or data[:4] != MAGIC:
        raise BadMagicError("not a BFQ1 file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatchError("payload CRC32 mismatch")
    r = _Reader(body)
    r.take(8)
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        name = r.name()
        shape = tuple(r.shape())
        bits, balanced, axis, channels = r.unpack("<BBBI")
        spec = QuantSpec(bits, bool(balanced), axis)
        scales = r.array("<f4", channels).astype(np.float32)
        zeros = r.array("<i4", channels).astype(np.int64)
        (nbytes,) = r.unpack("<Q")
        n = int(np.prod(shape, dtype=np.int64))
        blob = PackedBlob(spec.levels, n, group_size(spec.levels), r.take(nbytes))
        layers.append(PackedLayer(name, shape, spec, ChannelAffine(scales, zeros), blob))
    (n_steps,) = r.unpack("<I")
    steps = r.array("<u4", n_steps).astype(np.int64)
    blocks, dim = r.unpack("<II")
    feats = r.array("<f2", blocks * n_steps * dim).astype(np.float16).reshape(blocks, n_steps, dim)
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode())
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.name()
        shape = tuple(r.shape())
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = r.array("<f4", n).astype(np.float32).reshape(shape)
    if r.pos != len(body):
        raise BfqError(f"{len(body) - r.pos} trailing bytes after payload")
    return PackedModel(layers, TimeFeatureTable(steps, feats), tensors, config, version)


def write_model(m: PackedModel, path) -> int:
    data = encode_model(m)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_model(path) -> PackedModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


def predicted_file_size(m: PackedModel) -> int:
    """Byte size of ``encode_model(m)`` computed from the layout alone."""
    size = 4 + 4 + 4
    for lay in m.layers:
        n = int(np.prod(lay.shape, dtype=np.int64))
        channels = lay.affine.scales.shape[0]
        size += 2 + len(lay.name.encode()) + 1 + 4 * len(lay.shape) + 3 + 4
        size += 8 * channels + 8 + packed_nbytes(n, lay.spec.levels)
    blocks, n_steps, dim = m.time_features.features.shape
    size += 4 + 4 * n_steps + 8 + 2 * blocks * n_steps * dim
    size += 4 + len(json.dumps(m.config, sort_keys=True).encode()) + 4
    for name, arr in m.tensors.items():
        size += 2 + len(name.encode()) + 1 + 4 * arr.ndim + 4 * arr.size
    return size + 4
