"""Checkpoint files and conversion between training state and packed models.

``.bft`` layout (little endian)::

    b"BFT1" | u32 version | u32 meta length | meta JSON |
    u32 tensor count | per tensor: u16 name length, name, u8 dtype code,
    u8 rank, u32 dims..., raw data | u32 CRC32 of everything before it

Teacher checkpoints hold the parameter tensors; student checkpoints add
per-layer scales and zero offsets, optimizer moments, and the recipe in
the meta block.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from lobit.bitpack import (
    PackedLayer,
    PackedModel,
    TimeFeatureTable,
    pack_codes,
    unpack_codes,
)
from lobit.qat import AdamW, StudentState
from lobit.quantizer import ChannelAffine, QuantizedLayer, QuantSpec, dequantize, quantize
from lobit.sensitivity import PrecisionRecipe
from lobit.toydiff.model import DenoiserParams, ModelConfig

MAGIC = b"BFT1"
VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<f2"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def encode_archive(tensors: dict, meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_archive(data: bytes) -> tuple[dict, dict]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a BFT1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC32 mismatch")
    pos = 4
    version, n = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported")
    pos += 8
    meta = json.loads(body[pos : pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + klen].decode()
        pos += klen
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body[pos : pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, meta


def write_archive(path, tensors: dict, meta: dict) -> int:
    data = encode_archive(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_archive(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode_archive(fh.read())


def _model_meta(cfg: ModelConfig) -> dict:
    return {f: getattr(cfg, f) for f in ("n_classes", "hidden", "n_blocks", "emb_dim", "data_dim")}


# --- teacher -----------------------------------------------------------------


def save_params(path, params: DenoiserParams, extra: dict | None = None) -> int:
    meta = {"kind": "teacher", "model": _model_meta(params.config), **(extra or {})}
    return write_archive(path, params.tensors, meta)


def load_params(path) -> DenoiserParams:
    tensors, meta = read_archive(path)
    if meta.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint")
    return DenoiserParams(ModelConfig(**meta["model"]), tensors)


# --- student -------------------------------------------------------------------


def save_student(path, student: StudentState, extra: dict | None = None) -> int:
    tensors = {f"param/{k}": v for k, v in student.params.tensors.items()}
    for name, aff in student.affines.items():
        tensors[f"scale/{name}"] = aff.scales
        tensors[f"zero/{name}"] = aff.zero_offsets.astype(np.int64)
    for key, m in student.opt.m.items():
        tensors[f"adam_m/{key}"] = m
        tensors[f"adam_v/{key}"] = student.opt.v[key]
    meta = {
        "kind": "student",
        "model": _model_meta(student.params.config),
        "specs": {n: [s.bits, s.balanced] for n, s in student.specs.items()},
        "recipe": student.recipe.to_json() if student.recipe is not None else None,
        "adam_t": student.opt.t,
        **(extra or {}),
    }
    return write_archive(path, tensors, meta)


def load_student(path) -> StudentState:
    tensors, meta = read_archive(path)
    if meta.get("kind") != "student":
        raise CheckpointError(f"{path} is not a student checkpoint")
    params = DenoiserParams(
        ModelConfig(**meta["model"]),
        {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")},
    )
    specs, affines = {}, {}
    for name, (bits, balanced) in meta["specs"].items():
        specs[name] = QuantSpec(int(bits), bool(balanced))
        affines[name] = ChannelAffine(tensors[f"scale/{name}"], tensors[f"zero/{name}"])
    opt = AdamW()
    opt.t = int(meta["adam_t"])
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v
    recipe = PrecisionRecipe.from_json(meta["recipe"]) if meta["recipe"] is not None else None
    return StudentState(params, specs, affines, recipe, opt=opt)


# --- packed deployment -------------------------------------------------------------


def pack_student(student: StudentState, time_table: TimeFeatureTable, config: dict) -> PackedModel:
    """Quantize every student layer into a packed model.

    Time projections are dropped (the table replaces them); the remaining
    unquantized tensors (biases, class embedding) go into the extras section.
    """
    p = student.params
    layers = []
    for name in p.config.linear_layers():
        if name not in student.specs:
            continue
        spec, aff = student.specs[name], student.affines[name]
        q = quantize(p.weight(name), spec, aff, name)
        layers.append(PackedLayer(name, tuple(q.codes.shape), spec, aff, pack_codes(q.codes, spec.levels)))
    drop = set(p.config.time_proj_layers())
    tensors = {
        k: v
        for k, v in p.tensors.items()
        if k.rsplit(".", 1)[0] not in drop and not (k.endswith(".weight") and k[:-7] in student.specs)
    }
    meta = dict(config, model=_model_meta(p.config))
    return PackedModel(layers, time_table, tensors, meta)


def unpack_model(m: PackedModel) -> tuple[DenoiserParams, TimeFeatureTable]:
    """Parameters with dequantized weights and a float32 time table, ready to sample."""
    cfg = ModelConfig(**m.config["model"])
    tensors = dict(m.tensors)
    for lay in m.layers:
        q = QuantizedLayer(unpack_codes(lay.blob).reshape(lay.shape), lay.spec, lay.affine, lay.name)
        tensors[f"{lay.name}.weight"] = dequantize(q)
    tf = m.time_features
    return DenoiserParams(cfg, tensors), TimeFeatureTable(tf.steps, tf.features.astype(np.float32))

