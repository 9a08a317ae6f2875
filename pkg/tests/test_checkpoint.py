import numpy as np
import pytest

from lobit.bitpack import decode_model, encode_model
from lobit.checkpoint import (
    CheckpointError,
    decode_archive,
    encode_archive,
    load_params,
    load_student,
    pack_student,
    save_params,
    save_student,
    unpack_model,
)
from lobit.metrics import Rng
from lobit.qat import TrainConfig, make_student, train
from lobit.sensitivity import PrecisionRecipe
from lobit.toydiff import ModelConfig, ToyDataset, cache_time_features, ddim_timesteps, init_params, make_schedule

SMALL = ModelConfig(n_classes=3, hidden=8, n_blocks=2, emb_dim=6)


def test_archive_roundtrip_and_crc():
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64),
         "c": np.float64(2.5) * np.ones(1), "d": np.ones((0, 4), dtype=np.float16)}
    data = encode_archive(t, {"x": 1})
    back, meta = decode_archive(data)
    assert meta == {"x": 1}
    for k in t:
        assert back[k].dtype == t[k].dtype and np.array_equal(back[k], t[k])
    for i in (0, 9, len(data) // 2, len(data) - 1):
        bad = bytearray(data)
        bad[i] ^= 0x10
        with pytest.raises(CheckpointError):
            decode_archive(bytes(bad))
    with pytest.raises(CheckpointError):
        encode_archive({"z": np.zeros(2, dtype=np.int8)}, {})


def test_teacher_roundtrip(tmp_path):
    p = init_params(SMALL, Rng(0))
    save_params(tmp_path / "t.bft", p)
    q = load_params(tmp_path / "t.bft")
    assert q.config == SMALL
    assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)


def trained_student():
    p = init_params(SMALL, Rng(0))
    recipe = PrecisionRecipe({"head": 2, "blocks.0.fc1": 1}, True, ["in_proj", "out_proj"], [])
    st = make_student(p, recipe.bits, recipe.fixed8, recipe=recipe)
    cfg = TrainConfig(lr=1e-3, batch=8, iters_stage1=2, iters_stage2=0, seed=1)
    train(p, st, cfg, ToyDataset(3), make_schedule(), stages=(1,))
    return p, st, cfg


def test_student_roundtrip_resumes_identically(tmp_path):
    p, st, cfg = trained_student()
    save_student(tmp_path / "s.bft", st)
    back = load_student(tmp_path / "s.bft")
    assert back.recipe == st.recipe and back.specs == st.specs and back.opt.t == st.opt.t
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "s.bft")
    for s in (st, back):
        train(p, s, cfg, ToyDataset(3), make_schedule(), stages=(2,))
    for k in st.params.tensors:
        assert np.array_equal(st.params.tensors[k], back.params.tensors[k])


def test_packed_weights_equal_deployed_weights():
    _, st, _ = trained_student()
    table = cache_time_features(st.params, ddim_timesteps(1000, 5))
    m = decode_model(encode_model(pack_student(st, table, {"note": "x"})))
    params, tf = unpack_model(m)
    deployed = st.deployed_weights()
    for name, w in deployed.items():
        assert params.weight(name).dtype == np.float32
        assert np.array_equal(params.weight(name), w), name
    assert "blocks.0.time_proj.weight" not in params.tensors
    assert "blocks.0.time_proj.bias" not in params.tensors
    assert np.array_equal(params.weight("blocks.1.fc2"), st.params.weight("blocks.1.fc2"))
    assert np.array_equal(tf.features, table.features.astype(np.float16).astype(np.float32))
