import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from lobit import cli
from lobit.bitpack import read_model
from lobit.checkpoint import load_params, save_params

SMOKE = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.ini")
ARTIFACTS = [
    "teacher.bft", "teacher_metrics.csv", "scan.json", "scan_report.json", "recipe.json", "plan.json",
    "student_stage1.bft", "qat_metrics.csv", "student.bft", "finetune_metrics.csv", "model.bfq",
    "pack.json", "samples.csv", "eval.csv",
]


def run(*args):
    return cli.main([*args, "-q"])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run("pipeline", "--config", SMOKE, "--out", str(out)) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_writes_all_artifacts(smoke_run):
    for name in ARTIFACTS:
        assert (smoke_run / name).is_file(), name


def test_eval_has_eight_guidance_rows(smoke_run):
    rows = read_rows(smoke_run / "eval.csv")
    assert [float(r["cfg"]) for r in rows] == [2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5]
    assert set(rows[0]) == {"cfg", "mse", "psnr", "alignment", "teacher_alignment"}


def test_metrics_columns(smoke_run):
    for name in ("teacher_metrics.csv", "qat_metrics.csv", "finetune_metrics.csv"):
        with open(smoke_run / name) as fh:
            assert fh.readline().strip() == "stage,iter,loss_noise,loss_feat,eval_mse,eval_alignment"


def test_pack_size_matches_prediction(smoke_run):
    info = json.loads((smoke_run / "pack.json").read_text())
    assert info["file_bytes"] == info["predicted_bytes"] == (smoke_run / "model.bfq").stat().st_size
    m = read_model(smoke_run / "model.bfq")
    recipe = json.loads((smoke_run / "recipe.json").read_text())
    assert {lay.name for lay in m.layers} == set(recipe) - {"balanced", "fixed8", "excluded"} | set(recipe["fixed8"])
    assert not any("time_proj" in k for k in m.tensors)


def test_scan_and_recipe_json_shapes(smoke_run):
    recs = json.loads((smoke_run / "scan.json").read_text())
    assert len(recs) == 3 * 7  # cond_proj.0/1, 2 blocks x (fc1, fc2), head
    assert set(recs[0]) == {"layer", "bits", "mse", "psnr", "alignment_drop", "params"}
    recipe = json.loads((smoke_run / "recipe.json").read_text())
    assert recipe["fixed8"] == ["in_proj", "out_proj"]
    assert sorted(recipe["excluded"]) == ["blocks.0.time_proj", "blocks.1.time_proj"]


def test_sample_repeatable(smoke_run, tmp_path):
    first = (smoke_run / "samples.csv").read_bytes()
    assert run("sample", "--config", SMOKE, "--out", str(smoke_run)) == 0
    assert (smoke_run / "samples.csv").read_bytes() == first
    assert run("sample", "--config", SMOKE, "--out", str(smoke_run), "--seed", "5") == 0
    assert (smoke_run / "samples.csv").read_bytes() != first
    assert run("sample", "--config", SMOKE, "--out", str(smoke_run)) == 0


def test_teacher_bytes_deterministic(smoke_run, tmp_path):
    assert run("train-teacher", "--config", SMOKE, "--out", str(tmp_path)) == 0
    assert (tmp_path / "teacher.bft").read_bytes() == (smoke_run / "teacher.bft").read_bytes()
    assert (tmp_path / "teacher_metrics.csv").read_bytes() == (smoke_run / "teacher_metrics.csv").read_bytes()


def test_missing_key_exit_code(tmp_path, caplog):
    text = Path(SMOKE).read_text().replace("beta_alpha = 3.0\n", "")
    cfg = tmp_path / "c.ini"
    cfg.write_text(text)
    with caplog.at_level(logging.ERROR):
        assert run("plan", "--config", str(cfg), "--out", str(tmp_path)) == 2
    assert "train.beta_alpha" in caplog.text


def test_missing_config_file(tmp_path):
    assert run("plan", "--config", str(tmp_path / "none.ini")) == 2


@pytest.mark.parametrize(
    "command,artifact",
    [("scan", "teacher.bft"), ("plan", "scan.json"), ("qat", "teacher.bft"), ("finetune", "teacher.bft"),
     ("pack", "student.bft"), ("sample", "model.bfq"), ("eval", "teacher.bft")],
)
def test_missing_prerequisite(tmp_path, caplog, command, artifact):
    with caplog.at_level(logging.ERROR):
        assert run(command, "--config", SMOKE, "--out", str(tmp_path)) == 3
    assert artifact in caplog.text


def test_corrupt_prerequisite(tmp_path, smoke_run):
    data = bytearray((smoke_run / "model.bfq").read_bytes())
    data[40] ^= 0xFF
    (tmp_path / "model.bfq").write_bytes(bytes(data))
    assert run("sample", "--config", SMOKE, "--out", str(tmp_path)) == 3


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("train-teacher", "--config", SMOKE, "--out", str(blocker / "sub")) == 2


def test_nan_exit_code(tmp_path, smoke_run, caplog):
    teacher = load_params(smoke_run / "teacher.bft")
    teacher.tensors["out_proj.bias"][:] = np.nan
    save_params(tmp_path / "teacher.bft", teacher)
    (tmp_path / "recipe.json").write_bytes((smoke_run / "recipe.json").read_bytes())
    with caplog.at_level(logging.ERROR):
        assert run("qat", "--config", SMOKE, "--out", str(tmp_path)) == 4
    assert "non-finite" in caplog.text


def test_bad_jobs(tmp_path):
    assert run("scan", "--config", SMOKE, "--out", str(tmp_path), "--jobs", "0") == 2


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus", "--config", SMOKE])
    assert exc.value.code == 2
