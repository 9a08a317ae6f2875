"""``lobit`` command line: teacher training, scan, planning, QAT, packing and evaluation.

Every command reads one config file and writes into the run directory
(``run.out_dir`` or ``--out``).  Artifacts::

    train-teacher  teacher.bft, teacher_metrics.csv
    scan           scan.json, scan_report.json             (needs teacher.bft)
    plan           recipe.json, plan.json                  (needs scan.json)
    qat            student_stage1.bft, qat_metrics.csv     (needs teacher.bft, recipe.json)
    finetune       student.bft, finetune_metrics.csv       (needs teacher.bft, student_stage1.bft)
    pack           model.bfq, pack.json                    (needs student.bft)
    sample         samples.csv                             (needs model.bfq)
    eval           eval.csv                                (needs teacher.bft, model.bfq)
    pipeline       all of the above in order

Seeds: each command draws from ``derive_seed(root, command, purpose)``.
Exit codes: 0 ok, 2 config or output error, 3 missing or unreadable
prerequisite, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from lobit import config as runconfig
from lobit.bitpack import BfqError, average_bits, predicted_file_size, read_model, write_model
from lobit.checkpoint import (
    CheckpointError,
    load_params,
    load_student,
    pack_student,
    save_params,
    save_student,
    unpack_model,
)
from lobit.metrics import Rng, derive_seed, mse, psnr
from lobit.qat import LOG_COLUMNS, NumericAbort, student_from_recipe, train, train_teacher
from lobit.sensitivity import (
    PrecisionRecipe,
    alignment_score,
    dumps_records,
    generate,
    plan_precision,
    records_from_json,
    run_scan,
)
from lobit.toydiff import ToyDataset, cache_time_features, ddim_timesteps, init_params, make_schedule

log = logging.getLogger("lobit")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NAN = 0, 2, 3, 4


class MissingArtifact(Exception):
    pass


class Context:
    def __init__(self, cfg: runconfig.RunConfig, out: Path, jobs: int):
        self.cfg = cfg
        self.out = out
        self.jobs = jobs
        self.data = ToyDataset(cfg.data.n_classes, cfg.data.std)
        s = cfg.schedule
        self.sched = make_schedule(s.T, s.beta_start, s.beta_end)

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise MissingArtifact(f"missing prerequisite {p}")
        return p

    def seed(self, *keys) -> int:
        return derive_seed(self.cfg.seed, *keys)

    def train_config(self, purpose: str):
        return dataclasses.replace(self.cfg.train, seed=self.seed(purpose))


# --- output helpers ----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=1) + "\n")


def read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _eval_fn(ctx: Context, teacher):
    """Generation MSE and alignment against fixed teacher samples at the eval guidance."""
    e = ctx.cfg.eval
    seed = ctx.seed("eval")
    ref, labels = generate(teacher, ctx.sched, e.samples, seed, e.guidance, e.steps)

    def fn(student):
        out, _ = generate(student.params, ctx.sched, e.samples, seed, e.guidance, e.steps,
                          weights=student.deployed_weights())
        return mse(out, ref), alignment_score(out, labels, ctx.data.modes)

    return fn


def _teacher_eval_fn(ctx: Context):
    e = ctx.cfg.eval

    def fn(params):
        out, labels = generate(params, ctx.sched, e.samples, ctx.seed("eval"), e.guidance, e.steps)
        return float("nan"), alignment_score(out, labels, ctx.data.modes)

    return fn


# --- commands ------------------------------------------------------------------------


def cmd_train_teacher(ctx: Context):
    cfg = ctx.cfg
    params = init_params(cfg.model, Rng(ctx.seed("train-teacher", "init")))
    t = cfg.teacher
    tcfg = dataclasses.replace(ctx.train_config("train-teacher"), lr=t.lr, batch=t.batch,
                               eval_every=t.eval_every)
    rows = train_teacher(params, tcfg, ctx.data, ctx.sched, t.iters, _teacher_eval_fn(ctx))
    save_params(ctx.path("teacher.bft"), params)
    write_csv(ctx.path("teacher_metrics.csv"), LOG_COLUMNS, rows)
    if rows:
        log.info("teacher alignment %.3f", rows[-1]["eval_alignment"])


def cmd_scan(ctx: Context):
    teacher = load_params(ctx.need("teacher.bft"))
    records, report = run_scan(teacher, ctx.cfg.planner, ctx.data, ctx.sched, ctx.seed("scan"), ctx.jobs)
    with open(ctx.path("scan.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_records(records) + "\n")
    write_json(ctx.path("scan_report.json"), report)


def cmd_plan(ctx: Context):
    records = records_from_json(read_json(ctx.need("scan.json")))
    mc = ctx.cfg.model
    sizes = mc.layer_sizes()
    fixed = {n: sizes[n] for n in mc.fixed_layers()}
    recipe, info = plan_precision(records, ctx.cfg.planner, fixed, mc.time_proj_layers())
    write_json(ctx.path("recipe.json"), recipe.to_json())
    write_json(ctx.path("plan.json"), info)
    log.info("planned average %.4f bits", info["average_bits"])


def cmd_qat(ctx: Context):
    teacher = load_params(ctx.need("teacher.bft"))
    recipe = PrecisionRecipe.from_json(read_json(ctx.need("recipe.json")))
    student = student_from_recipe(teacher, recipe)
    fn = _eval_fn(ctx, teacher)
    init = fn(student)
    rows = [{"stage": 1, "iter": 0, "loss_noise": float("nan"), "loss_feat": float("nan"),
             "eval_mse": init[0], "eval_alignment": init[1]}]
    rows += train(teacher, student, ctx.train_config("qat"), ctx.data, ctx.sched, stages=(1,), eval_fn=fn)
    save_student(ctx.path("student_stage1.bft"), student)
    write_csv(ctx.path("qat_metrics.csv"), LOG_COLUMNS, rows)


def cmd_finetune(ctx: Context):
    teacher = load_params(ctx.need("teacher.bft"))
    student = load_student(ctx.need("student_stage1.bft"))
    fn = _eval_fn(ctx, teacher)
    rows = train(teacher, student, ctx.train_config("finetune"), ctx.data, ctx.sched, stages=(2,), eval_fn=fn)
    save_student(ctx.path("student.bft"), student)
    write_csv(ctx.path("finetune_metrics.csv"), LOG_COLUMNS, rows)


def cmd_pack(ctx: Context):
    student = load_student(ctx.need("student.bft"))
    e = ctx.cfg.eval
    table = cache_time_features(student.params, ddim_timesteps(ctx.sched.T, e.steps), ctx.sched.T)
    packed = pack_student(student, table, {"recipe": student.recipe.to_json()})
    size = write_model(packed, ctx.path("model.bfq"))
    mc = student.params.config
    recipe = student.recipe
    n_tf = table.scalar_count
    info = {
        "file_bytes": size,
        "predicted_bytes": predicted_file_size(packed),
        "time_feature_scalars": n_tf,
        # every linear weight in the denominator, time features priced at 16 bits
        "average_bits_with_time_features": average_bits(recipe, mc.layer_sizes(), n_tf),
        "average_bits_planned_layers": average_bits(
            recipe, {n: s for n, s in mc.layer_sizes().items() if n not in recipe.excluded}, 0),
    }
    write_json(ctx.path("pack.json"), info)
    if size != info["predicted_bytes"]:
        raise RuntimeError(f"packed size {size} differs from prediction {info['predicted_bytes']}")


def _load_packed(ctx: Context):
    try:
        return unpack_model(read_model(ctx.need("model.bfq")))
    except BfqError as exc:
        raise MissingArtifact(f"unreadable {ctx.path('model.bfq')}: {exc}") from None


def cmd_sample(ctx: Context):
    params, table = _load_packed(ctx)
    e = ctx.cfg.eval
    out, labels = generate(params, ctx.sched, e.samples, ctx.seed("sample"), e.guidance, e.steps,
                           time_table=table)
    rows = [{"x": float(a), "y": float(b), "label": int(c)} for (a, b), c in zip(out, labels)]
    write_csv(ctx.path("samples.csv"), ("x", "y", "label"), rows)


def cmd_eval(ctx: Context):
    teacher = load_params(ctx.need("teacher.bft"))
    params, table = _load_packed(ctx)
    e = ctx.cfg.eval
    seed = ctx.seed("eval")
    rows = []
    for w in e.cfg_scales:
        ref, labels = generate(teacher, ctx.sched, e.samples, seed, w, e.steps)
        out, _ = generate(params, ctx.sched, e.samples, seed, w, e.steps, time_table=table)
        rows.append({
            "cfg": float(w),
            "mse": mse(out, ref),
            "psnr": psnr(out, ref, e.psnr_range),
            "alignment": alignment_score(out, labels, ctx.data.modes),
            "teacher_alignment": alignment_score(ref, labels, ctx.data.modes),
        })
    write_csv(ctx.path("eval.csv"), ("cfg", "mse", "psnr", "alignment", "teacher_alignment"), rows)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "scan": cmd_scan,
    "plan": cmd_plan,
    "qat": cmd_qat,
    "finetune": cmd_finetune,
    "pack": cmd_pack,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


STAGES = tuple(COMMANDS)


def cmd_pipeline(ctx: Context):
    for name in STAGES:
        t0 = time.perf_counter()
        COMMANDS[name](ctx)
        log.info("%s done in %.1f s", name, time.perf_counter() - t0)


COMMANDS["pipeline"] = cmd_pipeline


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lobit", description="Low-bit quantization lab for a toy diffusion model.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="INI config file")
    ap.add_argument("--seed", type=int, help="override run.seed")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for scan")
    ap.add_argument("--out", help="override run.out_dir")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = runconfig.load(args.config)
        if args.seed is not None:
            cfg = runconfig.with_seed(cfg, args.seed)
        if args.jobs < 1:
            raise runconfig.ConfigError("--jobs must be >= 1")
        out = Path(args.out or cfg.run.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise runconfig.ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
        ctx = Context(cfg, out, args.jobs)
        with threadpool_limits(1):
            COMMANDS[args.command](ctx)
    except runconfig.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericAbort as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NAN
    except OSError as exc:
        log.error("cannot write output: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
