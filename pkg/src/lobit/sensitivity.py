"""Per-layer sensitivity scan and mixed-precision planning.

Every quantizable layer is quantized alone to 1, 2 and 3 bits (balanced,
alternating-optimization scales), briefly distilled, and compared with the
teacher on generated samples.  The planner turns the resulting grid into a
bit-width recipe: layer-size-aware score ``S = mse * N**-eta``, smallest
width under a threshold (else ``default_bits``), then extra bits for layers
whose 3-bit alignment drop is in the top percentiles.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from lobit.bitpack import average_bits
from lobit.metrics import derive_seed, mse, pearson, psnr
from lobit.qat import TrainConfig, make_student, train
from lobit.toydiff.data import ToyDataset
from lobit.toydiff.model import DenoiserParams
from lobit.toydiff.sampler import ddim_sample
from lobit.toydiff.schedule import NoiseSchedule

log = logging.getLogger(__name__)

METRICS = ("mse", "psnr", "alignment_drop")


@dataclass
class SensitivityRecord:
    layer: str
    bits: int
    mse: float
    psnr: float
    alignment_drop: float
    params: int


@dataclass
class PrecisionRecipe:
    bits: dict
    balanced: bool = True
    fixed8: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {name: int(b) for name, b in self.bits.items()}
        out.update(balanced=self.balanced, fixed8=list(self.fixed8), excluded=list(self.excluded))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PrecisionRecipe":
        reserved = {"balanced", "fixed8", "excluded"}
        bits = {k: int(v) for k, v in obj.items() if k not in reserved}
        return cls(bits, bool(obj.get("balanced", True)), list(obj.get("fixed8", [])),
                   list(obj.get("excluded", [])))


@dataclass
class PlannerConfig:
    eta: float = 0.3
    s_threshold: float | None = None
    target_avg_bits: float | None = None
    bump_percentiles: tuple[float, ...] = (90.0, 95.0, 98.0)
    default_bits: int = 4
    candidate_bits: tuple[int, ...] = (1, 2, 3)
    max_bits: int = 8
    target_tolerance: float = 0.02
    qat_iters: int = 100
    qat_lr: float = 1e-3
    qat_batch: int = 128
    eval_samples: int = 100
    eval_steps: int = 50
    guidance: float = 7.5
    full_model: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        p = list(self.bump_percentiles)
        if any(b <= a for a, b in zip(p, p[1:])):
            raise ValueError("bump percentiles must be strictly increasing")


class IncompleteGridError(ValueError):
    pass


# ---------------------------------------------------------------------------
# alignment proxy and generation
# ---------------------------------------------------------------------------


def alignment_score(samples, labels, modes) -> float:
    """Fraction of samples whose nearest mode is their conditioning class."""
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if samples.size == 0:
        raise ValueError("alignment of an empty sample set")
    d = np.sum((samples[:, None, :] - np.asarray(modes)[None, :, :]) ** 2, axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == labels))


def eval_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def generate(params: DenoiserParams, sched: NoiseSchedule, n: int, seed: int, guidance: float,
             steps: int = 50, weights=None, time_table=None):
    labels = eval_labels(n, params.config.n_classes)
    xs = ddim_sample(params, sched, labels, steps, guidance, seed, weights, time_table)
    return xs, labels


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def candidate_seed(base_seed: int, layer_index: int, bits: int) -> int:
    return derive_seed(base_seed, layer_index, bits)


def scan_candidate(teacher: DenoiserParams, layer: str, bits: int, cfg: PlannerConfig,
                   seed: int, data: ToyDataset, sched: NoiseSchedule) -> SensitivityRecord:
    layers = teacher.config.quantizable_layers()
    if layer not in layers:
        raise KeyError(f"{layer!r} is not a quantizable layer")
    cand = candidate_seed(seed, layers.index(layer), bits)
    student = make_student(teacher, {layer: bits})
    if not cfg.full_model:
        student.trainable = {f"{layer}.weight", f"{layer}.bias", f"{layer}.scale"}
    tcfg = TrainConfig(lr=cfg.qat_lr, batch=cfg.qat_batch, iters_stage1=cfg.qat_iters,
                       iters_stage2=0, lam=0.0, seed=cand, eval_every=max(cfg.qat_iters, 1))
    if cfg.qat_iters > 0:
        train(teacher, student, tcfg, data, sched, stages=(1,))
    eval_seed = derive_seed(cand, "eval")
    ref, labels = generate(teacher, sched, cfg.eval_samples, eval_seed, cfg.guidance, cfg.eval_steps)
    out, _ = generate(student.params, sched, cfg.eval_samples, eval_seed, cfg.guidance,
                      cfg.eval_steps, weights=student.deployed_weights())
    drop = alignment_score(ref, labels, data.modes) - alignment_score(out, labels, data.modes)
    return SensitivityRecord(layer, int(bits), mse(out, ref), psnr(out, ref, 2.0), drop,
                             int(teacher.weight(layer).size))


_JOB_STATE: dict = {}


def _init_job(teacher, cfg, seed, data, sched):
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    _JOB_STATE.update(teacher=teacher, cfg=cfg, seed=seed, data=data, sched=sched)


def _run_job(key):
    s = _JOB_STATE
    layer, bits = key
    try:
        return scan_candidate(s["teacher"], layer, bits, s["cfg"], s["seed"], s["data"], s["sched"])
    except Exception as exc:
        raise RuntimeError(f"scan candidate {layer} @ {bits} bits failed: {exc}") from exc


def run_scan(teacher: DenoiserParams, cfg: PlannerConfig, data: ToyDataset, sched: NoiseSchedule,
             seed: int, jobs: int = 1):
    """All (bits, layer) candidates; returns (records, correlation report)."""
    keys = [(layer, b) for b in cfg.candidate_bits for layer in teacher.config.quantizable_layers()]
    if jobs <= 1:
        _init_job(teacher, cfg, seed, data, sched)
        records = [_run_job(k) for k in keys]
    else:
        import multiprocessing as mp

        ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
        with ProcessPoolExecutor(jobs, mp_context=ctx, initializer=_init_job,
                                 initargs=(teacher, cfg, seed, data, sched)) as pool:
            records = list(pool.map(_run_job, keys))
    return records, correlation_report(records, cfg.candidate_bits)


def records_to_json(records) -> list:
    return [asdict(r) for r in records]


def records_from_json(rows) -> list:
    return [SensitivityRecord(**row) for row in rows]


def dumps_records(records) -> str:
    return json.dumps(records_to_json(records), indent=1, allow_nan=True)


# ---------------------------------------------------------------------------
# correlation report
# ---------------------------------------------------------------------------


def _grid(records, bits_set=(1, 2, 3)):
    layers = list(dict.fromkeys(r.layer for r in records))
    cell = {(r.layer, r.bits): r for r in records}
    missing = [(l, b) for l in layers for b in bits_set if (l, b) not in cell]
    if missing:
        raise IncompleteGridError("missing cells: " + ", ".join(f"{l}@{b}" for l, b in missing))
    return layers, cell


def _abs_r(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        return None
    try:
        return abs(pearson(x, y))
    except ValueError:
        return None


def correlation_report(records, bits_set=(1, 2, 3)) -> dict:
    """|Pearson r| between metrics at fixed bits, and between bit widths at fixed metric.

    Undefined correlations (a constant or non-finite column) are None.
    """
    layers, cell = _grid(records, bits_set)
    col = {(m, b): [getattr(cell[(l, b)], m) for l in layers] for m in METRICS for b in bits_set}
    between_metrics = {}
    for b in bits_set:
        row = {}
        for i, m1 in enumerate(METRICS):
            for m2 in METRICS[i + 1 :]:
                row[f"{m1}~{m2}"] = _abs_r(col[(m1, b)], col[(m2, b)])
        between_metrics[str(b)] = row
    between_bits = {}
    for m in METRICS:
        row = {}
        for i, b1 in enumerate(bits_set):
            for b2 in bits_set[i + 1 :]:
                row[f"{b1}v{b2}"] = _abs_r(col[(m, b1)], col[(m, b2)])
        between_bits[m] = row
    return {"layers": len(layers), "between_metrics": between_metrics, "between_bits": between_bits}


# ---------------------------------------------------------------------------
# planner
# ---------------------------------------------------------------------------


def sensitivity_scores(records, eta: float) -> dict:
    return {(r.layer, r.bits): r.mse * float(r.params) ** (-eta) for r in records}


def _base_bits(layers, scores, threshold, candidate_bits, default_bits):
    out = {}
    for layer in layers:
        out[layer] = default_bits
        for b in sorted(candidate_bits, reverse=True):
            if scores[(layer, b)] < threshold:
                out[layer] = b
    return out


def percentile_bumps(layers, cell, percentiles=(90.0, 95.0, 98.0), top_bits: int = 3) -> dict:
    """+1 bit for every percentile of the top-width alignment drop a layer exceeds."""
    drops = np.array([cell[(l, top_bits)].alignment_drop for l in layers], dtype=np.float64)
    cuts = [np.percentile(drops, p) for p in percentiles]
    return {l: int(sum(d > c for c in cuts)) for l, d in zip(layers, drops)}


def plan_precision(records, planner: PlannerConfig, fixed_sizes: dict | None = None,
                   excluded=()) -> tuple[PrecisionRecipe, dict]:
    """Bit recipe from a complete record grid.

    With ``target_avg_bits`` the threshold is searched over the distinct
    score values so that the recipe's average bits (planned layers plus
    ``fixed_sizes`` at 8 bits) comes closest to the target.  Returns the
    recipe and a summary dict (threshold used, average bits).
    """
    if (planner.s_threshold is None) == (planner.target_avg_bits is None):
        raise ValueError("set exactly one of s_threshold and target_avg_bits")
    bits_set = tuple(planner.candidate_bits)
    layers, cell = _grid(records, bits_set)
    scores = sensitivity_scores(records, planner.eta)
    bumps = percentile_bumps(layers, cell, planner.bump_percentiles, max(bits_set))
    fixed_sizes = dict(fixed_sizes or {})
    sizes = {l: cell[(l, bits_set[0])].params for l in layers}
    sizes.update(fixed_sizes)

    def build(threshold):
        base = _base_bits(layers, scores, threshold, bits_set, planner.default_bits)
        bits = {l: min(base[l] + bumps[l], planner.max_bits) for l in layers}
        return PrecisionRecipe(bits, True, sorted(fixed_sizes), list(excluded))

    def price(recipe):
        return average_bits(recipe, sizes, 0)

    if planner.s_threshold is not None:
        recipe = build(planner.s_threshold)
        return recipe, {"s_threshold": planner.s_threshold, "average_bits": price(recipe)}

    values = sorted(set(scores.values()))
    # thresholds[k] admits exactly the k smallest distinct scores
    thresholds = [values[0]] + [float(np.nextafter(v, math.inf)) for v in values]
    target = planner.target_avg_bits
    lo, hi = 0, len(thresholds) - 1
    if price(build(thresholds[hi])) > target:
        best = hi
    else:
        # smallest k with price <= target; price is non-increasing in k
        while lo < hi:
            mid = (lo + hi) // 2
            if price(build(thresholds[mid])) <= target:
                hi = mid
            else:
                lo = mid + 1
        best = lo
        if lo > 0 and abs(price(build(thresholds[lo - 1])) - target) < abs(price(build(thresholds[lo])) - target):
            best = lo - 1
    recipe = build(thresholds[best])
    avg = price(recipe)
    if abs(avg - target) > planner.target_tolerance:
        log.warning("closest reachable average %.4f bits misses target %.4f by more than %.3f",
                    avg, target, planner.target_tolerance)
    return recipe, {"s_threshold": thresholds[best], "average_bits": avg}
