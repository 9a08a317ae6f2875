"""Quantization-aware training of the toy denoiser.

Stage I distils a full-precision teacher into the quantized student (noise
matching plus lambda-weighted block-feature matching, condition dropping with
probability ``p_drop``, timesteps drawn from Beta(alpha, beta)).  Stage II
fine-tunes the student against the true injected noise.  The student keeps
full-precision latent weights; every forward uses their fake-quantized copy
and gradients come back through the straight-through estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from lobit.metrics import Rng, derive_seed
from lobit.quantizer import (
    SCALE_FLOOR,
    ChannelAffine,
    QuantSpec,
    alt_opt_init,
    fake_quantize,
    minmax_init,
    ste_backward,
)
from lobit.toydiff.data import ToyDataset
from lobit.toydiff.model import DenoiserParams, denoiser_backward, denoiser_forward
from lobit.toydiff.schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Raised when a loss turns non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 256
    iters_stage1: int = 1000
    iters_stage2: int = 1000
    lam: float = 0.01
    p_drop: float = 0.1
    beta_alpha: float = 3.0
    beta_beta: float = 1.0
    seed: int = 1024
    norm: str = "l2"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_scale: bool = True
    eval_every: int = 100

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ValueError("beta parameters must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.norm not in ("l2", "l1"):
            raise ValueError(f"norm must be 'l2' or 'l1', got {self.norm!r}")


# ---------------------------------------------------------------------------
# student state
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; moments kept in float32."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, decay_keys=()):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for key in sorted(grads):
            g = np.asarray(grads[key], dtype=np.float32)
            p = params[key]
            m = self.m.setdefault(key, np.zeros(p.shape, dtype=np.float32))
            v = self.v.setdefault(key, np.zeros(p.shape, dtype=np.float32))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if key in decay_keys:
                upd = upd + self.weight_decay * p
            p -= (lr * upd).astype(p.dtype)


@dataclass
class StudentState:
    """Latent weights, per-layer quantizers and optimizer state.

    ``trainable`` limits updates to the listed parameter keys (tensor names
    plus ``<layer>.scale``); None trains everything.
    """

    params: DenoiserParams
    specs: dict = field(default_factory=dict)
    affines: dict = field(default_factory=dict)
    recipe: object = None
    trainable: set | None = None
    opt: AdamW = field(default_factory=AdamW)

    def deployed_weights(self) -> dict:
        return {
            name: fake_quantize(self.params.weight(name), spec, self.affines[name])
            for name, spec in self.specs.items()
        }

    def parameter_refs(self) -> dict:
        refs = dict(self.params.tensors)
        for name, aff in self.affines.items():
            refs[f"{name}.scale"] = aff.scales
        return refs

    def copy(self) -> "StudentState":
        st = StudentState(
            self.params.copy(),
            dict(self.specs),
            {k: a.copy() for k, a in self.affines.items()},
            self.recipe,
            None if self.trainable is None else set(self.trainable),
        )
        st.opt.m = {k: v.copy() for k, v in self.opt.m.items()}
        st.opt.v = {k: v.copy() for k, v in self.opt.v.items()}
        st.opt.t = self.opt.t
        return st


def quantize_layer_init(w, spec: QuantSpec, method: str = "altopt", iters: int = 10) -> ChannelAffine:
    init = minmax_init(w, spec)
    if method == "minmax":
        return init
    if method != "altopt":
        raise ValueError(f"unknown init method {method!r}")
    return alt_opt_init(w, spec, init, iters)


def make_student(teacher: DenoiserParams, bits: dict, fixed8=(), balanced: bool = True,
                 init: str = "altopt", recipe=None, opt: AdamW | None = None) -> StudentState:
    """Copy the teacher and attach quantizers.

    ``bits`` maps layer -> planned width (balanced if requested); layers in
    ``fixed8`` get 8-bit unbalanced Min-Max quantizers.
    """
    params = teacher.copy()
    specs, affines = {}, {}
    for name, b in bits.items():
        specs[name] = QuantSpec(int(b), balanced)
        affines[name] = quantize_layer_init(params.weight(name), specs[name], init)
    for name in fixed8:
        specs[name] = QuantSpec(8, False)
        affines[name] = minmax_init(params.weight(name), specs[name])
    return StudentState(params, specs, affines, recipe, opt=opt or AdamW())


def student_from_recipe(teacher: DenoiserParams, recipe, init: str = "altopt") -> StudentState:
    return make_student(teacher, recipe.bits, recipe.fixed8, recipe.balanced, init, recipe)


# ---------------------------------------------------------------------------
# batches and losses
# ---------------------------------------------------------------------------


def beta_timestep_sample(cfg: TrainConfig, rng: Rng, T: int, n: int | None = None):
    """t = min(floor(u T), T - 1) with u ~ Beta(alpha, beta)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    u = rng.beta(cfg.beta_alpha, cfg.beta_beta, () if n is None else (n,))
    t = np.minimum(np.floor(u * T).astype(np.int64), T - 1)
    return int(t) if n is None else t


@dataclass
class NoisyBatch:
    x: np.ndarray
    c: np.ndarray  # conditions after dropping
    dropped: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z: np.ndarray


def draw_noisy_batch(x, c, sched: NoiseSchedule, cfg: TrainConfig, rng: Rng, null_class: int,
                     uniform_t: bool = False) -> NoisyBatch:
    n = len(x)
    if uniform_t:
        t = rng.integers(sched.T, n)
    else:
        t = beta_timestep_sample(cfg, rng, sched.T, n)
    eps = rng.normal((n, x.shape[1]))
    dropped = rng.uniform(n) < cfg.p_drop
    c = np.where(dropped, null_class, np.asarray(c, dtype=np.int64))
    z = forward_diffuse(x, t, eps, sched)
    return NoisyBatch(np.asarray(x), c, dropped, t, eps, z)


def _match(pred, target, norm: str):
    """Per-element mean distance and its gradient w.r.t. pred."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.size
    if norm == "l2":
        return float(np.mean(diff**2)), 2.0 * diff / n
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


@dataclass
class LossResult:
    loss: float
    loss_noise: float
    loss_feat: float
    grads: dict


def _student_grads(student: StudentState, cache, d_eps, d_acts, grad_scale: bool) -> dict:
    raw = denoiser_backward(student.params, cache, d_eps, d_acts)
    grads = {}
    for key, g in raw.items():
        layer = key[: -len(".weight")] if key.endswith(".weight") else None
        if layer in student.specs:
            gw, gs = ste_backward(g, student.params.weight(layer), student.specs[layer],
                                  student.affines[layer], grad_scale)
            grads[key] = gw
            grads[f"{layer}.scale"] = gs
        else:
            grads[key] = g
    if student.trainable is not None:
        grads = {k: v for k, v in grads.items() if k in student.trainable}
    return grads


def _student_forward(student: StudentState, batch: NoisyBatch):
    return denoiser_forward(student.params, batch.z, batch.c, t=batch.t,
                            weights=student.deployed_weights())


def stage1_loss(teacher: DenoiserParams, student: StudentState, batch: NoisyBatch,
                cfg: TrainConfig, lam: float | None = None) -> LossResult:
    """Distillation loss: noise match + lam * sum over blocks of feature match."""
    lam = cfg.lam if lam is None else lam
    eps_t, acts_t, _ = denoiser_forward(teacher, batch.z, batch.c, t=batch.t)
    eps_s, acts_s, cache = _student_forward(student, batch)
    loss_noise, d_eps = _match(eps_s, eps_t, cfg.norm)
    loss_feat = 0.0
    d_acts = None
    if lam > 0:
        d_acts = []
        for fs, ft in zip(acts_s, acts_t):
            lf, g = _match(fs, ft, cfg.norm)
            loss_feat += lf
            d_acts.append(lam * g)
    grads = _student_grads(student, cache, d_eps, d_acts, cfg.grad_scale)
    return LossResult(loss_noise + lam * loss_feat, loss_noise, loss_feat, grads)


def stage2_loss(student: StudentState, batch: NoisyBatch, cfg: TrainConfig) -> LossResult:
    """Noise-prediction loss against the injected noise."""
    eps_s, _, cache = _student_forward(student, batch)
    loss, d_eps = _match(eps_s, batch.eps, cfg.norm)
    grads = _student_grads(student, cache, d_eps, None, cfg.grad_scale)
    return LossResult(loss, loss, 0.0, grads)


def apply_update(student: StudentState, grads: dict, cfg: TrainConfig):
    refs = student.parameter_refs()
    decay = {k for k in grads if k.endswith(".weight")}
    student.opt.weight_decay = cfg.weight_decay
    student.opt.step(refs, grads, cfg.lr, decay)
    for aff in student.affines.values():
        np.maximum(aff.scales, SCALE_FLOOR, out=aff.scales)
    student.params.bump()


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("stage", "iter", "loss_noise", "loss_feat", "eval_mse", "eval_alignment")


def _check_finite(res: LossResult, stage, it):
    if not math.isfinite(res.loss):
        raise NumericAbort(
            f"non-finite loss at stage {stage} iteration {it}: "
            f"noise={res.loss_noise!r} feat={res.loss_feat!r}"
        )


def train(teacher: DenoiserParams, student: StudentState, cfg: TrainConfig, data: ToyDataset,
          sched: NoiseSchedule, stages=(1, 2), eval_fn=None) -> list:
    """Run the requested stages in order, updating ``student`` in place.

    ``eval_fn(student) -> (mse, alignment)`` is called every ``eval_every``
    iterations and at the end of each stage.  Returns the metrics log rows.
    Stage II never uses the feature term.
    """
    rows = []
    null = teacher.config.null_class
    for stage in stages:
        iters = cfg.iters_stage1 if stage == 1 else cfg.iters_stage2
        rng = Rng(derive_seed(cfg.seed, "train", stage))
        acc_noise = acc_feat = 0.0
        acc_n = 0
        for it in range(1, iters + 1):
            x, c = data.sample(rng, cfg.batch)
            batch = draw_noisy_batch(x, c, sched, cfg, rng, null)
            if stage == 1:
                res = stage1_loss(teacher, student, batch, cfg)
            else:
                res = stage2_loss(student, batch, cfg)
            _check_finite(res, stage, it)
            apply_update(student, res.grads, cfg)
            acc_noise += res.loss_noise
            acc_feat += res.loss_feat
            acc_n += 1
            if it % cfg.eval_every == 0 or it == iters:
                mse_v, align = eval_fn(student) if eval_fn else (float("nan"), float("nan"))
                rows.append({
                    "stage": stage, "iter": it,
                    "loss_noise": acc_noise / acc_n, "loss_feat": acc_feat / acc_n,
                    "eval_mse": mse_v, "eval_alignment": align,
                })
                log.log(logging.INFO if eval_fn else logging.DEBUG,
                        "stage %d iter %d loss %.5g eval_mse %.4g align %.3f",
                        stage, it, acc_noise / acc_n, mse_v, align)
                acc_noise = acc_feat = 0.0
                acc_n = 0
    return rows


def train_teacher(params: DenoiserParams, cfg: TrainConfig, data: ToyDataset, sched: NoiseSchedule,
                  iters: int, eval_fn=None) -> list:
    """Plain noise-prediction training with uniform timesteps; updates ``params``."""
    st = StudentState(params)
    rng = Rng(derive_seed(cfg.seed, "teacher"))
    rows = []
    acc, acc_n = 0.0, 0
    for it in range(1, iters + 1):
        x, c = data.sample(rng, cfg.batch)
        batch = draw_noisy_batch(x, c, sched, cfg, rng, params.config.null_class, uniform_t=True)
        res = stage2_loss(st, batch, cfg)
        _check_finite(res, 0, it)
        apply_update(st, res.grads, cfg)
        acc += res.loss
        acc_n += 1
        if it % cfg.eval_every == 0 or it == iters:
            mse_v, align = eval_fn(params) if eval_fn else (float("nan"), float("nan"))
            rows.append({"stage": 0, "iter": it, "loss_noise": acc / acc_n, "loss_feat": 0.0,
                         "eval_mse": mse_v, "eval_alignment": align})
            log.info("teacher iter %d loss %.5g align %.3f", it, acc / acc_n, align)
            acc, acc_n = 0.0, 0
    return rows


def profile_timestep_error(teacher: DenoiserParams, student: StudentState, x, c, t_grid,
                           sched: NoiseSchedule, seed: int = 0) -> np.ndarray:
    """Mean over pairs of (1 - abar_t) / abar_t * ||eps_teacher - eps_student||^2, per t.

    Both models see the same z_t for a given pair and t.
    """
    t_grid = np.asarray(t_grid, dtype=np.int64)
    if t_grid.size and (t_grid.min() < 0 or t_grid.max() >= sched.T):
        raise ValueError("t_grid outside the schedule")
    x = np.asarray(x)
    c = np.asarray(c, dtype=np.int64)
    weights = student.deployed_weights()
    rng = Rng(seed)
    out = np.empty(len(t_grid))
    for j, t in enumerate(t_grid):
        eps = rng.normal(x.shape)
        tt = np.full(len(x), t)
        z = forward_diffuse(x, tt, eps, sched)
        e_t = denoiser_forward(teacher, z, c, t=tt)[0].astype(np.float64)
        e_s = denoiser_forward(student.params, z, c, t=tt, weights=weights)[0].astype(np.float64)
        ab = sched.alpha_bars[t]
        out[j] = (1.0 - ab) / ab * np.mean(np.sum((e_t - e_s) ** 2, axis=1))
    return out
