"""Residual-MLP noise predictor for 2-D data.

Layout (H = hidden, E = embedding width)::

    h  = in_proj(z) + cond_proj.1(silu(cond_proj.0(class_embed[c])))
    for each block i:
        u = blocks.i.fc1(silu(h)) + F_i          F_i = blocks.i.time_proj(emb_t)
        h = h + blocks.i.fc2(silu(u))            -> block activation i
    eps = out_proj(silu(head(silu(h))))

``class_embed`` has one extra row (index ``n_classes``) for the null condition.
Linear weights are stored (out, in), so the channel axis is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lobit.bitpack import TimeFeatureTable
from lobit.metrics import Rng


class StaleForwardError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    hidden: int = 128
    n_blocks: int = 6
    emb_dim: int = 64
    data_dim: int = 2

    @property
    def null_class(self) -> int:
        return self.n_classes

    def linear_layers(self) -> list[str]:
        names = ["in_proj", "cond_proj.0", "cond_proj.1"]
        for i in range(self.n_blocks):
            names += [f"blocks.{i}.fc1", f"blocks.{i}.time_proj", f"blocks.{i}.fc2"]
        return names + ["head", "out_proj"]

    def fixed_layers(self) -> list[str]:
        """First and last layers, held at 8 bits."""
        return ["in_proj", "out_proj"]

    def time_proj_layers(self) -> list[str]:
        return [f"blocks.{i}.time_proj" for i in range(self.n_blocks)]

    def quantizable_layers(self) -> list[str]:
        """Layers that get a planned bit width (the sensitivity scan set)."""
        skip = set(self.fixed_layers()) | set(self.time_proj_layers())
        return [n for n in self.linear_layers() if n not in skip]

    def layer_shapes(self) -> dict:
        H, E, D = self.hidden, self.emb_dim, self.data_dim
        shapes = {"in_proj": (H, D), "cond_proj.0": (H, E), "cond_proj.1": (H, H)}
        for i in range(self.n_blocks):
            shapes[f"blocks.{i}.fc1"] = (H, H)
            shapes[f"blocks.{i}.time_proj"] = (H, E)
            shapes[f"blocks.{i}.fc2"] = (H, H)
        shapes["head"] = (H, H)
        shapes["out_proj"] = (D, H)
        return shapes

    def layer_sizes(self) -> dict:
        return {n: int(np.prod(s)) for n, s in self.layer_shapes().items()}


@dataclass
class DenoiserParams:
    config: ModelConfig
    tensors: dict
    version: int = 0

    @property
    def dtype(self):
        return self.tensors["in_proj.weight"].dtype

    def weight(self, layer: str) -> np.ndarray:
        return self.tensors[f"{layer}.weight"]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def bump(self):
        """Mark parameters as modified; outstanding forward caches become stale."""
        self.version += 1


def init_params(config: ModelConfig, rng: Rng, dtype=np.float32) -> DenoiserParams:
    tensors = {}
    for name, (fan_out, fan_in) in config.layer_shapes().items():
        std = 1.0 / np.sqrt(fan_in)
        if name.endswith("fc2") or name == "out_proj":
            std *= 0.5
        tensors[f"{name}.weight"] = (rng.normal((fan_out, fan_in)) * std).astype(dtype)
        tensors[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)
    tensors["class_embed"] = rng.normal((config.n_classes + 1, config.emb_dim)).astype(dtype)
    return DenoiserParams(config, tensors)


def time_embedding(t, d: int) -> np.ndarray:
    """Sinusoidal embedding [sin(t f_k), cos(t f_k)], f_k geometric from 1 down to 1e-4.

    ``t`` scalar gives shape (d,), an array gives (len(t), d).  Float64.
    """
    if d % 2:
        raise ValueError(f"embedding width must be even, got {d}")
    half = d // 2
    k = np.arange(half, dtype=np.float64)
    freqs = 10000.0 ** (-k / (half - 1)) if half > 1 else np.ones(1)
    arg = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def time_features_at(params: DenoiserParams, t: int) -> list:
    """Per-block time features for one step, each shaped (1, H)."""
    emb = time_embedding(np.array([t]), params.config.emb_dim).astype(params.dtype)
    return [
        emb @ params.weight(name).T + params.tensors[f"{name}.bias"]
        for name in params.config.time_proj_layers()
    ]


def cache_time_features(params: DenoiserParams, steps, T: int = 1000) -> TimeFeatureTable:
    steps = np.asarray(steps, dtype=np.int64)
    bad = steps[(steps < 0) | (steps >= T)]
    if bad.size:
        raise ValueError(f"step {int(bad[0])} outside [0, {T - 1}]")
    rows = [time_features_at(params, int(t)) for t in steps]
    H = params.config.hidden
    feats = np.empty((params.config.n_blocks, len(steps), H), dtype=params.dtype)
    for j, per_block in enumerate(rows):
        for i, f in enumerate(per_block):
            feats[i, j] = f[0]
    return TimeFeatureTable(steps, feats)


@dataclass
class ForwardCache:
    owner: int
    version: int
    z: np.ndarray
    c: np.ndarray
    weights: dict
    e: np.ndarray
    c1: np.ndarray
    ac: np.ndarray
    hs: list = field(default_factory=list)
    a1s: list = field(default_factory=list)
    us: list = field(default_factory=list)
    a2s: list = field(default_factory=list)
    emb: np.ndarray | None = None
    k: np.ndarray | None = None
    g: np.ndarray | None = None
    ak: np.ndarray | None = None


def denoiser_forward(params: DenoiserParams, z, c, t=None, t_features=None, weights=None):
    """Predict noise for a batch.

    Time conditioning comes either from ``t_features`` (one array per block,
    broadcastable to (n, H)) or from integer steps ``t``; only the latter
    lets gradients reach the time projections.  ``weights`` overrides linear
    weights by layer name (used for quantized deployment).

    Returns ``(eps_hat, activations, cache)``; activations are the residual
    stream after every block.
    """
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    z = np.asarray(z, dtype=dt)
    c = np.asarray(c, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] != cfg.data_dim or c.shape != (z.shape[0],):
        raise ValueError(f"expected z (n, {cfg.data_dim}) and c (n,), got {z.shape} and {c.shape}")
    W = {n: P[f"{n}.weight"] for n in cfg.linear_layers() if f"{n}.weight" in P}
    if weights:
        for name, w in weights.items():
            if name not in W or w.shape != W[name].shape:
                raise ValueError(f"bad weight override for {name} with shape {w.shape}")
            W[name] = w
    emb = None
    if t_features is None:
        if t is None:
            raise ValueError("need either t or t_features")
        emb = time_embedding(np.broadcast_to(np.asarray(t), (z.shape[0],)), cfg.emb_dim).astype(dt)
        t_features = [emb @ W[n].T + P[f"{n}.bias"] for n in cfg.time_proj_layers()]
    if len(t_features) != cfg.n_blocks:
        raise ValueError(f"expected {cfg.n_blocks} time features, got {len(t_features)}")

    e = P["class_embed"][c]
    c1 = e @ W["cond_proj.0"].T + P["cond_proj.0.bias"]
    ac = _silu(c1)
    h = z @ W["in_proj"].T + P["in_proj.bias"] + ac @ W["cond_proj.1"].T + P["cond_proj.1.bias"]
    cache = ForwardCache(id(params), params.version, z, c, W, e, c1, ac, emb=emb)
    acts = []
    for i in range(cfg.n_blocks):
        a1 = _silu(h)
        u = a1 @ W[f"blocks.{i}.fc1"].T + P[f"blocks.{i}.fc1.bias"] + t_features[i]
        a2 = _silu(u)
        cache.hs.append(h)
        cache.a1s.append(a1)
        cache.us.append(u)
        cache.a2s.append(a2)
        h = h + a2 @ W[f"blocks.{i}.fc2"].T + P[f"blocks.{i}.fc2.bias"]
        acts.append(h)
    g = _silu(h)
    k = g @ W["head"].T + P["head.bias"]
    ak = _silu(k)
    out = ak @ W["out_proj"].T + P["out_proj.bias"]
    cache.hs.append(h)
    cache.g, cache.k, cache.ak = g, k, ak
    return out, acts, cache


def denoiser_backward(params: DenoiserParams, cache: ForwardCache, grad_eps, grad_acts=None) -> dict:
    """Reverse-mode gradients for every tensor, given upstream gradients.

    Weight gradients are with respect to the weights actually used in the
    forward pass (the deployed ones when overridden).
    """
    if cache.owner != id(params) or cache.version != params.version:
        raise StaleForwardError("forward cache does not match the current parameters")
    cfg = params.config
    P = params.tensors
    W = cache.weights
    dt = params.dtype
    grads = {}

    def linear(name, x, dy, need_dx=True):
        grads[f"{name}.weight"] = dy.T @ x
        grads[f"{name}.bias"] = dy.sum(axis=0)
        return dy @ W[name] if need_dx else None

    d_out = np.asarray(grad_eps, dtype=dt)
    d_ak = linear("out_proj", cache.ak, d_out)
    d_k = d_ak * _dsilu(cache.k)
    d_g = linear("head", cache.g, d_k)
    d_h = d_g * _dsilu(cache.hs[-1])
    for i in reversed(range(cfg.n_blocks)):
        if grad_acts is not None and grad_acts[i] is not None:
            d_h = d_h + np.asarray(grad_acts[i], dtype=dt)
        d_a2 = linear(f"blocks.{i}.fc2", cache.a2s[i], d_h)
        d_u = d_a2 * _dsilu(cache.us[i])
        d_a1 = linear(f"blocks.{i}.fc1", cache.a1s[i], d_u)
        name = f"blocks.{i}.time_proj"
        if cache.emb is not None:
            linear(name, cache.emb, d_u, need_dx=False)
        elif f"{name}.weight" in P:
            grads[f"{name}.weight"] = np.zeros_like(P[f"{name}.weight"])
            grads[f"{name}.bias"] = np.zeros_like(P[f"{name}.bias"])
        d_h = d_h + d_a1 * _dsilu(cache.hs[i])
    linear("in_proj", cache.z, d_h, need_dx=False)
    d_ac = linear("cond_proj.1", cache.ac, d_h)
    d_c1 = d_ac * _dsilu(cache.c1)
    d_e = linear("cond_proj.0", cache.e, d_c1)
    g_emb = np.zeros_like(P["class_embed"])
    np.add.at(g_emb, cache.c, d_e)
    grads["class_embed"] = g_emb
    return grads
