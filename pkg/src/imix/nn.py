"""Minimal MLP stack with hand-derived backpropagation.

The encoder is a backbone (linear / batch-norm / ReLU-or-maxout layers)
followed by a two-layer projection head, plus an optional two-layer
prediction head for bootstrap-style training. SGD with momentum and weight
decay, a warmup+cosine (or step) schedule, and an EMA shadow copy round out
the training machinery. Everything is float64 and deterministic given a seed.

Forward modes:
  "train" - batch statistics, running stats updated
  "eval"  - stored running statistics, no state mutation
  "key"   - batch statistics without touching running stats (momentum branch)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .mathcore import Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_MODES = ("train", "eval", "key")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # relu | maxout | identity
    maxout_sets: int = 1
    batch_norm: bool = False

    def __post_init__(self):
        if self.activation not in ("relu", "maxout", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.activation == "maxout":
            if self.maxout_sets < 2:
                raise ConfigError("maxout needs at least 2 sets")
            if self.out_dim % self.maxout_sets != 0:
                raise ConfigError(
                    f"maxout out_dim {self.out_dim} not divisible by sets {self.maxout_sets}"
                )

    @property
    def effective_out(self) -> int:
        if self.activation == "maxout":
            return self.out_dim // self.maxout_sets
        return self.out_dim


class DenseLayer:
    """Linear map, optional batch norm, then the spec's activation."""

    def __init__(self, spec: LayerSpec, rng: Rng | None = None):
        self.spec = spec
        bound = math.sqrt(6.0 / spec.in_dim)
        if rng is None:
            self.W = np.zeros((spec.in_dim, spec.out_dim))
        else:
            self.W = (rng.random((spec.in_dim, spec.out_dim)) * 2.0 - 1.0) * bound
        self.b = np.zeros(spec.out_dim)
        if spec.batch_norm:
            self.gamma = np.ones(spec.out_dim)
            self.beta = np.zeros(spec.out_dim)
            self.run_mean = np.zeros(spec.out_dim)
            self.run_var = np.ones(spec.out_dim)

    def params(self) -> dict:
        out = {"W": self.W, "b": self.b}
        if self.spec.batch_norm:
            out["gamma"] = self.gamma
            out["beta"] = self.beta
        return out

    def stats(self) -> dict:
        if self.spec.batch_norm:
            return {"run_mean": self.run_mean, "run_var": self.run_var}
        return {}

    def forward(self, x: np.ndarray, mode: str):
        if mode not in _MODES:
            raise ConfigError(f"unknown forward mode {mode!r}")
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(
                f"layer expects (n, {self.spec.in_dim}) input, got {x.shape}"
            )
        z = x @ self.W + self.b
        cache = None
        if self.spec.batch_norm:
            if mode == "eval":
                inv = 1.0 / np.sqrt(self.run_var + BN_EPS)
                y = self.gamma * ((z - self.run_mean) * inv) + self.beta
            else:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                inv = 1.0 / np.sqrt(var + BN_EPS)
                zh = (z - mu) * inv
                y = self.gamma * zh + self.beta
                if mode == "train":
                    self.run_mean += BN_MOMENTUM * (mu - self.run_mean)
                    self.run_var += BN_MOMENTUM * (var - self.run_var)
                cache = (x, zh, inv)
        else:
            y = z
            if mode != "eval":
                cache = (x,)

        if self.spec.activation == "relu":
            out = np.maximum(y, 0.0)
            act_cache = y > 0.0
        elif self.spec.activation == "maxout":
            n = y.shape[0]
            grouped = y.reshape(n, self.spec.effective_out, self.spec.maxout_sets)
            winners = grouped.argmax(axis=2)  # first max -> lowest slot on ties
            out = np.take_along_axis(grouped, winners[:, :, None], axis=2)[:, :, 0]
            act_cache = winners
        else:
            out = y
            act_cache = None
        if cache is not None:
            cache = cache + (act_cache,)
        return out, cache

    def backward(self, cache, d_out: np.ndarray):
        """Returns (d_input, grads-by-local-name). Cache must come from a
        train/key forward."""
        if cache is None:
            raise UsageError("backward without a train-mode forward cache")
        if self.spec.activation == "relu":
            *rest, mask = cache
            dy = d_out * mask
        elif self.spec.activation == "maxout":
            *rest, winners = cache
            n = d_out.shape[0]
            grouped = np.zeros((n, self.spec.effective_out, self.spec.maxout_sets))
            np.put_along_axis(grouped, winners[:, :, None], d_out[:, :, None], axis=2)
            dy = grouped.reshape(n, self.spec.out_dim)
        else:
            *rest, _ = cache
            dy = d_out

        grads = {}
        if self.spec.batch_norm:
            x, zh, inv = rest
            n = dy.shape[0]
            grads["gamma"] = (dy * zh).sum(axis=0)
            grads["beta"] = dy.sum(axis=0)
            dzh = dy * self.gamma
            dz = (inv / n) * (
                n * dzh - dzh.sum(axis=0) - zh * (dzh * zh).sum(axis=0)
            )
        else:
            (x,) = rest
            dz = dy
        grads["W"] = x.T @ dz
        grads["b"] = dz.sum(axis=0)
        d_in = dz @ self.W.T
        return d_in, grads


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description; the last backbone layer switches to maxout
    (no batch norm) when maxout_sets > 1."""

    in_dim: int
    hidden_dims: tuple[int, ...] = (128, 128, 512)
    batch_norm: bool = True
    maxout_sets: int = 4
    proj_hidden: int = 128
    proj_dim: int = 64
    proj_batch_norm: bool = False
    predictor: bool = False

    def backbone_layers(self) -> list[LayerSpec]:
        layers = []
        prev = self.in_dim
        last = len(self.hidden_dims) - 1
        for i, h in enumerate(self.hidden_dims):
            if i == last and self.maxout_sets > 1:
                layers.append(LayerSpec(prev, h, "maxout", self.maxout_sets))
            else:
                layers.append(LayerSpec(prev, h, "relu", batch_norm=self.batch_norm))
            prev = layers[-1].effective_out
        return layers

    @property
    def backbone_dim(self) -> int:
        return self.backbone_layers()[-1].effective_out

    def projection_layers(self) -> list[LayerSpec]:
        return [
            LayerSpec(self.backbone_dim, self.proj_hidden, "relu",
                      batch_norm=self.proj_batch_norm),
            LayerSpec(self.proj_hidden, self.proj_dim, "identity"),
        ]

    def prediction_layers(self) -> list[LayerSpec]:
        return [
            LayerSpec(self.proj_dim, self.proj_hidden, "relu"),
            LayerSpec(self.proj_hidden, self.proj_dim, "identity"),
        ]

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden_dims": list(self.hidden_dims),
            "batch_norm": self.batch_norm,
            "maxout_sets": self.maxout_sets,
            "proj_hidden": self.proj_hidden,
            "proj_dim": self.proj_dim,
            "proj_batch_norm": self.proj_batch_norm,
            "predictor": self.predictor,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderSpec":
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return EncoderSpec(**d)


def _forward_chain(layers, x, mode):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, mode)
        caches.append(cache)
    return x, caches


def _backward_chain(layers, caches, grad, prefix, grads_out):
    for i in reversed(range(len(layers))):
        grad, local = layers[i].backward(caches[i], grad)
        for k, v in local.items():
            grads_out[f"{prefix}.{i}.{k}"] = v
    return grad


class Encoder:
    """Backbone + projection head (+ optional prediction head)."""

    def __init__(self, spec: EncoderSpec, rng: Rng | None = None):
        self.spec = spec
        self.backbone = [DenseLayer(s, rng) for s in spec.backbone_layers()]
        self.projection = [DenseLayer(s, rng) for s in spec.projection_layers()]
        self.prediction = (
            [DenseLayer(s, rng) for s in spec.prediction_layers()]
            if spec.predictor else None
        )

    def _groups(self):
        groups = [("backbone", self.backbone), ("proj", self.projection)]
        if self.prediction is not None:
            groups.append(("pred", self.prediction))
        return groups

    def named_params(self) -> dict:
        out = {}
        for prefix, layers in self._groups():
            for i, layer in enumerate(layers):
                for k, v in layer.params().items():
                    out[f"{prefix}.{i}.{k}"] = v
        return out

    def named_stats(self) -> dict:
        out = {}
        for prefix, layers in self._groups():
            for i, layer in enumerate(layers):
                for k, v in layer.stats().items():
                    out[f"{prefix}.{i}.{k}"] = v
        return out

    def clone(self) -> "Encoder":
        other = Encoder(self.spec, rng=None)
        src_p, dst_p = self.named_params(), other.named_params()
        for k in src_p:
            dst_p[k][...] = src_p[k]
        src_s, dst_s = self.named_stats(), other.named_stats()
        for k in src_s:
            dst_s[k][...] = src_s[k]
        return other

    def forward_backbone(self, x, mode="train"):
        return _forward_chain(self.backbone, np.asarray(x, dtype=np.float64), mode)

    def forward(self, x, mode="train"):
        """Backbone followed by projection head; returns (embedding, cache)."""
        h, bb_caches = self.forward_backbone(x, mode)
        z, pj_caches = _forward_chain(self.projection, h, mode)
        cache = {"backbone": bb_caches, "proj": pj_caches} if mode != "eval" else None
        return z, cache

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss w.r.t. every backbone/projection
        parameter, given d loss / d embedding."""
        if cache is None:
            raise UsageError("backward needs the cache of a train-mode forward")
        grads = {}
        g = _backward_chain(self.projection, cache["proj"], grad_out, "proj", grads)
        _backward_chain(self.backbone, cache["backbone"], g, "backbone", grads)
        return grads

    def forward_prediction(self, z, mode="train"):
        if self.prediction is None:
            raise UsageError("encoder has no prediction head")
        out, caches = _forward_chain(self.prediction, z, mode)
        return out, (caches if mode != "eval" else None)

    def backward_prediction(self, cache, grad_out):
        if self.prediction is None:
            raise UsageError("encoder has no prediction head")
        if cache is None:
            raise UsageError("backward needs the cache of a train-mode forward")
        grads = {}
        g = _backward_chain(self.prediction, cache, grad_out, "pred", grads)
        return g, grads


@dataclass
class EncoderState:
    """Live encoder plus optimizer slots and the optional EMA shadow."""

    encoder: Encoder
    momentum_buffers: dict = field(default_factory=dict)
    ema: Encoder | None = None

    @staticmethod
    def create(spec: EncoderSpec, rng: Rng, with_ema: bool = False) -> "EncoderState":
        enc = Encoder(spec, rng)
        buffers = {k: np.zeros_like(v) for k, v in enc.named_params().items()}
        state = EncoderState(enc, buffers)
        if with_ema:
            state.init_ema()
        return state

    def init_ema(self):
        self.ema = self.encoder.clone()


def sgd_step(state: EncoderState, grads: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """buffer <- momentum*buffer + grad + wd*param; param <- param - lr*buffer."""
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    params = state.encoder.named_params()
    for name, g in grads.items():
        if name not in params:
            raise UsageError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise UsageError(
                f"gradient shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        buf = state.momentum_buffers[name]
        buf *= momentum
        buf += g + weight_decay * p
        p -= lr * buf


def ema_update(state: EncoderState, m: float):
    """shadow <- m*shadow + (1-m)*live, for every parameter and running stat."""
    if state.ema is None:
        raise UsageError("ema_update called without an initialized EMA shadow")
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1), got {m}")
    live_p, ema_p = state.encoder.named_params(), state.ema.named_params()
    for k in live_p:
        ema_p[k] *= m
        ema_p[k] += (1.0 - m) * live_p[k]
    live_s, ema_s = state.encoder.named_stats(), state.ema.named_stats()
    for k in live_s:
        ema_s[k] *= m
        ema_s[k] += (1.0 - m) * live_s[k]


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    batch_size: int
    warmup_epochs: int
    total_epochs: int
    mode: str = "cosine"  # cosine | step
    milestones: tuple[int, ...] = ()
    factor: float = 0.2

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs and self.total_epochs > 0:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if self.mode not in ("cosine", "step"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")

    @property
    def scaled_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


def lr_at(schedule: Schedule, epoch: float) -> float:
    """Linear ramp 0 -> scaled LR over warmup, then cosine decay to 0 (or
    step decay at the milestones). Continuous at the warmup boundary."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ConfigError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    top = schedule.scaled_lr
    if schedule.warmup_epochs > 0 and epoch < schedule.warmup_epochs:
        return top * epoch / schedule.warmup_epochs
    if schedule.mode == "cosine":
        span = schedule.total_epochs - schedule.warmup_epochs
        t = (epoch - schedule.warmup_epochs) / span
        return top * 0.5 * (1.0 + math.cos(math.pi * t))
    drops = sum(1 for ms in schedule.milestones if epoch >= ms)
    return top * schedule.factor ** drops
