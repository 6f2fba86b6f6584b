"""Two-stage experiment engine: pretext training followed by frozen-feature
evaluation. One run owns one encoder state; parallelism is across runs."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, fields

import numpy as np

from . import losses as L
from .augment import AugPolicy, MixSpec, ViewBatch, make_views, mix_batch
from .checkpoint import load_checkpoint
from .data import Dataset, batches
from .errors import ConfigError, NumericError, ShapeError
from .evaluation import extract, fed, probe_pinv, probe_sgd, top1
from .mathcore import Rng, beta_sample
from .nn import EncoderSpec, EncoderState, Schedule, ema_update, lr_at, sgd_step

METHODS = ("npair", "simclr", "moco", "byol", "supclr", "sup_npair")
SUPERVISED_METHODS = ("supclr", "sup_npair")
EMA_METHODS = ("moco", "byol")

# child-stream ids carved out of the run seed (seed XOR id)
_STREAM_INIT = 1
_STREAM_BANK = 2
_STREAM_EPOCH0 = 16  # epoch e uses stream _STREAM_EPOCH0 + e


@dataclass
class RunConfig:
    method: str = "npair"
    imix: bool = True
    mix_operator: str = "mixup"
    mix_alpha: float = 1.0
    mix_granularity: str = "per_batch"
    simclr_exclude_partner: bool = False
    tau: float = 0.1
    batch_size: int = 256
    epochs: int = 200
    base_lr: float = 0.125
    warmup_epochs: int = 10
    lr_mode: str = "cosine"
    lr_milestones: tuple = ()
    lr_factor: float = 0.2
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.999
    bank_k: int = 0
    seed: int = 0
    hidden_dims: tuple = (128, 128, 512)
    batch_norm: bool = True
    maxout_sets: int = 4
    proj_hidden: int = 128
    proj_dim: int = 64
    proj_batch_norm: bool = False
    mask_p: float = 0.0
    gauss_sigma: float = 0.0
    inputmix: bool = False
    inputmix_both_views: bool = True
    data_path: str = ""
    data_normalize: bool = True
    split_train: float = 0.8
    split_seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "moco":
            if self.bank_k <= 0:
                raise ConfigError("bank.k must be > 0 for momentum contrast")
        elif self.bank_k != 0:
            raise ConfigError(f"bank.k is only valid for moco, got {self.bank_k}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        self.mix_spec()  # field validation lives on the type
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError("lr.warmup_epochs must be < epochs")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema.momentum must be in [0, 1)")
        return self

    def encoder_spec(self, in_dim: int) -> EncoderSpec:
        return EncoderSpec(
            in_dim=in_dim,
            hidden_dims=tuple(self.hidden_dims),
            batch_norm=self.batch_norm,
            maxout_sets=self.maxout_sets,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            proj_batch_norm=self.proj_batch_norm,
            predictor=self.method == "byol",
        )

    def schedule(self) -> Schedule:
        return Schedule(
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.epochs,
            mode=self.lr_mode,
            milestones=tuple(self.lr_milestones),
            factor=self.lr_factor,
        )

    def mix_spec(self) -> MixSpec:
        return MixSpec(
            operator=self.mix_operator,
            alpha=self.mix_alpha,
            granularity=self.mix_granularity,
        )

    def policy(self) -> AugPolicy:
        return AugPolicy(
            mask_p=self.mask_p,
            gauss_sigma=self.gauss_sigma,
            inputmix=self.inputmix,
            inputmix_both_views=self.inputmix_both_views,
        )


PRESETS = {
    # fast defaults for desk-scale synthetic/tabular runs
    "desk": dict(
        hidden_dims=(128, 128, 512), maxout_sets=4, proj_hidden=128, proj_dim=64,
        batch_size=256, epochs=200, tau=0.1, base_lr=0.125, warmup_epochs=10,
        weight_decay=1e-4, sgd_momentum=0.9, ema_momentum=0.99, mix_alpha=1.0,
    ),
    # the full tabular recipe (wide maxout backbone, masking noise)
    "tabular": dict(
        hidden_dims=(2048, 2048, 4096, 4096, 8192), maxout_sets=4,
        proj_hidden=2048, proj_dim=128, batch_size=512, epochs=500, tau=0.1,
        base_lr=0.125, warmup_epochs=10, weight_decay=1e-4, sgd_momentum=0.9,
        ema_momentum=0.999, mask_p=0.2, mix_alpha=2.0,
    ),
}


# --------------------------------------------------------------------------
# flat dotted-key config text

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_KEYMAP = {
    "method": ("method", str),
    "imix": ("imix", _parse_bool),
    "mix.operator": ("mix_operator", str),
    "mix.alpha": ("mix_alpha", float),
    "mix.granularity": ("mix_granularity", str),
    "simclr.exclude_partner": ("simclr_exclude_partner", _parse_bool),
    "tau": ("tau", float),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "lr.base": ("base_lr", float),
    "lr.warmup_epochs": ("warmup_epochs", int),
    "lr.mode": ("lr_mode", str),
    "lr.milestones": ("lr_milestones", _parse_int_tuple),
    "lr.factor": ("lr_factor", float),
    "sgd.momentum": ("sgd_momentum", float),
    "weight_decay": ("weight_decay", float),
    "ema.momentum": ("ema_momentum", float),
    "bank.k": ("bank_k", int),
    "seed": ("seed", int),
    "arch.hidden_dims": ("hidden_dims", _parse_int_tuple),
    "arch.batch_norm": ("batch_norm", _parse_bool),
    "arch.maxout_sets": ("maxout_sets", int),
    "arch.proj_hidden": ("proj_hidden", int),
    "arch.proj_dim": ("proj_dim", int),
    "arch.proj_batch_norm": ("proj_batch_norm", _parse_bool),
    "aug.mask_p": ("mask_p", float),
    "aug.gauss_sigma": ("gauss_sigma", float),
    "aug.inputmix": ("inputmix", _parse_bool),
    "aug.inputmix_both_views": ("inputmix_both_views", _parse_bool),
    "data.path": ("data_path", str),
    "data.normalize": ("data_normalize", _parse_bool),
    "data.split_train": ("split_train", float),
    "data.split_seed": ("split_seed", int),
    "checkpoint_every": ("checkpoint_every", int),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYMAP.items()}
# aliases accepted on the command line for convenience
_ALIASES = {"bank_k": "bank.k", "alpha": "mix.alpha"}


def parse_config_lines(lines, base: dict | None = None) -> dict:
    """Parse `key=value` lines (comments with '#', blank lines ignored) into
    a field dict; later keys win."""
    out = dict(base or {})
    for lno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(
                    f"unknown preset {value!r}; available: {sorted(PRESETS)}"
                )
            # a base layer: keys already set (and any that follow) win
            out = dict(PRESETS[value], **out)
            continue
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r}")
        fname, parser = _KEYMAP[key]
        try:
            out[fname] = parser(value)
        except ConfigError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    return out


def config_from_sources(path: str | None = None, overrides=(),
                        preset: str | None = None) -> RunConfig:
    """Layered config: preset < file < command-line overrides."""
    base: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base.update(PRESETS[preset])
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                base = parse_config_lines(fh, base)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    base = parse_config_lines(list(overrides), base)
    try:
        cfg = RunConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def resolved_text(cfg: RunConfig) -> str:
    """Canonical flat rendering of the effective config."""
    lines = []
    for f in fields(RunConfig):
        key = _FIELD_TO_KEY[f.name]
        lines.append(f"{key}={_fmt(getattr(cfg, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def run_id(cfg: RunConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# the pretext loop


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    lr: float
    probe_acc: float | None = None
    fed: float | None = None
    wall: float | None = None  # not serialized; metrics files stay deterministic


@dataclass
class RunResult:
    state: EncoderState
    metrics: list
    bank: L.MemoryBank | None
    steps: int


def _accumulate(total: dict, grads: dict):
    for k, v in grads.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v


def pretext_step(state: EncoderState, views: ViewBatch, cfg: RunConfig,
                 rng: Rng, lr: float, bank: L.MemoryBank | None = None,
                 class_labels=None, spatial=()) -> float:
    """One forward/backward/update. Momentum methods then refresh the EMA
    shadow, and momentum contrast pushes the current keys into the bank."""
    n = views.n
    if n < 2:
        raise ConfigError("pretext batches need at least 2 samples")
    enc = state.encoder
    method = cfg.method
    if method in SUPERVISED_METHODS and class_labels is None:
        raise ConfigError(f"{method} needs class labels")

    lam = 1.0
    perm = None
    if cfg.imix:
        m = 2 * n if method in ("simclr", "supclr") else n
        perm = rng.permutation(m)
        if cfg.mix_granularity == "per_sample":
            lam = np.array([beta_sample(rng, cfg.mix_alpha) for _ in range(m)])
        else:
            lam = beta_sample(rng, cfg.mix_alpha)
        views.lam, views.perm = lam, perm  # mixing metadata travels with the batch

    grads: dict = {}
    x, xt = views.anchors, views.keys

    if method in ("npair", "sup_npair"):
        if cfg.imix:
            xm, rlam = mix_batch(x, perm, lam, cfg.mix_operator, spatial, rng)
        else:
            xm, rlam = x, 1.0
        emb_a, cache_a = enc.forward(xm, "train")
        emb_k, cache_k = enc.forward(xt, "train")
        if method == "npair":
            labels = L.identity_labels(n)
        else:
            labels = L.class_pair_weights(class_labels, include_self=True)
        if cfg.imix:
            labels = L.mix_rows(labels, perm, rlam)
        out = L.npair(emb_a, emb_k, labels, cfg.tau)
        _accumulate(grads, enc.backward(cache_a, out.grad_anchor))
        _accumulate(grads, enc.backward(cache_k, out.grad_keys))

    elif method in ("simclr", "supclr"):
        full = np.vstack([x, xt])
        emb_full, cache_full = enc.forward(full, "train")
        if method == "simclr":
            labels = L.positive_pair_labels(n)
        else:
            y2 = np.concatenate([class_labels, class_labels])
            labels = L.class_pair_weights(y2, include_self=False)
        if cfg.imix:
            fm, rlam = mix_batch(full, perm, lam, cfg.mix_operator, spatial, rng)
            emb_mix, cache_mix = enc.forward(fm, "train")
            labels = L.mix_rows(labels, perm, rlam)
            out = L.simclr(
                emb_full, labels, cfg.tau, anchors=emb_mix,
                extra_exclude=perm if cfg.simclr_exclude_partner else None)
            _accumulate(grads, enc.backward(cache_mix, out.grad_anchor))
            _accumulate(grads, enc.backward(cache_full, out.grad_keys))
        else:
            out = L.simclr(emb_full, labels, cfg.tau)
            _accumulate(grads, enc.backward(cache_full, out.grad_anchor))

    elif method == "moco":
        if state.ema is None:
            raise ConfigError("momentum contrast needs an EMA shadow")
        if cfg.imix:
            xm, rlam = mix_batch(x, perm, lam, cfg.mix_operator, spatial, rng)
            labels = L.mix_rows(L.identity_labels(n), perm, rlam)
        else:
            xm, labels = x, L.identity_labels(n)
        k = bank.capacity if bank is not None else 0
        emb_a, cache_a = enc.forward(xm, "train")
        keys, _ = state.ema.forward(xt, "key")
        out = L.moco(emb_a, keys, bank, L.widen_labels(labels, n + k), cfg.tau)
        _accumulate(grads, enc.backward(cache_a, out.grad_anchor))

    else:  # byol
        if state.ema is None:
            raise ConfigError("bootstrap training needs an EMA shadow")
        if cfg.imix:
            xm, rlam = mix_batch(x, perm, lam, cfg.mix_operator, spatial, rng)
            labels = L.mix_rows(L.identity_labels(n), perm, rlam)
        else:
            xm, labels = x, L.identity_labels(n)
        emb_a, cache_a = enc.forward(xm, "train")
        pred, cache_p = enc.forward_prediction(emb_a, "train")
        targets, _ = state.ema.forward(xt, "key")
        out = L.byol(pred, targets, labels)
        dz, pred_grads = enc.backward_prediction(cache_p, out.grad_anchor)
        _accumulate(grads, pred_grads)
        _accumulate(grads, enc.backward(cache_a, dz))

    if not np.isfinite(out.value):
        lam_repr = float(np.mean(lam)) if np.ndim(lam) else lam
        raise NumericError(
            f"non-finite pretext loss (method={method}, lam={lam_repr}, lr={lr})"
        )

    sgd_step(state, grads, lr, cfg.sgd_momentum, cfg.weight_decay)
    if method in EMA_METHODS:
        ema_update(state, cfg.ema_momentum)
    if method == "moco" and bank is not None:
        norms = np.linalg.norm(keys, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise NumericError("zero-norm momentum key")
        bank.push(keys / norms)
    return float(out.value)


def run_pretext(cfg: RunConfig, dataset: Dataset, checkpoint_hook=None,
                metrics_hook=None) -> RunResult:
    """Full pretext training loop; returns the trained state and one metrics
    record per epoch."""
    cfg.validate()
    if cfg.method in SUPERVISED_METHODS and dataset.labels is None:
        raise ConfigError(f"{cfg.method} pretext needs a labeled dataset")
    if cfg.mix_operator == "cutmix" and cfg.imix and not dataset.spatial:
        raise ConfigError("cutmix needs a dataset with a declared spatial shape")
    rng = Rng(cfg.seed)
    spec = cfg.encoder_spec(dataset.dim)
    state = EncoderState.create(spec, rng.child(_STREAM_INIT),
                                with_ema=cfg.method in EMA_METHODS)
    bank = None
    if cfg.method == "moco":
        bank = L.MemoryBank(cfg.bank_k, spec.proj_dim, rng.child(_STREAM_BANK))
    metrics: list[MetricsRecord] = []
    if cfg.epochs == 0:
        return RunResult(state, metrics, bank, 0)

    schedule = cfg.schedule()
    policy = cfg.policy()
    steps_per_epoch = dataset.n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds dataset size {dataset.n}"
        )
    steps = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ep_rng = rng.child(_STREAM_EPOCH0 + epoch)
        loss_sum = 0.0
        count = 0
        for bi, idx in enumerate(
                batches(ep_rng, dataset.n, cfg.batch_size, drop_last=True)):
            lr = lr_at(schedule, epoch + bi / steps_per_epoch)
            views = make_views(ep_rng, dataset.features[idx], policy)
            y = dataset.labels[idx] if dataset.labels is not None else None
            loss_sum += pretext_step(state, views, cfg, ep_rng, lr, bank=bank,
                                     class_labels=y, spatial=dataset.spatial)
            count += 1
            steps += 1
        record = MetricsRecord(
            epoch=epoch + 1,
            loss=loss_sum / count,
            lr=lr_at(schedule, epoch),
            wall=time.perf_counter() - t0,
        )
        metrics.append(record)
        if metrics_hook is not None:
            metrics_hook(record)
        if checkpoint_hook is not None and (
                (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)
                or epoch + 1 == cfg.epochs):
            checkpoint_hook(state, epoch + 1)
    return RunResult(state, metrics, bank, steps)


def run_eval(state_or_path, train_ds: Dataset, test_ds: Dataset,
             probe: str = "pinv", space: str = "backbone",
             with_fed: bool = False, probe_seed: int = 0,
             probe_epochs: int = 100) -> dict:
    """Frozen-feature evaluation: extract, fit a linear probe on the train
    side, report top-1 on both sides (and optionally the embedding-space
    Frechet distance between them)."""
    state = state_or_path
    if isinstance(state_or_path, str):
        state = load_checkpoint(state_or_path)
    in_dim = state.encoder.spec.in_dim
    for ds in (train_ds, test_ds):
        if ds.dim != in_dim:
            raise ShapeError(
                f"encoder expects {in_dim} input features, dataset "
                f"{ds.name!r} has {ds.dim}"
            )
    if train_ds.labels is None or test_ds.labels is None:
        raise ConfigError("evaluation needs labeled datasets")
    f_tr = extract(state, train_ds.features, space)
    f_te = extract(state, test_ds.features, space)
    if probe == "pinv":
        fitted = probe_pinv(f_tr, train_ds.labels)
    elif probe == "sgd":
        fitted = probe_sgd(f_tr, train_ds.labels, epochs=probe_epochs,
                           seed=probe_seed)
    else:
        raise ConfigError(f"unknown probe kind {probe!r}")
    result = {
        "probe": probe,
        "space": space,
        "top1": top1(fitted, f_te, test_ds.labels),
        "train_top1": top1(fitted, f_tr, train_ds.labels),
    }
    if fitted.lr is not None:
        result["probe_lr"] = fitted.lr
    if with_fed:
        result["fed"] = fed(f_tr, f_te)
    return result
