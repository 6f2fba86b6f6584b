"""Frozen-feature evaluation: linear probes, top-1 accuracy, the Frechet
distance between embedding distributions, and embedding export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .mathcore import Rng, as_matrix, pinv, psd_sqrt
from .nn import EncoderState, Schedule, lr_at

PROBE_LR_GRID = (1.0, 3.0, 5.0, 10.0, 30.0, 50.0, 70.0)
PROBE_MILESTONES = (80, 90, 95)


@dataclass
class LinearProbe:
    weights: np.ndarray  # D x C
    bias: np.ndarray  # C
    lr: float | None = None  # grid member picked by validation, if trained by SGD

    def logits(self, features) -> np.ndarray:
        return as_matrix(features, "features") @ self.weights + self.bias

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(axis=1)  # ties -> lowest class


@dataclass(frozen=True)
class FedStats:
    mean: np.ndarray
    cov: np.ndarray  # biased (1/N) estimator over L2-normalized embeddings


def extract(state: EncoderState, x, space: str = "backbone") -> np.ndarray:
    """Deterministic eval-mode features, no augmentation. The projection
    head is excluded unless space="projection"."""
    if space == "backbone":
        out, _ = state.encoder.forward_backbone(x, mode="eval")
    elif space == "projection":
        out, _ = state.encoder.forward(x, mode="eval")
    else:
        raise ConfigError(f"unknown feature space {space!r}")
    return out


def one_hot(labels, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).ravel()
    c = int(y.max()) + 1 if n_classes is None else n_classes
    out = np.zeros((y.size, c))
    out[np.arange(y.size), y] = 1.0
    return out


def _check_features_labels(features, labels):
    f = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size != f.shape[0]:
        raise ShapeError(f"{y.size} labels for {f.shape[0]} feature rows")
    return f, y


def probe_pinv(features, labels) -> LinearProbe:
    """Least-squares probe: regress one-hot labels on bias-augmented
    features through the pseudoinverse (minimum-norm solution)."""
    f, y = _check_features_labels(features, labels)
    target = one_hot(y)
    aug = np.hstack([f, np.ones((f.shape[0], 1))])
    w_aug = pinv(aug) @ target
    return LinearProbe(weights=w_aug[:-1], bias=w_aug[-1])


def _sgd_probe_fit(f, y, n_classes, lr, epochs, batch_size, momentum, milestones,
                   decay, rng):
    n, d = f.shape
    target = one_hot(y, n_classes)
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    buf_w = np.zeros_like(w)
    buf_b = np.zeros_like(b)
    schedule = Schedule(base_lr=lr, batch_size=256, warmup_epochs=0,
                        total_epochs=epochs, mode="step",
                        milestones=milestones, factor=decay)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        cur_lr = lr_at(schedule, epoch)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            fb, yb = f[idx], target[idx]
            logits = fb @ w + b
            smax = logits.max(axis=1, keepdims=True)
            p = np.exp(logits - smax)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - yb) / idx.size
            buf_w = momentum * buf_w + f[idx].T @ g
            buf_b = momentum * buf_b + g.sum(axis=0)
            w -= cur_lr * buf_w
            b -= cur_lr * buf_b
    return LinearProbe(weights=w, bias=b, lr=lr)


def probe_sgd(features, labels, epochs: int = 100, lr_grid=PROBE_LR_GRID,
              batch_size: int = 256, momentum: float = 0.9,
              milestones=PROBE_MILESTONES, decay: float = 0.2,
              val_fraction: float = 0.2, seed: int = 0) -> LinearProbe:
    """Linear classifier on frozen features, trained by SGD with momentum
    and step decay; the initial learning rate is picked from the grid by
    validation accuracy, then the probe is refit on all rows."""
    f, y = _check_features_labels(features, labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigError("probe needs at least two classes")
    n_classes = int(y.max()) + 1
    rng = Rng(seed)
    n = f.shape[0]
    n_val = max(1, int(round(val_fraction * n)))
    order = rng.permutation(n)
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if np.unique(y[fit_idx]).size < 2:
        raise ConfigError("validation split leaves fewer than two classes")

    best_lr, best_acc = None, -1.0
    for i, lr in enumerate(lr_grid):
        probe = _sgd_probe_fit(f[fit_idx], y[fit_idx], n_classes, lr, epochs,
                               batch_size, momentum, milestones, decay,
                               rng.child(1000 + i))
        acc = float((probe.predict(f[val_idx]) == y[val_idx]).mean())
        if acc > best_acc:
            best_lr, best_acc = lr, acc
    probe = _sgd_probe_fit(f, y, n_classes, best_lr, epochs, batch_size,
                           momentum, milestones, decay, rng.child(2000))
    probe.lr = best_lr
    return probe


def top1(probe: LinearProbe, features, labels) -> float:
    f, y = _check_features_labels(features, labels)
    return float((probe.predict(f) == y).mean())


def per_class_accuracy(probe: LinearProbe, features, labels) -> dict:
    f, y = _check_features_labels(features, labels)
    pred = probe.predict(f)
    return {
        int(c): float((pred[y == c] == c).mean())
        for c in np.unique(y)
    }


def embed_stats(features) -> FedStats:
    """Mean and biased covariance of the L2-normalized rows."""
    f = as_matrix(features, "features")
    if f.shape[0] < 2:
        raise ShapeError("need at least 2 rows to estimate a covariance")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm embedding row")
    fn = f / norms
    mean = fn.mean(axis=0)
    centered = fn - mean
    cov = centered.T @ centered / f.shape[0]
    return FedStats(mean=mean, cov=0.5 * (cov + cov.T))


def fed(train_features, test_features) -> float:
    """Squared Frechet distance between the Gaussian fits of the two
    normalized embedding sets:

        ||m1 - m2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))

    The trace term is computed through the symmetrized product
    sqrt(S1)^T S2 sqrt(S1), which has the same spectrum as S1 S2.
    """
    a = embed_stats(train_features)
    b = embed_stats(test_features)
    if a.mean.size != b.mean.size:
        raise ShapeError("embedding dimensions differ between the two sets")
    root_a = psd_sqrt(a.cov)
    cross = psd_sqrt(root_a @ b.cov @ root_a)
    d2 = (
        float(((a.mean - b.mean) ** 2).sum())
        + float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    )
    return max(d2, 0.0)


def export_embeddings(features, labels, path: str):
    """Write features (and optional labels) as CSV, one row per input row,
    full round-trip precision."""
    f = as_matrix(features, "features")
    y = None
    if labels is not None:
        y = np.asarray(labels, dtype=np.int64).ravel()
        if y.size != f.shape[0]:
            raise ShapeError(f"{y.size} labels for {f.shape[0]} rows")
    header = [f"f{i}" for i in range(f.shape[1])]
    if y is not None:
        header.append("label")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(f.shape[0]):
                cells = [repr(v) for v in f[i].tolist()]
                if y is not None:
                    cells.append(str(int(y[i])))
                fh.write(",".join(cells) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path!r}: {exc}") from exc
