"""Contrastive and self-supervised losses with virtual labels.

Every loss returns its scalar value together with analytic gradients with
respect to the embedding inputs, so the training engine can chain them into
the encoder's backward pass. Virtual labels are nonnegative weight rows over
the candidate keys; instance-mixing interpolates those rows, which keeps all
cross-entropy-type losses exactly linear in the label argument.

Similarities are cosine (inputs are L2-normalized internally) divided by the
temperature. Per-anchor losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment
from .errors import ConfigError, LabelError, NumericError, ShapeError
from .mathcore import Rng, as_matrix


@dataclass
class LossOutput:
    value: float
    grad_anchor: np.ndarray
    grad_keys: np.ndarray | None = None
    grad_params: dict | None = None


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    return float(tau)


def _normalize_rows(x, name: str):
    x = as_matrix(x, name)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"{name} has zero-norm rows (degenerate embedding)")
    return x / norms[:, None], norms


def _denormalize_grad(d_hat, x_hat, norms):
    """Pull a gradient w.r.t. normalized rows back through x -> x/||x||."""
    inner = (d_hat * x_hat).sum(axis=1, keepdims=True)
    return (d_hat - inner * x_hat) / norms[:, None]


def _check_weights(weights, na, nc):
    w = as_matrix(weights, "virtual labels")
    if w.shape != (na, nc):
        raise ShapeError(f"virtual labels must be ({na}, {nc}), got {w.shape}")
    if np.any(w < 0):
        raise LabelError("virtual label weights must be nonnegative")
    return w


def _weighted_ce(anchors, candidates, weights, tau, *, exclude_diag=False,
                 extra_exclude=None, candidate_grad=True):
    """Mean over anchors of -sum_n w_n log softmax_n(cos(a, c_n)/tau).

    The softmax denominator ranges over allowed candidates only; the weighted
    numerator ranges over all of them, so the result stays linear in the
    weight rows.
    """
    tau = _check_tau(tau)
    a_hat, a_norm = _normalize_rows(anchors, "anchors")
    c_hat, c_norm = _normalize_rows(candidates, "candidates")
    if a_hat.shape[1] != c_hat.shape[1]:
        raise ShapeError("anchors and candidates have different widths")
    na, nc = a_hat.shape[0], c_hat.shape[0]
    w = _check_weights(weights, na, nc)

    scores = (a_hat @ c_hat.T) / tau
    allowed = np.ones((na, nc), dtype=bool)
    if exclude_diag:
        if na != nc:
            raise ShapeError("self-exclusion needs matching anchor/candidate counts")
        np.fill_diagonal(allowed, False)
    if extra_exclude is not None:
        allowed[np.arange(na), np.asarray(extra_exclude, dtype=int)] = False
    if not allowed.any(axis=1).all():
        raise ShapeError("an anchor has no candidates left after exclusion")

    masked = np.where(allowed, scores, -np.inf)
    smax = masked.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(masked - smax).sum(axis=1))
    logp = scores - lse[:, None]
    value = float(-(w * logp).sum(axis=1).mean())

    probs = np.where(allowed, np.exp(logp), 0.0)
    wsum = w.sum(axis=1, keepdims=True)
    g_scores = (wsum * probs - w) / na
    grad_anchor = _denormalize_grad((g_scores @ c_hat) / tau, a_hat, a_norm)
    grad_cand = None
    if candidate_grad:
        grad_cand = _denormalize_grad((g_scores.T @ a_hat) / tau, c_hat, c_norm)
    return value, grad_anchor, grad_cand


# ---------------------------------------------------------------------------
# virtual-label construction


def identity_labels(n: int) -> np.ndarray:
    return np.eye(n)


def mix_rows(weights: np.ndarray, perm, lam) -> np.ndarray:
    """lam * w_i + (1 - lam) * w_perm(i), rowwise; lam scalar or per-row."""
    w = np.asarray(weights, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        lam = lam[None]
    lam = lam.reshape(-1, 1)
    return lam * w + (1.0 - lam) * w[np.asarray(perm, dtype=int)]


def positive_pair_labels(n_pairs: int) -> np.ndarray:
    """One-hot rows over 2N slots sending each sample to its other view."""
    n2 = 2 * n_pairs
    labels = np.zeros((n2, n2))
    idx = np.arange(n2)
    labels[idx, (idx + n_pairs) % n2] = 1.0
    return labels


def class_pair_weights(y, include_self: bool) -> np.ndarray:
    """Rows marking same-class entries, normalized to sum to 1.

    include_self=False drops the diagonal (anchor vs itself); every anchor
    must keep at least one positive.
    """
    y = np.asarray(y).ravel()
    same = y[:, None] == y[None, :]
    v = same.astype(np.float64)
    if not include_self:
        np.fill_diagonal(v, 0.0)
    counts = v.sum(axis=1)
    if np.any(counts == 0):
        raise LabelError("an anchor has no positive under these class labels")
    return v / counts[:, None]


def widen_labels(labels: np.ndarray, total: int) -> np.ndarray:
    """Pad label rows with zero columns up to `total` candidates."""
    n, m = labels.shape
    if total < m:
        raise ShapeError(f"cannot widen {m} columns to {total}")
    out = np.zeros((n, total))
    out[:, :m] = labels
    return out


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm key vectors.

    Cold start fills the ring with random unit vectors so the candidate set
    always has exactly `capacity` entries.
    """

    def __init__(self, capacity: int, dim: int, rng: Rng):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.vectors = rng.unit_vectors(capacity, dim)
        self.cursor = 0

    def __len__(self):
        return self.capacity

    def push(self, keys):
        keys = as_matrix(keys, "keys")
        n = keys.shape[0]
        if keys.shape[1] != self.dim:
            raise ShapeError(f"keys have dim {keys.shape[1]}, bank dim {self.dim}")
        if n > self.capacity:
            raise ConfigError(f"pushing {n} keys into a bank of capacity {self.capacity}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise NumericError("bank keys must be unit-normalized")
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.vectors[idx] = keys
        self.cursor = int((self.cursor + n) % self.capacity)


def bank_push(bank: MemoryBank, keys) -> MemoryBank:
    bank.push(keys)
    return bank


# ---------------------------------------------------------------------------
# losses


def npair(anchors, keys, labels=None, tau: float = 0.1) -> LossOutput:
    """N-way discrimination of each anchor against the batch of second-view
    keys; gradients w.r.t. both branches."""
    anchors = as_matrix(anchors, "anchors")
    keys = as_matrix(keys, "keys")
    if anchors.shape[0] != keys.shape[0]:
        raise ShapeError("anchors and keys must pair up rowwise")
    n = anchors.shape[0]
    if labels is None:
        labels = identity_labels(n)
    value, ga, gk = _weighted_ce(anchors, keys, labels, tau)
    return LossOutput(value, ga, gk)


def simclr(embeddings, labels=None, tau: float = 0.1, anchors=None,
           extra_exclude=None) -> LossOutput:
    """(2N-1)-way discrimination over a doubled batch, each anchor excluded
    from its own denominator.

    With `anchors=None` the embeddings play both roles and the returned
    grad_anchor accumulates both; passing separate anchors (e.g. embeddings
    of mixed inputs) attends them over the clean candidates, with candidate
    gradients in grad_keys.
    """
    embeddings = as_matrix(embeddings, "embeddings")
    n2 = embeddings.shape[0]
    if labels is None:
        if n2 % 2 != 0:
            raise ShapeError("default labels need an even number of embeddings")
        labels = positive_pair_labels(n2 // 2)
    if anchors is None:
        value, ga, gk = _weighted_ce(embeddings, embeddings, labels, tau,
                                     exclude_diag=True, extra_exclude=extra_exclude)
        return LossOutput(value, ga + gk)
    anchors = as_matrix(anchors, "anchors")
    if anchors.shape[0] != n2:
        raise ShapeError("need one (mixed) anchor per candidate slot")
    value, ga, gk = _weighted_ce(anchors, embeddings, labels, tau,
                                 exclude_diag=True, extra_exclude=extra_exclude)
    return LossOutput(value, ga, gk)


def moco(anchors, ema_keys, bank: MemoryBank | None, labels=None,
         tau: float = 0.1) -> LossOutput:
    """(N+K)-way discrimination against the momentum-encoded keys plus the
    memory bank; gradients flow to anchors only."""
    anchors = as_matrix(anchors, "anchors")
    ema_keys = as_matrix(ema_keys, "ema_keys")
    n = anchors.shape[0]
    if ema_keys.shape[0] != n:
        raise ShapeError("anchors and ema_keys must pair up rowwise")
    if bank is None:
        candidates = ema_keys
        k = 0
    else:
        candidates = np.vstack([ema_keys, bank.vectors])
        k = bank.capacity
    if labels is None:
        labels = widen_labels(identity_labels(n), n + k)
    else:
        labels = _check_weights(labels, n, n + k)
        if k and np.any(labels[:, n:] != 0.0):
            raise LabelError("virtual labels must put zero mass on memory entries")
    value, ga, _ = _weighted_ce(anchors, candidates, labels, tau,
                                candidate_grad=False)
    return LossOutput(value, ga)


def moco_kplus1(anchors, ema_keys, bank: MemoryBank | None,
                tau: float = 0.1) -> LossOutput:
    """(K+1)-way variant: each anchor sees only its own key plus the bank
    (other in-batch keys are not negatives)."""
    tau = _check_tau(tau)
    a_hat, a_norm = _normalize_rows(anchors, "anchors")
    k_hat, _ = _normalize_rows(ema_keys, "ema_keys")
    n = a_hat.shape[0]
    if k_hat.shape[0] != n:
        raise ShapeError("anchors and ema_keys must pair up rowwise")
    s_pos = (a_hat * k_hat).sum(axis=1) / tau
    if bank is None or bank.capacity == 0:
        # single candidate: softmax is 1 and the loss vanishes
        return LossOutput(0.0, np.zeros_like(a_hat))
    s_bank = (a_hat @ bank.vectors.T) / tau
    smax = np.maximum(s_pos, s_bank.max(axis=1))
    z = np.exp(s_pos - smax) + np.exp(s_bank - smax[:, None]).sum(axis=1)
    lse = smax + np.log(z)
    value = float((lse - s_pos).mean())
    p_pos = np.exp(s_pos - lse)
    p_bank = np.exp(s_bank - lse[:, None])
    d_hat = ((p_pos - 1.0)[:, None] * k_hat + p_bank @ bank.vectors) / (tau * n)
    return LossOutput(value, _denormalize_grad(d_hat, a_hat, a_norm))


def byol(predictions, targets, labels=None) -> LossOutput:
    """Squared distance between the normalized prediction and the (possibly
    mixed) unit-target combination; targets are constants (stop-gradient)."""
    p_hat, p_norm = _normalize_rows(predictions, "predictions")
    t_hat, _ = _normalize_rows(targets, "targets")
    n = p_hat.shape[0]
    if labels is None:
        labels = identity_labels(n)
    w = _check_weights(labels, n, t_hat.shape[0])
    target_mix = w @ t_hat
    resid = p_hat - target_mix
    value = float((resid ** 2).sum(axis=1).mean())
    grad = _denormalize_grad(2.0 * resid / n, p_hat, p_norm)
    return LossOutput(value, grad)


def supclr(embeddings, y, tau: float = 0.1, anchors=None) -> LossOutput:
    """Supervised variant of the doubled-batch loss: positives are all other
    samples with the same class, weighted uniformly."""
    embeddings = as_matrix(embeddings, "embeddings")
    n2 = embeddings.shape[0]
    y = np.asarray(y).ravel()
    if y.size * 2 == n2:
        y = np.concatenate([y, y])
    if y.size != n2:
        raise LabelError(f"need {n2} or {n2 // 2} class labels, got {y.size}")
    weights = class_pair_weights(y, include_self=False)
    return simclr(embeddings, weights, tau, anchors=anchors)


def sup_npair(anchors, keys, y, tau: float = 0.1) -> LossOutput:
    """Supervised N-pair: every same-class key is a positive, weighted
    uniformly (the anchor's own key included)."""
    y = np.asarray(y).ravel()
    anchors = as_matrix(anchors, "anchors")
    if y.size != anchors.shape[0]:
        raise LabelError(f"need {anchors.shape[0]} class labels, got {y.size}")
    weights = class_pair_weights(y, include_self=True)
    return npair(anchors, keys, weights, tau)


def sup_ce(features, weights, bias, labels) -> LossOutput:
    """Plain softmax cross-entropy of a linear classifier on features.

    grad_params carries the classifier gradients ("W", "b"); grad_anchor is
    the gradient w.r.t. the features.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    f = as_matrix(f, "features")
    w = as_matrix(weights, "classifier weights")
    b = np.asarray(bias, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    n, c = f.shape[0], w.shape[1]
    if y.shape != (n, c):
        raise LabelError(f"labels must be ({n}, {c}), got {y.shape}")
    if np.any(y < -1e-9) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-9):
        raise LabelError("label rows must be distributions (nonnegative, sum 1)")

    logits = f @ w + b
    smax = logits.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(logits - smax).sum(axis=1))
    logp = logits - lse[:, None]
    value = float(-(y * logp).sum(axis=1).mean())
    g = (np.exp(logp) - y) / n
    return LossOutput(
        value,
        grad_anchor=g @ w.T,
        grad_params={"W": f.T @ g, "b": g.sum(axis=0)},
    )


def mixup_sup(x_i, y_i, x_j, y_j, lam: float, weights, bias) -> LossOutput:
    """Cross-entropy at the convex input combination against the convex
    label combination."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError("mixup inputs must share a shape")
    return sup_ce(lam * x_i + (1.0 - lam) * x_j, weights, bias,
                  lam * y_i + (1.0 - lam) * y_j)


# ---------------------------------------------------------------------------
# the generic instance-mix wrapper

CE_BASES = ("npair", "simclr", "moco", "supclr", "sup_npair")
BASES = CE_BASES + ("byol",)


def imix(base: str, mix_op: str, views, perm, lam, encode, *, tau: float = 0.1,
         encode_key=None, predict=None, bank: MemoryBank | None = None,
         class_labels=None, spatial=(), rng: Rng | None = None,
         exclude_partner: bool = False) -> LossOutput:
    """Mix inputs pairwise in input space, interpolate virtual labels, and
    evaluate the base loss on the mixed batch.

    `views` is the (first_view, second_view) pair of input arrays; `encode`
    embeds live-gradient branches, `encode_key` the stop-gradient branch
    (momentum methods), `predict` the prediction head for bootstrap training.
    `lam` may be a scalar (shared per batch) or a per-sample array. Returned
    gradients are w.r.t. the embeddings this call produced.
    """
    if base not in BASES:
        raise ConfigError(f"unknown base loss {base!r}")
    x, x_tilde = views
    x = as_matrix(x, "first view")
    x_tilde = as_matrix(x_tilde, "second view")
    n = x.shape[0]

    if base in ("simclr", "supclr"):
        full = np.vstack([x, x_tilde])
        perm = np.asarray(perm, dtype=int)
        if perm.shape != (2 * n,):
            raise ShapeError("doubled-batch mixing needs a permutation of 2N")
        mixed, rlam = augment.mix_batch(full, perm, lam, mix_op, spatial, rng)
        anchors = encode(mixed)
        candidates = encode(full)
        if base == "simclr":
            labels = mix_rows(positive_pair_labels(n), perm, rlam)
            return simclr(candidates, labels, tau, anchors=anchors,
                          extra_exclude=perm if exclude_partner else None)
        y = np.asarray(class_labels).ravel()
        y2 = np.concatenate([y, y]) if y.size == n else y
        labels = mix_rows(class_pair_weights(y2, include_self=False), perm, rlam)
        return simclr(candidates, labels, tau, anchors=anchors,
                      extra_exclude=perm if exclude_partner else None)

    perm = np.asarray(perm, dtype=int)
    if perm.shape != (n,):
        raise ShapeError("pair mixing needs a permutation of the batch")
    mixed, rlam = augment.mix_batch(x, perm, lam, mix_op, spatial, rng)
    if base == "npair":
        labels = mix_rows(identity_labels(n), perm, rlam)
        return npair(encode(mixed), encode(x_tilde), labels, tau)
    if base == "sup_npair":
        weights = class_pair_weights(np.asarray(class_labels).ravel(),
                                     include_self=True)
        return npair(encode(mixed), encode(x_tilde), mix_rows(weights, perm, rlam),
                     tau)
    if base == "moco":
        if encode_key is None:
            raise ConfigError("momentum contrast needs encode_key")
        labels = mix_rows(identity_labels(n), perm, rlam)
        k = bank.capacity if bank is not None else 0
        return moco(encode(mixed), encode_key(x_tilde), bank,
                    widen_labels(labels, n + k), tau)
    # byol
    if encode_key is None or predict is None:
        raise ConfigError("bootstrap training needs encode_key and predict")
    labels = mix_rows(identity_labels(n), perm, rlam)
    return byol(predict(encode(mixed)), encode_key(x_tilde), labels)
