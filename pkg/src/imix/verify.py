"""Runtime invariant suite.

Every check pits the library against an independent reference: straight-loop
scalar re-implementations of the losses, central finite differences for
gradients, exact label-linearity identities, and closed-form distance values.
`run_checks` powers the `verify` subcommand; the pytest suite reuses the same
oracles.
"""

from __future__ import annotations

import math

import numpy as np

from . import losses as L
from .evaluation import fed
from .mathcore import Rng
from .nn import EncoderSpec, EncoderState, Schedule, lr_at

# ---------------------------------------------------------------------------
# straight-loop oracles (plain Python floats, no vectorization)


def _norm(v) -> float:
    return math.sqrt(sum(float(x) * float(x) for x in v))


def cos_oracle(u, v) -> float:
    dot = sum(float(a) * float(b) for a, b in zip(u, v))
    return dot / (_norm(u) * _norm(v))


def supce_oracle(features, weights, bias, labels) -> float:
    f = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.atleast_2d(np.asarray(labels, dtype=float))
    n, c = y.shape
    total = 0.0
    for i in range(n):
        logits = [
            sum(float(f[i][d]) * float(weights[d][k]) for d in range(f.shape[1]))
            + float(bias[k])
            for k in range(c)
        ]
        z = sum(math.exp(l) for l in logits)
        for k in range(c):
            if y[i][k] != 0.0:
                total -= y[i][k] * math.log(math.exp(logits[k]) / z)
    return total / n


def npair_oracle(anchors, keys, labels, tau) -> float:
    n = len(anchors)
    total = 0.0
    for i in range(n):
        s = [cos_oracle(anchors[i], keys[k]) / tau for k in range(n)]
        z = sum(math.exp(v) for v in s)
        for k in range(n):
            if labels[i][k] != 0.0:
                total -= labels[i][k] * math.log(math.exp(s[k]) / z)
    return total / n


def simclr_oracle(embeddings, labels, tau, anchors=None, extra_exclude=None) -> float:
    n2 = len(embeddings)
    total = 0.0
    for i in range(n2):
        a = embeddings[i] if anchors is None else anchors[i]
        s = [cos_oracle(a, embeddings[k]) / tau for k in range(n2)]
        banned = {i}
        if extra_exclude is not None:
            banned.add(int(extra_exclude[i]))
        z = sum(math.exp(s[k]) for k in range(n2) if k not in banned)
        for k in range(n2):
            if labels[i][k] != 0.0:
                total -= labels[i][k] * math.log(math.exp(s[k]) / z)
    return total / n2


def moco_oracle(anchors, ema_keys, bank_vectors, labels, tau) -> float:
    n = len(anchors)
    cand = [list(k) for k in ema_keys] + [list(m) for m in bank_vectors]
    total = 0.0
    for i in range(n):
        s = [cos_oracle(anchors[i], c) / tau for c in cand]
        z = sum(math.exp(v) for v in s)
        for k in range(len(cand)):
            if labels[i][k] != 0.0:
                total -= labels[i][k] * math.log(math.exp(s[k]) / z)
    return total / n


def moco_kplus1_oracle(anchors, ema_keys, bank_vectors, tau) -> float:
    n = len(anchors)
    total = 0.0
    for i in range(n):
        s_pos = cos_oracle(anchors[i], ema_keys[i]) / tau
        s_neg = [cos_oracle(anchors[i], m) / tau for m in bank_vectors]
        z = math.exp(s_pos) + sum(math.exp(v) for v in s_neg)
        total -= math.log(math.exp(s_pos) / z)
    return total / n


def byol_oracle(predictions, targets, labels) -> float:
    n = len(predictions)
    d = len(predictions[0])
    total = 0.0
    for i in range(n):
        gn = _norm(predictions[i])
        ghat = [float(v) / gn for v in predictions[i]]
        mix = [0.0] * d
        for k in range(len(targets)):
            if labels[i][k] != 0.0:
                tn = _norm(targets[k])
                for j in range(d):
                    mix[j] += labels[i][k] * float(targets[k][j]) / tn
        total += sum((ghat[j] - mix[j]) ** 2 for j in range(d))
    return total / n


def supclr_weights_oracle(y) -> list:
    y = list(y)
    n = len(y)
    rows = []
    for i in range(n):
        row = [1.0 if (y[i] == y[j] and j != i) else 0.0 for j in range(n)]
        count = sum(row)
        rows.append([v / count for v in row])
    return rows


def sup_npair_weights_oracle(y) -> list:
    y = list(y)
    n = len(y)
    rows = []
    for i in range(n):
        row = [1.0 if y[i] == y[j] else 0.0 for j in range(n)]
        count = sum(row)
        rows.append([v / count for v in row])
    return rows


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar fn w.r.t. x, perturbing x in
    place entry by entry."""
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor); the floor keeps
    finite-difference noise on negligible entries from dominating."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


# ---------------------------------------------------------------------------
# named checks


def _rand_embs(rng, n, d):
    return rng.normal((n, d)) + 0.1


def _loss_with_labels(base, rng, n, d, k_bank, tau):
    """Build a callable value(labels) plus the candidate-space width."""
    if base == "npair":
        a, k = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
        return lambda v: L.npair(a, k, v, tau).value, n
    if base == "simclr":
        f = _rand_embs(rng, 2 * n, d)
        anchors = _rand_embs(rng, 2 * n, d)
        return lambda v: L.simclr(f, v, tau, anchors=anchors).value, 2 * n
    if base == "moco":
        a, k = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
        bank = L.MemoryBank(k_bank, d, rng)
        return lambda v: L.moco(a, k, bank, v, tau).value, n + k_bank
    if base == "supclr":
        f = _rand_embs(rng, 2 * n, d)
        anchors = _rand_embs(rng, 2 * n, d)
        return lambda v: L.simclr(f, v, tau, anchors=anchors).value, 2 * n
    if base == "sup_npair":
        a, k = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
        return lambda v: L.npair(a, k, v, tau).value, n
    raise ValueError(base)


def _base_label_rows(base, rng, n, width):
    if base == "npair":
        return L.identity_labels(n)
    if base == "simclr":
        return L.positive_pair_labels(n)
    if base == "moco":
        return L.widen_labels(L.identity_labels(n), width)
    y = rng.integers(0, 2, size=n)
    y = np.concatenate([y, [0, 1]])[:n]  # both classes always present
    if base == "supclr":
        return L.class_pair_weights(np.concatenate([y, y]), include_self=False)
    return L.class_pair_weights(y, include_self=True)


def check_linearity(base: str, instances: int = 100, seed: int = 7,
                    loss_bias: float = 0.0):
    """Mixing virtual labels must equal mixing the per-label losses exactly
    (cross-entropy losses are linear in the label rows)."""
    rng = Rng(seed)
    worst = 0.0
    for t in range(instances):
        n = 2 + int(rng.integers(0, 3))
        d = 3 + int(rng.integers(0, 3))
        tau = 0.2 + 0.3 * float(rng.random())
        value, width = _loss_with_labels(base, rng, n, d, 4, tau)
        rows = _base_label_rows(base, rng, n, width)
        na = rows.shape[0]
        perm = rng.permutation(na)
        lam = float(rng.random())
        mixed = L.mix_rows(rows, perm, lam)
        lhs = value(mixed) + loss_bias
        rhs = lam * value(rows) + (1.0 - lam) * value(rows[perm])
        worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-12, f"max |mixed - combined| = {worst:.3e}"


def check_byol_affine(instances: int = 100, seed: int = 11,
                      loss_bias: float = 0.0):
    """Mixed-target loss differs from the loss combination by exactly
    ||lam*u + (1-lam)*w||^2 - 1."""
    rng = Rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = 2 + int(rng.integers(0, 3))
        d = 3 + int(rng.integers(0, 3))
        preds = _rand_embs(rng, n, d)
        targets = _rand_embs(rng, n, d)
        t_hat = targets / np.linalg.norm(targets, axis=1, keepdims=True)
        perm = rng.permutation(n)
        lam = float(rng.random())
        eye = L.identity_labels(n)
        mixed = L.mix_rows(eye, perm, lam)
        lhs = L.byol(preds, targets, mixed).value + loss_bias
        base_i = L.byol(preds, targets, eye).value
        base_j = L.byol(preds, targets, eye[perm]).value
        u, w = t_hat, t_hat[perm]
        const = ((lam * u + (1.0 - lam) * w) ** 2).sum(axis=1) - 1.0
        rhs = lam * base_i + (1.0 - lam) * base_j + float(const.mean())
        worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-12, f"max affine-identity residual = {worst:.3e}"


def _loss_grad_cases(rng):
    """(name, value_fn, [(array, analytic_grad)]) triples on small instances."""
    n, d = 4, 5
    tau = 0.3
    cases = []

    a = _rand_embs(rng, n, d)
    k = _rand_embs(rng, n, d)
    v = L.mix_rows(L.identity_labels(n), rng.permutation(n), float(rng.random()))
    out = L.npair(a, k, v, tau)
    cases.append(("npair", lambda: L.npair(a, k, v, tau).value,
                  [(a, out.grad_anchor), (k, out.grad_keys)]))

    f = _rand_embs(rng, 2 * n, d)
    sv = L.positive_pair_labels(n)
    out = L.simclr(f, sv, tau)
    cases.append(("simclr", lambda: L.simclr(f, sv, tau).value,
                  [(f, out.grad_anchor)]))

    a2 = _rand_embs(rng, n, d)
    k2 = _rand_embs(rng, n, d)
    bank = L.MemoryBank(3, d, rng)
    mv = L.widen_labels(
        L.mix_rows(L.identity_labels(n), rng.permutation(n), float(rng.random())),
        n + 3)
    out = L.moco(a2, k2, bank, mv, tau)
    cases.append(("moco", lambda: L.moco(a2, k2, bank, mv, tau).value,
                  [(a2, out.grad_anchor)]))

    a3 = _rand_embs(rng, n, d)
    k3 = _rand_embs(rng, n, d)
    out = L.moco_kplus1(a3, k3, bank, tau)
    cases.append(("moco-detached", lambda: L.moco_kplus1(a3, k3, bank, tau).value,
                  [(a3, out.grad_anchor)]))

    p = _rand_embs(rng, n, d)
    t = _rand_embs(rng, n, d)
    bv = L.mix_rows(L.identity_labels(n), rng.permutation(n), float(rng.random()))
    out = L.byol(p, t, bv)
    cases.append(("byol", lambda: L.byol(p, t, bv).value, [(p, out.grad_anchor)]))

    y = np.array([0, 1, 0, 1])
    out = L.sup_npair(a, k, y, tau)
    cases.append(("sup-npair", lambda: L.sup_npair(a, k, y, tau).value,
                  [(a, out.grad_anchor), (k, out.grad_keys)]))

    out = L.supclr(f, y, tau)
    cases.append(("supclr", lambda: L.supclr(f, y, tau).value,
                  [(f, out.grad_anchor)]))

    feats = _rand_embs(rng, n, d)
    w = rng.normal((d, 3))
    b = rng.normal(3)
    yd = np.zeros((n, 3))
    yd[np.arange(n), rng.integers(0, 3, size=n)] = 1.0
    out = L.sup_ce(feats, w, b, yd)
    cases.append(("sup-ce", lambda: L.sup_ce(feats, w, b, yd).value,
                  [(feats, out.grad_anchor), (w, out.grad_params["W"]),
                   (b, out.grad_params["b"])]))
    return cases


def check_loss_gradients(instances: int = 8, seed: int = 3):
    worst = 0.0
    worst_name = ""
    for t in range(instances):
        rng = Rng(seed + 17 * t)
        for name, value_fn, pairs in _loss_grad_cases(rng):
            for x, analytic in pairs:
                numeric = finite_diff_grad(value_fn, x)
                err = max_rel_err(analytic, numeric)
                if err > worst:
                    worst, worst_name = err, name
    return worst < 1e-4, f"max rel err {worst:.3e} ({worst_name})"


def check_layer_gradients(instances: int = 6, seed: int = 5):
    """Finite differences through a net exercising linear, relu, batch norm,
    maxout, and both heads."""
    worst = 0.0
    for t in range(instances):
        rng = Rng(seed + 31 * t)
        spec = EncoderSpec(in_dim=5, hidden_dims=(8, 8), batch_norm=True,
                           maxout_sets=2, proj_hidden=6, proj_dim=4,
                           predictor=True)
        state = EncoderState.create(spec, rng)
        enc = state.encoder
        x = rng.normal((4, 5))
        direction = rng.normal((4, 4))

        def value():
            z, _ = enc.forward(x, "key")
            p, _ = enc.forward_prediction(z, "key")
            return float((p * direction).sum())

        z, cache = enc.forward(x, "key")
        _, pcache = enc.forward_prediction(z, "key")
        dz, grads = enc.backward_prediction(pcache, direction)
        grads.update(enc.backward(cache, dz))
        params = enc.named_params()
        for name, g in grads.items():
            numeric = finite_diff_grad(value, params[name])
            worst = max(worst, max_rel_err(g, numeric))
    return worst < 1e-4, f"max rel err {worst:.3e}"


def check_oracle_agreement(seed: int = 13):
    """Vectorized losses vs the straight-loop scalar references on fixed
    toy instances."""
    rng = Rng(seed)
    n, d, kb = 3, 4, 4
    tau = 0.2
    worst = 0.0
    a, k = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
    perm = rng.permutation(n)
    lam = float(rng.random())
    for v in (L.identity_labels(n), L.mix_rows(L.identity_labels(n), perm, lam)):
        worst = max(worst, abs(L.npair(a, k, v, tau).value
                               - npair_oracle(a, k, v, tau)))
    f = _rand_embs(rng, 2 * n, d)
    anchors = _rand_embs(rng, 2 * n, d)
    perm2 = rng.permutation(2 * n)
    for v in (L.positive_pair_labels(n),
              L.mix_rows(L.positive_pair_labels(n), perm2, lam)):
        worst = max(worst, abs(L.simclr(f, v, tau).value
                               - simclr_oracle(f, v, tau)))
        worst = max(worst, abs(L.simclr(f, v, tau, anchors=anchors).value
                               - simclr_oracle(f, v, tau, anchors=anchors)))
    bank = L.MemoryBank(kb, d, rng)
    for v in (L.widen_labels(L.identity_labels(n), n + kb),
              L.widen_labels(L.mix_rows(L.identity_labels(n), perm, lam), n + kb)):
        worst = max(worst, abs(L.moco(a, k, bank, v, tau).value
                               - moco_oracle(a, k, bank.vectors, v, tau)))
    worst = max(worst, abs(L.moco_kplus1(a, k, bank, tau).value
                           - moco_kplus1_oracle(a, k, bank.vectors, tau)))
    p, t = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
    for v in (L.identity_labels(n), L.mix_rows(L.identity_labels(n), perm, lam)):
        worst = max(worst, abs(L.byol(p, t, v).value - byol_oracle(p, t, v)))
    y = np.array([0, 1, 0])
    worst = max(worst, abs(L.sup_npair(a, k, y, tau).value
                           - npair_oracle(a, k, sup_npair_weights_oracle(y), tau)))
    y2 = np.concatenate([y, y])
    worst = max(worst, abs(L.supclr(f, y, tau).value
                           - simclr_oracle(f, supclr_weights_oracle(y2), tau)))
    w = rng.normal((d, 3))
    b = rng.normal(3)
    yd = np.zeros((n, 3))
    yd[np.arange(n), [0, 2, 1]] = 1.0
    worst = max(worst, abs(L.sup_ce(a, w, b, yd).value
                           - supce_oracle(a, w, b, yd)))
    return worst <= 1e-10, f"max |vectorized - loop| = {worst:.3e}"


def check_reductions(seed: int = 19):
    """lam in {0, 1} recovers the base losses; an empty bank reduces the
    momentum loss to the N-pair form; single-positive supervised N-pair
    equals N-pair."""
    rng = Rng(seed)
    n, d = 4, 5
    tau = 0.25
    a, k = _rand_embs(rng, n, d), _rand_embs(rng, n, d)
    perm = rng.permutation(n)
    eye = L.identity_labels(n)
    base = L.npair(a, k, eye, tau).value
    ok = True
    details = []
    v1 = L.mix_rows(eye, perm, 1.0)
    v0 = L.mix_rows(eye, perm, 0.0)
    if L.npair(a, k, v1, tau).value != base:
        ok, details = False, details + ["lam=1 mismatch"]
    if L.npair(a, k, v0, tau).value != L.npair(a, k, eye[perm], tau).value:
        ok, details = False, details + ["lam=0 mismatch"]
    if L.moco(a, k, None, eye, tau).value != base:
        ok, details = False, details + ["empty-bank mismatch"]
    y = np.arange(n)  # every class once -> single positive each
    if L.sup_npair(a, k, y, tau).value != base:
        ok, details = False, details + ["single-positive mismatch"]
    return ok, "; ".join(details) if details else "exact"


def check_fed_units():
    """fed(A, A) = 0; disjoint single-point sets at e1/e2 give exactly 2;
    commuting diagonal covariances match sum (sqrt(a_i) - sqrt(b_i))^2."""
    rng = Rng(23)
    x = rng.normal((10, 4))
    errs = [abs(fed(x, x))]
    e1 = np.zeros((2, 3))
    e1[:, 0] = 1.0
    e2 = np.zeros((2, 3))
    e2[:, 1] = 1.0
    errs.append(abs(fed(e1, e2) - 2.0))
    # same mean, diagonal covariances: build unnormalized gaussian clouds is
    # not exact, so compare the stats-level formula through the same sqrt path
    from .evaluation import embed_stats, psd_sqrt
    a = rng.normal((2000, 3))
    b = rng.normal((2000, 3)) * np.array([1.0, 2.0, 0.5])
    sa = np.diag(np.diag(embed_stats(a).cov))
    sb = np.diag(np.diag(embed_stats(b).cov))
    ra = psd_sqrt(sa)
    cross = psd_sqrt(ra @ sb @ ra)
    tr_term = float(np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    closed = float(((np.sqrt(np.diag(sa)) - np.sqrt(np.diag(sb))) ** 2).sum())
    errs.append(abs(tr_term - closed))
    worst = max(errs)
    return worst <= 1e-8, f"max unit-value error = {worst:.3e}"


def check_bank_fifo():
    """Three pushes of 2 into capacity 4 must retain pushes #2 and #3."""
    rng = Rng(29)
    bank = L.MemoryBank(4, 3, rng)
    def tagged(tag):
        keys = np.zeros((2, 3))
        keys[0] = [1.0, 0.0, 0.0]
        keys[1] = [0.0, 1.0, 0.0]
        return np.roll(keys, tag, axis=1)
    for tag in range(3):
        bank.push(tagged(tag))
    held = {tuple(v) for v in bank.vectors}
    expect = {tuple(v) for v in np.vstack([tagged(1), tagged(2)])}
    ok = held == expect and bank.capacity == 4
    return ok, "FIFO order held" if ok else f"bank holds {held}"


def check_schedule_continuity():
    sch = Schedule(base_lr=0.5, batch_size=512, warmup_epochs=10,
                   total_epochs=100)
    eps = 1e-9
    left = lr_at(sch, 10 - eps)
    right = lr_at(sch, 10 + eps)
    gap = abs(left - right)
    end = lr_at(sch, 100)
    mid = lr_at(sch, 55)
    ok = gap < 1e-6 and end == 0.0 and abs(mid - sch.scaled_lr / 2) < 1e-12
    return ok, f"boundary gap = {gap:.3e}"


CHECKS = {
    "linearity/npair": lambda bias=0.0: check_linearity("npair", loss_bias=bias),
    "linearity/simclr": lambda bias=0.0: check_linearity("simclr", loss_bias=bias),
    "linearity/moco": lambda bias=0.0: check_linearity("moco", loss_bias=bias),
    "linearity/supclr": lambda bias=0.0: check_linearity("supclr", loss_bias=bias),
    "linearity/sup-npair": lambda bias=0.0: check_linearity("sup_npair",
                                                            loss_bias=bias),
    "affine/byol": lambda bias=0.0: check_byol_affine(loss_bias=bias),
    "gradients/losses": lambda bias=0.0: check_loss_gradients(),
    "gradients/layers": lambda bias=0.0: check_layer_gradients(),
    "oracle/losses": lambda bias=0.0: check_oracle_agreement(),
    "reductions": lambda bias=0.0: check_reductions(),
    "fed/units": lambda bias=0.0: check_fed_units(),
    "bank/fifo": lambda bias=0.0: check_bank_fifo(),
    "schedule/continuity": lambda bias=0.0: check_schedule_continuity(),
}


def run_checks(only=None, loss_bias: float = 0.0):
    """Run the named invariant checks; loss_bias shifts loss values inside
    the linearity checks (a harness hook proving they catch violations)."""
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        try:
            ok, detail = fn(loss_bias)
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
