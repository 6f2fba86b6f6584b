"""View generation and input-space mixing.

Tabular-friendly augmentations (masking noise, additive Gaussian noise),
the two mixing operators (elementwise convex combination and contiguous
region swap over a declared spatial grid), and auxiliary-sample input mixing
that perturbs inputs without touching labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .mathcore import Rng, as_matrix, dirichlet_sample


@dataclass(frozen=True)
class MixSpec:
    operator: str = "mixup"  # mixup | cutmix
    alpha: float = 1.0
    granularity: str = "per_batch"  # per_batch | per_sample

    def __post_init__(self):
        if self.operator not in ("mixup", "cutmix"):
            raise ConfigError(f"unknown mix operator {self.operator!r}")
        if not self.alpha > 0:
            raise ConfigError(f"mix alpha must be > 0, got {self.alpha}")
        if self.granularity not in ("per_batch", "per_sample"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")


@dataclass(frozen=True)
class AugPolicy:
    """Per-view augmentation; all fields zero means views are exact copies."""

    mask_p: float = 0.0
    gauss_sigma: float = 0.0
    inputmix: bool = False
    inputmix_both_views: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError(f"mask_p must be in [0, 1], got {self.mask_p}")
        if self.gauss_sigma < 0:
            raise ConfigError(f"gauss_sigma must be >= 0, got {self.gauss_sigma}")


@dataclass
class ViewBatch:
    """Two views per instance; virtual labels are the implicit identity."""

    anchors: np.ndarray
    keys: np.ndarray
    lam: float | np.ndarray | None = None
    perm: np.ndarray | None = None

    def __post_init__(self):
        if self.anchors.shape != self.keys.shape:
            raise ShapeError("the two views must share a shape")

    @property
    def n(self) -> int:
        return self.anchors.shape[0]


def check_spatial(shape, dim: int) -> tuple:
    shape = tuple(int(s) for s in shape) if shape else ()
    if shape and int(np.prod(shape)) != dim:
        raise ShapeError(
            f"spatial shape {shape} does not tile the {dim} features"
        )
    if len(shape) > 2:
        raise ConfigError("spatial shapes beyond 2-D are not supported")
    return shape


def mask_noise(rng: Rng, x, p: float) -> np.ndarray:
    """Zero each entry independently with probability p (fresh mask)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must be in [0, 1], got {p}")
    x = np.asarray(x, dtype=np.float64)
    if p == 0.0:
        return x.copy()
    return x * (rng.random(x.shape) >= p)


def mixup_op(x_i, x_j, lam: float) -> np.ndarray:
    """lam * x_i + (1 - lam) * x_j, elementwise."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    return lam * x_i + (1.0 - lam) * x_j


def _region_sides(shape: tuple, lam: float) -> tuple:
    """Region side lengths whose cell count is nearest to (1-lam)*cells."""
    cells = int(np.prod(shape))
    target = (1.0 - lam) * cells
    if len(shape) == 1:
        return (int(round(target)),)
    h, w = shape
    best = None
    for rh in range(h + 1):
        for rw in range(w + 1):
            err = abs(rh * rw - target)
            aspect = abs(rh * w - rw * h)  # prefer shape-proportional regions
            key = (err, aspect, rh)
            if best is None or key < best[0]:
                best = (key, (rh, rw))
    return best[1]


def cutmix_op(rng: Rng, x_i, x_j, lam: float, shape) -> tuple[np.ndarray, float]:
    """Swap a uniformly placed contiguous region of relative area (1 - lam)
    from x_j into x_i. Returns (mixed, realized_lam) where realized_lam is
    the kept fraction after rounding to whole cells."""
    x_i = np.asarray(x_i, dtype=np.float64).ravel()
    x_j = np.asarray(x_j, dtype=np.float64).ravel()
    if x_i.shape != x_j.shape:
        raise ShapeError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    shape = check_spatial(shape, x_i.size)
    if not shape:
        raise ConfigError(
            "cutmix needs a declared spatial shape (values must correlate "
            "with their neighbors)"
        )
    cells = int(np.prod(shape))
    mixed = x_i.copy()
    if len(shape) == 1:
        (r,) = _region_sides(shape, lam)
        if r > 0:
            start = int(rng.integers(0, shape[0] - r + 1))
            mixed[start:start + r] = x_j[start:start + r]
        realized = 1.0 - r / cells
    else:
        h, w = shape
        rh, rw = _region_sides(shape, lam)
        if rh > 0 and rw > 0:
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            grid = mixed.reshape(h, w)
            grid[top:top + rh, left:left + rw] = \
                x_j.reshape(h, w)[top:top + rh, left:left + rw]
            realized = 1.0 - (rh * rw) / cells
        else:
            realized = 1.0
    return mixed, realized


def mix_batch(x, perm, lam, operator: str, spatial=(), rng: Rng | None = None):
    """Mix each row with its permuted partner. Returns (mixed, realized_lam)
    where realized_lam is what label interpolation must use (it differs from
    the request only under region rounding)."""
    x = as_matrix(x, "batch")
    perm = np.asarray(perm, dtype=int)
    n = x.shape[0]
    if perm.shape != (n,):
        raise ShapeError(f"permutation must have length {n}")
    lam_arr = np.asarray(lam, dtype=np.float64)
    per_sample = lam_arr.ndim > 0
    if np.any(lam_arr < 0) or np.any(lam_arr > 1):
        raise ConfigError("lam must be in [0, 1]")
    if operator == "mixup":
        lam_col = lam_arr.reshape(-1, 1) if per_sample else lam_arr
        mixed = lam_col * x + (1.0 - lam_col) * x[perm]
        return mixed, (lam_arr if per_sample else float(lam_arr))
    if operator != "cutmix":
        raise ConfigError(f"unknown mix operator {operator!r}")
    if rng is None:
        raise ConfigError("cutmix needs an rng for region placement")
    mixed = np.empty_like(x)
    realized = np.empty(n)
    lams = lam_arr if per_sample else np.full(n, float(lam_arr))
    for i in range(n):
        mixed[i], realized[i] = cutmix_op(rng, x[i], x[perm[i]], float(lams[i]),
                                          spatial)
    if per_sample:
        return mixed, realized
    return mixed, float(realized[0])


def inputmix(rng: Rng, principal, aux) -> np.ndarray:
    """Convex combination of a principal sample with auxiliary samples.

    Coefficients are (0.5*d1 + 0.5, 0.5*d2, ..., 0.5*d_m) with d ~
    Dirichlet(1,...,1), so the principal keeps weight >= 0.5 and its label;
    the auxiliaries act as structured noise.
    """
    principal = np.asarray(principal, dtype=np.float64)
    aux = [np.asarray(a, dtype=np.float64) for a in aux]
    for a in aux:
        if a.shape != principal.shape:
            raise ShapeError("auxiliary samples must match the principal shape")
    d = dirichlet_sample(rng, len(aux) + 1)
    out = (0.5 * d[0] + 0.5) * principal
    for coef, a in zip(0.5 * d[1:], aux):
        out = out + coef * a
    return out


def inputmix_batch(rng: Rng, x, num_aux: int = 2) -> np.ndarray:
    """Apply inputmix rowwise, drawing each auxiliary set from an
    independent random permutation of the batch."""
    x = as_matrix(x, "batch")
    n = x.shape[0]
    perms = [rng.permutation(n) for _ in range(num_aux)]
    out = np.empty_like(x)
    for i in range(n):
        out[i] = inputmix(rng, x[i], [x[p[i]] for p in perms])
    return out


def make_views(rng: Rng, x, policy: AugPolicy | None = None) -> ViewBatch:
    """Draw two independently augmented views per instance. An empty policy
    yields exact copies (the no-augmentation regime)."""
    x = as_matrix(x, "batch")
    policy = policy or AugPolicy()

    def one_view():
        v = x.copy()
        if policy.mask_p > 0.0:
            v = mask_noise(rng, v, policy.mask_p)
        if policy.gauss_sigma > 0.0:
            v = v + policy.gauss_sigma * rng.normal(v.shape)
        return v

    a = one_view()
    b = one_view()
    if policy.inputmix:
        a = inputmix_batch(rng, a)
        if policy.inputmix_both_views:
            b = inputmix_batch(rng, b)
    return ViewBatch(a, b)
