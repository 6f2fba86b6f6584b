"""Deterministic numeric substrate: seeded RNG, Beta/Dirichlet sampling,
symmetric eigendecomposition, PSD square root, pseudoinverse, cosine similarity.

All arrays are 64-bit float, row-major. Every operation is a pure function
except Rng, which advances its own state.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


class Rng:
    """Seeded deterministic generator (PCG64 stream).

    The same seed yields the same sample stream on every run and platform.
    Workers must not share an Rng; derive an independent child stream with
    ``child(stream_id)``, which reseeds with ``seed XOR stream_id``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, stream_id: int) -> "Rng":
        return Rng(self.seed ^ (int(stream_id) & _MASK64))

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def standard_gamma(self, shape, size=None):
        return self._gen.standard_gamma(shape, size)

    def unit_vectors(self, n: int, dim: int) -> np.ndarray:
        """n random directions on the unit sphere in R^dim."""
        v = self._gen.standard_normal((n, dim))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # a zero draw has probability 0; resample defensively anyway
        while np.any(norms == 0.0):
            bad = norms[:, 0] == 0.0
            v[bad] = self._gen.standard_normal((int(bad.sum()), dim))
            norms = np.linalg.norm(v, axis=1, keepdims=True)
        return v / norms


def beta_sample(rng: Rng, alpha: float) -> float:
    """One draw from Beta(alpha, alpha), computed as g1 / (g1 + g2) with
    g1, g2 ~ Gamma(alpha, 1).

    The gamma draws use the generator's standard_gamma, i.e. the
    Marsaglia-Tsang squeeze for alpha >= 1 and the boost transform
    Gamma(a) = Gamma(a+1) * U^(1/a) for alpha < 1, so the stream is
    reproducible from the seed alone.
    """
    if not alpha > 0:
        raise ConfigError(f"beta_sample requires alpha > 0, got {alpha}")
    g1 = rng.standard_gamma(alpha)
    g2 = rng.standard_gamma(alpha)
    return float(g1 / (g1 + g2))


def dirichlet_sample(rng: Rng, k: int) -> np.ndarray:
    """One draw from Dirichlet(1, ..., 1) over k components.

    Components are nonnegative and sum to 1 within 1e-12.
    """
    if k < 2:
        raise ConfigError(f"dirichlet_sample requires k >= 2, got {k}")
    g = rng.standard_gamma(1.0, size=k)
    return g / g.sum()


def cosine_sim(a, b) -> float:
    """Inner product of the two L2-normalized vectors; in [-1, 1]."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_sim got a zero-norm vector (degenerate embedding)")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix: S = V diag(w) V^T.

    The input is symmetrized as (S + S^T)/2 before factorization; V has
    orthonormal columns, eigenvalues ascending.
    """
    s = as_matrix(s, "S")
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {s.shape}")
    sym = 0.5 * (s + s.T)
    w, v = np.linalg.eigh(sym)
    return w, v


def psd_sqrt(s) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix.

    Eigenvalues in [-1e-6 * ||S||, 0) are clamped to 0; anything more
    negative raises, signalling a genuinely non-PSD input.
    """
    w, v = sym_eig(s)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if scale > 0.0 and float(w.min()) < -1e-6 * scale:
        raise NumericError(
            f"psd_sqrt: eigenvalue {w.min():.3e} is materially negative "
            f"(threshold {-1e-6 * scale:.3e})"
        )
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def pinv(a, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse via eigendecomposition of A^T A or A A^T.

    Singular values below tol * (max singular value) are treated as zero.
    """
    a = as_matrix(a, "A")
    if tol < 0:
        raise ConfigError(f"pinv tolerance must be >= 0, got {tol}")
    n, m = a.shape
    if n >= m:
        w, v = sym_eig(a.T @ a)  # A^T A = V S^2 V^T
        basis = v
        gram_of_rows = False
    else:
        w, v = sym_eig(a @ a.T)  # A A^T = U S^2 U^T
        basis = v
        gram_of_rows = True
    sig2 = np.clip(w, 0.0, None)
    smax = float(np.sqrt(sig2.max())) if sig2.size else 0.0
    if smax == 0.0:
        return np.zeros((m, n))
    keep = np.sqrt(sig2) > tol * smax
    inv2 = np.zeros_like(sig2)
    inv2[keep] = 1.0 / sig2[keep]
    core = basis @ np.diag(inv2) @ basis.T
    if gram_of_rows:
        return a.T @ core  # A^+ = A^T U S^-2 U^T
    return core @ a.T  # A^+ = V S^-2 V^T A^T
