"""Dataset ingestion, synthetic benchmarks, deterministic splits, batching.

CSV files are comma-separated with a header row, UTF-8, '.' decimal point.
An optional JSON manifest next to the file can declare the label column,
spatial shape, and class count.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .augment import check_spatial
from .errors import ConfigError, DataError
from .mathcore import Rng, as_matrix

VAR_FLOOR = 1e-8


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int = 0
    spatial: tuple = ()
    name: str = "dataset"

    def __post_init__(self):
        self.features = as_matrix(self.features, f"{self.name} features")
        self.spatial = check_spatial(self.spatial, self.features.shape[1])
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if self.labels.size != self.features.shape[0]:
                raise DataError(
                    f"{self.labels.size} labels for {self.features.shape[0]} rows"
                )
            if self.labels.size and self.labels.min() < 0:
                raise DataError("labels must be nonnegative integers")
            if self.n_classes <= 0:
                self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
            elif self.labels.size and self.labels.max() >= self.n_classes:
                raise DataError(
                    f"label {self.labels.max()} out of range for C={self.n_classes}"
                )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train fraction must be in (0, 1), got {self.train_fraction}"
            )

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.train_fraction


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def standardize(ds: Dataset, stats: NormStats | None = None):
    """Per-column zero-mean/unit-variance features. When stats is None they
    are computed from ds (the training split) and returned for reuse on the
    test split, so no test statistics leak."""
    if stats is None:
        mean = ds.features.mean(axis=0)
        var = ds.features.var(axis=0)
        stats = NormStats(mean, np.sqrt(np.maximum(var, VAR_FLOOR)))
    out = replace(ds, features=(ds.features - stats.mean) / stats.std)
    return out, stats


def load_csv(path: str, label_column: str | None = None, normalize: bool = False,
             spatial=(), name: str | None = None) -> Dataset:
    """Load a rectangular numeric CSV with a header row.

    When normalize is set, features are standardized with this file's own
    statistics; for a train/test pair, load raw and use standardize() with
    the training split's stats instead.
    """
    import csv as _csv

    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path!r}: {exc}") from exc
    with fh:
        reader = _csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path!r} is empty") from None
        header = [h.strip() for h in header]
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise DataError(
                    f"label column {label_column!r} not found; "
                    f"available: {header}"
                )
            label_idx = header.index(label_column)
        rows, labels = [], []
        for rno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path!r} row {rno}: {len(row)} cells, expected {len(header)}"
                )
            vals = []
            for cno, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path!r} row {rno}, column {header[cno]!r}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
                vals.append(v)
            if label_idx is not None:
                lab = vals.pop(label_idx)
                if lab != int(lab):
                    raise DataError(
                        f"{path!r} row {rno}: label {lab} is not integer-coded"
                    )
                labels.append(int(lab))
            rows.append(vals)
    if not rows:
        raise DataError(f"{path!r} has a header but no data rows")
    ds = Dataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64) if label_idx is not None else None,
        spatial=spatial,
        name=name or os.path.splitext(os.path.basename(path))[0],
    )
    if normalize:
        ds, _ = standardize(ds)
    return ds


def manifest_path(data_path: str) -> str:
    return os.path.splitext(data_path)[0] + ".manifest.json"


def write_manifest(data_path: str, label_column: str | None, spatial=(),
                   n_classes: int = 0):
    doc = {
        "label_column": label_column,
        "spatial": list(spatial),
        "classes": n_classes,
    }
    with open(manifest_path(data_path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_with_manifest(path: str, normalize: bool = False) -> Dataset:
    """Load a CSV, honoring its JSON manifest when one sits next to it."""
    label_column, spatial, classes = None, (), 0
    mpath = manifest_path(path)
    if os.path.exists(mpath):
        try:
            with open(mpath, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"bad manifest {mpath!r}: {exc}") from exc
        label_column = doc.get("label_column")
        spatial = tuple(doc.get("spatial") or ())
        classes = int(doc.get("classes") or 0)
    ds = load_csv(path, label_column=label_column, normalize=normalize,
                  spatial=spatial)
    if classes:
        if ds.labels is not None and ds.labels.size and ds.labels.max() >= classes:
            raise DataError(
                f"manifest declares {classes} classes but {path!r} holds "
                f"label {ds.labels.max()}"
            )
        ds.n_classes = classes
    return ds


def synth_blobs(rng: Rng, n: int, n_classes: int, d_signal: int, d_noise: int,
                sep: float) -> Dataset:
    """Balanced Gaussian clusters with unit covariance.

    Cluster means have norm `sep`, placed on the positive then negative
    signal axes (random unit directions once those run out), so distinct
    classes sit at least sep*sqrt(2) apart for sep > 0.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if d_signal < 1:
        raise ConfigError("need at least one signal dimension")
    means = blob_means(rng, n_classes, d_signal, sep)
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes), counts)
    feats = np.empty((n, d_signal + d_noise))
    feats[:, :d_signal] = means[labels] + rng.normal((n, d_signal))
    if d_noise:
        feats[:, d_signal:] = rng.normal((n, d_noise))
    order = rng.permutation(n)
    return Dataset(
        features=feats[order],
        labels=labels[order],
        n_classes=n_classes,
        name=f"blobs-c{n_classes}-sep{sep:g}",
    )


def blob_means(rng: Rng, n_classes: int, d_signal: int, sep: float) -> np.ndarray:
    means = np.zeros((n_classes, d_signal))
    for c in range(n_classes):
        if c < d_signal:
            means[c, c] = sep
        elif c < 2 * d_signal:
            means[c, c - d_signal] = -sep
        else:
            means[c] = sep * rng.unit_vectors(1, d_signal)[0]
    return means


def split(ds: Dataset, spec: SplitSpec):
    """Deterministic train/test split, class-stratified when labels exist."""
    rng = Rng(spec.seed)
    n = ds.n
    if ds.labels is None:
        order = rng.permutation(n)
        k = int(round(spec.train_fraction * n))
        train_idx, test_idx = order[:k], order[k:]
    else:
        train_parts, test_parts = [], []
        for c in range(ds.n_classes):
            members = np.flatnonzero(ds.labels == c)
            members = members[rng.permutation(members.size)]
            k = int(round(spec.train_fraction * members.size))
            train_parts.append(members[:k])
            test_parts.append(members[k:])
        train_idx = np.concatenate(train_parts)
        test_idx = np.concatenate(test_parts)
        train_idx = train_idx[rng.permutation(train_idx.size)]
        test_idx = test_idx[rng.permutation(test_idx.size)]
    if train_idx.size == 0 or test_idx.size == 0:
        raise ConfigError("split leaves one side empty")
    return ds.take(train_idx), ds.take(test_idx)


def batches(rng: Rng, ds: Dataset | int, batch_size: int, drop_last: bool = False):
    """One epoch of shuffled index blocks. Deterministic given the rng; the
    trainer derives a child rng per (seed, epoch)."""
    n = ds if isinstance(ds, int) else ds.n
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        block = order[start:start + batch_size]
        if drop_last and block.size < batch_size:
            return
        yield block
