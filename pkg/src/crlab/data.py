"""Synthetic Gaussian-mixture datasets, vector augmentation and batch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ConfigError, make_rng, spawn_rng


@dataclass
class DatasetSpec:
    n_classes: int = 4
    input_dim: int = 8
    noise: float = 1.0
    labels_per_class: int = 4
    n_unlabeled: int = 2000
    n_test: int = 2000
    seed: int = 0
    center_radius: float = 2.0
    centers: np.ndarray | None = None  # K x D; drawn from the seed when None

    def resolve_centers(self) -> np.ndarray:
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=np.float64)
            if c.shape != (self.n_classes, self.input_dim):
                raise ConfigError(f"centers must be {self.n_classes}x{self.input_dim}, got {c.shape}")
            return c
        return default_centers(self.n_classes, self.input_dim, self.center_radius, self.seed)

    def validate(self) -> None:
        if self.n_classes < 1 or self.input_dim < 1:
            raise ConfigError("n_classes and input_dim must be >= 1")
        if self.labels_per_class < 1:
            raise ConfigError("labels_per_class must be >= 1")
        if min(self.n_unlabeled, self.n_test) < 0 or self.noise < 0:
            raise ConfigError("counts and noise must be non-negative")
        c = self.resolve_centers()
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        if self.n_classes > 1 and np.min(d[~np.eye(self.n_classes, dtype=bool)]) == 0:
            raise ConfigError("cluster centers must be pairwise distinct")


def default_centers(k: int, d: int, radius: float, seed: int) -> np.ndarray:
    """Random directions on a sphere of the given radius, re-drawn until the
    minimum pairwise distance is at least the radius (i.e. no near-duplicate
    classes)."""
    rng = spawn_rng(seed, 101)
    for _ in range(1000):
        c = rng.standard_normal((k, d))
        c = radius * c / np.linalg.norm(c, axis=1, keepdims=True)
        if k == 1:
            return c
        dist = np.linalg.norm(c[:, None] - c[None], axis=-1)
        if dist[~np.eye(k, dtype=bool)].min() >= radius:
            return c
    return c


class Split:
    """A set of examples. Labels and OOD flags are hidden behind counted
    accessors so training code can be audited for never touching them."""

    def __init__(self, x, labels, is_ood=None, name=""):
        self.x = np.asarray(x, dtype=np.float64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self._is_ood = np.zeros(len(self.x), dtype=bool) if is_ood is None else np.asarray(is_ood, bool)
        self.name = name
        self.hidden_reads = 0

    def __len__(self):
        return len(self.x)

    @property
    def labels(self) -> np.ndarray:
        self.hidden_reads += 1
        return self._labels

    @property
    def is_ood(self) -> np.ndarray:
        self.hidden_reads += 1
        return self._is_ood


@dataclass
class Dataset:
    labeled: Split
    unlabeled: Split
    test: Split
    spec: DatasetSpec

    def __iter__(self):
        return iter((self.labeled, self.unlabeled, self.test))


def _draw(rng, centers, noise, n):
    y = rng.integers(0, len(centers), size=n)
    x = centers[y] + noise * rng.standard_normal((n, centers.shape[1]))
    return x, y


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Stratified labeled set plus i.i.d. unlabeled and test sets."""
    spec.validate()
    centers = spec.resolve_centers()
    rng = make_rng(spec.seed)
    k, d = centers.shape
    y_lab = np.repeat(np.arange(k), spec.labels_per_class)
    x_lab = centers[y_lab] + spec.noise * rng.standard_normal((len(y_lab), d))
    x_unl, y_unl = _draw(rng, centers, spec.noise, spec.n_unlabeled)
    x_test, y_test = _draw(rng, centers, spec.noise, spec.n_test)
    return Dataset(
        Split(x_lab, y_lab, name="labeled"),
        Split(x_unl, y_unl, name="unlabeled"),
        Split(x_test, y_test, name="test"),
        spec,
    )


@dataclass(frozen=True)
class AugmentParams:
    sigma_weak: float = 0.05
    sigma_strong: float = 0.25
    p_drop: float = 0.1
    gamma: float = 0.2


def augment(x: np.ndarray, strength: str, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Weak: additive Gaussian noise. Strong: larger noise, then coordinate
    dropout, then one global scale factor per row in [1-gamma, 1+gamma].

    Works on a single vector or row-wise on a matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    if strength == "weak":
        out = rows + params.sigma_weak * rng.standard_normal(rows.shape)
    elif strength == "strong":
        noisy = rows + params.sigma_strong * rng.standard_normal(rows.shape)
        keep = rng.random(rows.shape) >= params.p_drop
        scale = rng.uniform(1.0 - params.gamma, 1.0 + params.gamma, size=(rows.shape[0], 1))
        out = noisy * keep * scale
    else:
        raise ConfigError(f"unknown augmentation strength {strength!r}")
    return out.reshape(x.shape)


@dataclass
class SampleBatch:
    x_labeled: np.ndarray  # B x D, weakly augmented
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray  # muB x D, clean
    unlabeled_index: np.ndarray  # rows of the unlabeled pool


@dataclass
class AugmentedBatch:
    weak: np.ndarray  # muB x D, one weak view per source
    strong: np.ndarray  # m*muB x D
    source: np.ndarray  # source row (0..muB-1) of each strong view
    m: int = 1

    @property
    def n_sources(self) -> int:
        return len(self.weak)


def sample_batch(
    labeled: Split,
    unlabeled: Split,
    B: int,
    mu: int,
    m: int,
    rng: np.random.Generator,
    aug: AugmentParams = AugmentParams(),
) -> tuple[SampleBatch, AugmentedBatch]:
    """Draw B labeled and mu*B unlabeled examples with replacement.

    Strong views are laid out view-major: rows [j*muB, (j+1)*muB) hold the
    j-th view of every source.
    """
    if min(B, mu, m) < 1:
        raise ConfigError(f"B, mu and m must be >= 1 (got {B}, {mu}, {m})")
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ConfigError("labeled and unlabeled pools must be non-empty")
    li = rng.integers(0, len(labeled), size=B)
    ui = rng.integers(0, len(unlabeled), size=mu * B)
    x_lab = augment(labeled.x[li], "weak", rng, aug)
    x_unl = unlabeled.x[ui]
    weak = augment(x_unl, "weak", rng, aug)
    strong = augment(np.tile(x_unl, (m, 1)), "strong", rng, aug)
    source = np.tile(np.arange(mu * B), m)
    return (
        SampleBatch(x_lab, labeled._labels[li], x_unl, ui),
        AugmentedBatch(weak, strong, source, m),
    )


@dataclass
class OodSpec:
    count: int = 0
    preset: str = "far"  # far | near
    seed: int = 0
    n_components: int = 4
    min_sigma_gap: float = 5.0  # far preset: distance to every class center, in noise units


def ood_centers(ood: OodSpec, data_spec: DatasetSpec) -> np.ndarray:
    """Far: every OOD center lies at least ``min_sigma_gap`` noise scales from
    all class centers. Near: OOD centers sit halfway between a class center and
    a random nearby point, so the supports overlap."""
    centers = data_spec.resolve_centers()
    rng = spawn_rng(ood.seed, 202)
    d = centers.shape[1]
    gap = ood.min_sigma_gap * max(data_spec.noise, 1e-12)
    scale = float(np.max(np.linalg.norm(centers, axis=1)))
    out = []
    if ood.preset == "far":
        radius = scale + gap
        while len(out) < ood.n_components:
            c = rng.standard_normal(d)
            c = radius * c / np.linalg.norm(c)
            if np.min(np.linalg.norm(centers - c, axis=1)) >= gap:
                out.append(c)
            else:
                radius *= 1.05
    elif ood.preset == "near":
        for i in range(ood.n_components):
            base = centers[i % len(centers)]
            jitter = rng.standard_normal(d)
            jitter *= 1.5 * data_spec.noise / np.linalg.norm(jitter)
            out.append(base + jitter)
    else:
        raise ConfigError(f"unknown OOD preset {ood.preset!r}")
    return np.asarray(out)


def inject_ood(unlabeled: Split, ood: OodSpec, data_spec: DatasetSpec) -> Split:
    """Union of the unlabeled pool and ``ood.count`` OOD samples, shuffled.

    OOD rows carry label -1 and a hidden is_ood flag.
    """
    if ood.count < 0:
        raise ConfigError("OOD count must be >= 0")
    if ood.count == 0:
        return unlabeled
    rng = spawn_rng(ood.seed, 203)
    c = ood_centers(ood, data_spec)
    x_ood, _ = _draw(rng, c, data_spec.noise, ood.count)
    x = np.concatenate([unlabeled.x, x_ood])
    y = np.concatenate([unlabeled._labels, -np.ones(ood.count, dtype=np.int64)])
    flag = np.concatenate([unlabeled._is_ood, np.ones(ood.count, dtype=bool)])
    perm = rng.permutation(len(x))
    return Split(x[perm], y[perm], flag[perm], name=unlabeled.name)


CSV_SPLITS = ("labeled", "unlabeled", "test")


def export_csv(dataset: Dataset, path: str | Path) -> None:
    """Header ``x0..x{D-1},label,is_ood,split``; floats written with repr."""
    d = dataset.labeled.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label", "is_ood", "split"])
        for split in dataset:
            for row, y, o in zip(split.x, split._labels, split._is_ood):
                w.writerow([repr(float(v)) for v in row] + [int(y), int(o), split.name])


def import_csv(path: str | Path, spec: DatasetSpec | None = None) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = header.index("label")
        if header[d:] != ["label", "is_ood", "split"] or header[:d] != [f"x{i}" for i in range(d)]:
            raise ConfigError(f"unexpected CSV header {header}")
        parts = {s: ([], [], []) for s in CSV_SPLITS}
        for row in r:
            if row[-1] not in parts:
                raise ConfigError(f"unknown split {row[-1]!r}")
            xs, ys, os_ = parts[row[-1]]
            xs.append([float(v) for v in row[:d]])
            ys.append(int(row[d]))
            os_.append(bool(int(row[d + 1])))
    splits = [
        Split(np.asarray(parts[s][0], dtype=np.float64).reshape(-1, d), parts[s][1], parts[s][2], name=s)
        for s in CSV_SPLITS
    ]
    if spec is None:
        lab = splits[0]._labels
        k = int(lab.max()) + 1 if len(lab) else 1
        spec = DatasetSpec(n_classes=k, input_dim=d, n_unlabeled=len(splits[1]), n_test=len(splits[2]))
    return Dataset(*splits, spec)
