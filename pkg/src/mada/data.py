"""Synthetic multimode domain-shift tasks, CSV import/export and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import ConfigError

UNLABELED = -1
SOURCE = "source"
TARGET = "target"


class CsvSchemaError(ValueError):
    """Header or column layout does not match the feature CSV schema."""


class CsvParseError(ValueError):
    """A row could not be parsed."""


@dataclass(eq=False)
class Dataset:
    """Feature rows with training labels.

    ``labels`` is what training may see: class indices for source rows and
    ``UNLABELED`` for target rows. ``truth`` optionally carries ground-truth
    target labels for evaluation only.
    """

    features: np.ndarray
    labels: np.ndarray
    domain: str
    class_count: int
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(self.labels):
            raise ConfigError(f"features of shape {feats.shape} do not match {len(self.labels)} labels")
        self.features = feats
        if self.domain not in (SOURCE, TARGET):
            raise ConfigError(f"domain must be {SOURCE!r} or {TARGET!r}, got {self.domain!r}")
        if self.labels.size and self.labels.max() >= self.class_count:
            raise ConfigError(f"labels exceed class_count={self.class_count}")
        if self.labels.size and self.labels.min() < UNLABELED:
            raise ConfigError("labels must be class indices or -1")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            if self.truth.shape != self.labels.shape:
                raise ConfigError("truth must have one entry per row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def eval_labels(self) -> np.ndarray:
        """Ground truth for evaluation: ``truth`` if present, else ``labels``."""
        return self.labels if self.truth is None else self.truth


@dataclass
class SyntheticConfig:
    class_count: int = 4
    modes_per_class: int = 1
    samples_per_class: int = 500
    dim: int = 2
    radius: float = 3.0
    mode_spread: float = 0.8
    centers: list[list[float]] | None = None
    rotation_deg: float = 0.0
    translation: list[float] = field(default_factory=list)
    noise_sigma: float = 0.35
    swap_prone: bool = False
    swap_m: int = 1
    swap_eps_deg: float = 5.0
    shared_stream: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        if self.modes_per_class < 1 or self.samples_per_class < 1:
            raise ConfigError("modes_per_class and samples_per_class must be positive")
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if self.swap_prone and self.swap_m < 1:
            raise ConfigError("swap_m must be a positive integer")
        if self.centers is not None:
            if len(self.centers) != self.class_count:
                raise ConfigError("centers needs one entry per class")
            if any(len(c) != self.dim for c in self.centers):
                raise ConfigError(f"every center needs {self.dim} coordinates")
        if self.translation and len(self.translation) != self.dim:
            raise ConfigError(f"translation needs {self.dim} coordinates")

    @property
    def target_rotation_deg(self) -> float:
        if self.swap_prone:
            return 360.0 / self.class_count * self.swap_m + self.swap_eps_deg
        return self.rotation_deg


def swap_prone_config(**overrides) -> SyntheticConfig:
    """Four classes on a radius-3 circle, target rotated 95 degrees."""
    base = dict(class_count=4, samples_per_class=500, radius=3.0, noise_sigma=0.35,
                swap_prone=True, swap_m=1, swap_eps_deg=5.0)
    base.update(overrides)
    return SyntheticConfig(**base)


def moderate_shift_config(**overrides) -> SyntheticConfig:
    """Four classes on a radius-3 circle, target rotated 30 degrees."""
    base = dict(class_count=4, samples_per_class=500, radius=3.0, noise_sigma=0.35, rotation_deg=30.0)
    base.update(overrides)
    return SyntheticConfig(**base)


def class_centers(cfg: SyntheticConfig) -> np.ndarray:
    if cfg.centers is not None and not cfg.swap_prone:
        return np.asarray(cfg.centers, dtype=np.float64)
    angles = 2.0 * np.pi * np.arange(cfg.class_count) / cfg.class_count
    out = np.zeros((cfg.class_count, cfg.dim))
    out[:, 0] = cfg.radius * np.cos(angles)
    out[:, 1] = cfg.radius * np.sin(angles)
    return out


def mode_centers(cfg: SyntheticConfig) -> np.ndarray:
    """Array of shape (K, modes_per_class, dim)."""
    centers = class_centers(cfg)
    m = cfg.modes_per_class
    offsets = np.zeros((m, cfg.dim))
    if m > 1:
        phi = 2.0 * np.pi * np.arange(m) / m
        offsets[:, 0] = cfg.mode_spread * np.cos(phi)
        offsets[:, 1] = cfg.mode_spread * np.sin(phi)
    return centers[:, None, :] + offsets[None, :, :]


def target_transform(cfg: SyntheticConfig, points: np.ndarray) -> np.ndarray:
    """Rotate in the first two coordinates, then translate."""
    theta = math.radians(cfg.target_rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    out = points.copy()
    x, y = points[..., 0], points[..., 1]
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    if cfg.translation:
        out = out + np.asarray(cfg.translation, dtype=np.float64)
    return out


def _sample(modes: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k, m, d = modes.shape
    n = cfg.samples_per_class
    feats, labels = [], []
    for c in range(k):
        which = np.arange(n) % m
        feats.append(modes[c, which] + cfg.noise_sigma * rng.standard_normal((n, d)))
        labels.append(np.full(n, c))
    return np.concatenate(feats), np.concatenate(labels)


def gen_multimode(cfg: SyntheticConfig) -> tuple[Dataset, Dataset, np.ndarray]:
    """Sample a labeled source domain and a shifted, unlabeled target domain.

    Target modes are the source modes passed through :func:`target_transform`.
    Returns ``(source, target, target_truth)``; ``target.truth`` holds the
    same labels.
    """
    cfg.validate()
    src_modes = mode_centers(cfg)
    tgt_modes = target_transform(cfg, src_modes)
    root = np.random.SeedSequence(cfg.seed)
    s_seq, t_seq = root.spawn(2)
    rng_s = np.random.default_rng(s_seq)
    rng_t = np.random.default_rng(s_seq if cfg.shared_stream else t_seq)
    xs, ys = _sample(src_modes, cfg, rng_s)
    xt, yt = _sample(tgt_modes, cfg, rng_t)
    source = Dataset(xs, ys, SOURCE, cfg.class_count)
    target = Dataset(xt, np.full(len(yt), UNLABELED), TARGET, cfg.class_count, truth=yt)
    return source, target, yt


def drop_classes(ds: Dataset, remove) -> Dataset:
    """Delete every row whose class is in ``remove``; the label space is kept.

    Target rows are matched by their evaluation-only ground truth.
    """
    remove = set(int(c) for c in remove)
    if any(c < 0 or c >= ds.class_count for c in remove):
        raise ConfigError(f"classes to remove must lie in [0, {ds.class_count})")
    keep = ~np.isin(ds.eval_labels(), list(remove))
    return replace(
        ds,
        features=ds.features[keep],
        labels=ds.labels[keep],
        truth=None if ds.truth is None else ds.truth[keep],
    )


# --------------------------------------------------------------------------
# CSV: header f0,...,f{d-1},label,domain; label -1 = unlabeled; domain 1/0.


def save_csv(path: str | Path, ds: Dataset, labels: np.ndarray | None = None) -> None:
    """Write ``ds`` in the feature CSV schema.

    Floats use the shortest repr that round-trips exactly. ``labels``
    overrides the label column (used to write evaluation ground truth).
    """
    labels = ds.labels if labels is None else np.asarray(labels)
    dom = "1" if ds.domain == SOURCE else "0"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label", "domain"])
        for row, lab in zip(ds.features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab), dom])


def load_csv(
    path: str | Path,
    class_count: int | None = None,
    domain: str | None = None,
    truth_path: str | Path | None = None,
) -> Dataset:
    """Parse a feature CSV into a :class:`Dataset`.

    Rows must share one domain unless ``domain`` selects a subset.
    ``truth_path`` names a companion file with a single ``label`` column
    holding evaluation-only ground truth.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvSchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    expected = [f"f{j}" for j in range(d)] + ["label", "domain"]
    if d < 1 or header != expected:
        raise CsvSchemaError(f"{path}: header must be f0,...,f{{d-1}},label,domain, got {','.join(header)}")
    feats, labels, doms = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise CsvSchemaError(f"{path}:{lineno}: expected {d + 2} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:d]])
            labels.append(int(row[d]))
            dom = int(row[d + 1])
        except ValueError as exc:
            raise CsvParseError(f"{path}:{lineno}: {exc}") from None
        if dom not in (0, 1) or labels[-1] < UNLABELED:
            raise CsvParseError(f"{path}:{lineno}: bad label/domain value")
        doms.append(dom)
    feats_arr = np.array(feats, dtype=np.float64).reshape(len(feats), d)
    labels_arr = np.array(labels, dtype=np.int64)
    doms_arr = np.array(doms, dtype=np.int64)
    if domain is not None:
        keep = doms_arr == (1 if domain == SOURCE else 0)
        feats_arr, labels_arr, doms_arr = feats_arr[keep], labels_arr[keep], doms_arr[keep]
        tag = domain
    else:
        if len(set(doms_arr.tolist())) > 1:
            raise CsvSchemaError(f"{path}: rows from both domains; pass domain= to select one")
        tag = SOURCE if (doms_arr.size == 0 or doms_arr[0] == 1) else TARGET
    truth = None
    if truth_path is not None:
        truth = _load_truth(truth_path)
        if len(truth) != len(labels_arr):
            raise CsvSchemaError(f"{truth_path}: {len(truth)} labels for {len(labels_arr)} rows")
    if class_count is None:
        seen = [labels_arr.max(initial=-1)]
        if truth is not None:
            seen.append(truth.max(initial=-1))
        class_count = int(max(seen)) + 1
    return Dataset(feats_arr, labels_arr, tag, class_count, truth=truth)


def _load_truth(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["label"]:
        raise CsvSchemaError(f"{path}: header must be 'label'")
    try:
        return np.array([int(r[0]) for r in rows[1:] if r], dtype=np.int64)
    except ValueError as exc:
        raise CsvParseError(f"{path}: {exc}") from None


def save_truth(path: str | Path, labels: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("label\n")
        for lab in labels:
            fh.write(f"{int(lab)}\n")


# --------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    """Source rows first, then target rows."""

    x: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    source_count: int
    target_count: int

    @property
    def n(self) -> int:
        return self.source_count + self.target_count


def make_batch(xs: np.ndarray, ys: np.ndarray, xt: np.ndarray) -> Batch:
    ns, nt = len(xs), len(xt)
    dom = np.concatenate([np.ones((ns, 1)), np.zeros((nt, 1))])
    return Batch(np.concatenate([xs, xt]), np.asarray(ys, dtype=np.int64), dom, ns, nt)


def _epoch_cycle(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    pos = 0
    while True:
        take = []
        need = size
        while need:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            chunk = order[pos : pos + need]
            take.append(chunk)
            pos += len(chunk)
            need -= len(chunk)
        yield np.concatenate(take)


def make_batches(source: Dataset, target: Dataset, batch_source: int, batch_target: int, seed: int) -> Iterator[Batch]:
    """Endless stream of batches; each domain reshuffles once per epoch."""
    if batch_source < 1 or batch_target < 1:
        raise ConfigError("batch sizes must be at least 1")
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("cannot batch an empty dataset")
    if (source.labels < 0).any():
        raise ConfigError("source rows must all be labeled")
    s_seq, t_seq = np.random.SeedSequence(seed).spawn(2)
    src_idx = _epoch_cycle(len(source), batch_source, np.random.default_rng(s_seq))
    tgt_idx = _epoch_cycle(len(target), batch_target, np.random.default_rng(t_seq))
    while True:
        i, j = next(src_idx), next(tgt_idx)
        yield make_batch(source.features[i], source.labels[i], target.features[j])
