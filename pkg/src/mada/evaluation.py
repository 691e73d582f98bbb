"""Target accuracy, proxy A-distance and bottleneck embedding export."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, stable_sigmoid
from .data import Dataset, save_csv
from .nn import ConfigError


@dataclass(frozen=True)
class Metrics:
    iteration: int
    p: float
    eta: float
    lam: float
    label_loss: float
    domain_loss: float
    target_accuracy: float | None
    source_accuracy: float | None
    a_distance: float | None = None

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["lambda"] = rec.pop("lam")
        return {k: rec[k] for k in METRIC_FIELDS}


METRIC_FIELDS = (
    "iteration", "p", "eta", "lambda", "label_loss", "domain_loss",
    "target_accuracy", "source_accuracy", "a_distance",
)


@dataclass(frozen=True)
class ProbeConfig:
    train_fraction: float = 0.8
    epochs: int = 300
    lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("probe epochs and lr must be positive")


def accuracy(model, ds: Dataset, truth=None) -> float:
    """Fraction of rows whose predicted class equals ``truth``."""
    truth = ds.eval_labels() if truth is None else np.asarray(truth)
    if len(truth) != len(ds):
        raise ContractError(f"{len(truth)} labels for {len(ds)} rows")
    if len(ds) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    pred, _ = model.predict(ds.features)
    return float(np.mean(pred == truth))


def _stratified_split(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    # depends only on (seed, n) so swapping domain roles keeps each split
    order = np.random.default_rng([seed, n]).permutation(n)
    cut = min(max(1, int(round(frac * n))), n - 1)
    return order[:cut], order[cut:]


def _fit_logistic(x: np.ndarray, y: np.ndarray, cfg: ProbeConfig) -> tuple[np.ndarray, float]:
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(cfg.epochs):
        r = stable_sigmoid(x @ w + b) - y
        w -= cfg.lr * (x.T @ r) / n
        b -= cfg.lr * r.mean()
    return w, b


def proxy_a_distance(features_source, features_target, cfg: ProbeConfig = ProbeConfig()) -> float:
    """``max(0, 2 (1 - 2 err))`` for a linear logistic domain probe.

    Each domain is split by ``cfg.train_fraction`` separately, the probe is
    fit on standardized features of the training part and ``err`` is its
    error on the held-out part.
    """
    fs = np.asarray(features_source, dtype=np.float64)
    ft = np.asarray(features_target, dtype=np.float64)
    if len(fs) < 2 or len(ft) < 2:
        raise ContractError("proxy A-distance needs at least two rows from each domain")
    if fs.shape[1] != ft.shape[1]:
        raise ContractError(f"feature widths differ: {fs.shape[1]} vs {ft.shape[1]}")
    s_tr, s_te = _stratified_split(len(fs), cfg.train_fraction, cfg.seed)
    t_tr, t_te = _stratified_split(len(ft), cfg.train_fraction, cfg.seed)
    x_tr = np.concatenate([fs[s_tr], ft[t_tr]])
    y_tr = np.concatenate([np.ones(len(s_tr)), np.zeros(len(t_tr))])
    x_te = np.concatenate([fs[s_te], ft[t_te]])
    y_te = np.concatenate([np.ones(len(s_te)), np.zeros(len(t_te))])
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd == 0] = 1.0
    w, b = _fit_logistic((x_tr - mu) / sd, y_tr, cfg)
    pred = ((x_te - mu) / sd @ w + b) > 0
    err = float(np.mean(pred != (y_te == 1)))
    return a_distance_from_error(err)


def a_distance_from_error(err: float) -> float:
    return max(0.0, 2.0 * (1.0 - 2.0 * err))


def export_embeddings(model, ds: Dataset, path: str | Path, labels=None) -> None:
    """Write bottleneck features of ``ds`` in the feature CSV schema.

    ``labels`` defaults to the dataset's evaluation labels so exported
    target rows carry ground truth when it is known.
    """
    feats = model.features(ds.features)
    labels = ds.eval_labels() if labels is None else labels
    out = Dataset(feats, ds.labels, ds.domain, ds.class_count)
    try:
        save_csv(path, out, labels=labels)
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror}") from exc


def mean_and_stderr(values) -> tuple[float, float]:
    """Mean and standard error ``s / sqrt(n)`` (sample standard deviation)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ContractError("no values to summarize")
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var / len(vals))
