"""Finite-difference verification of the full training graphs.

The analytic gradient of one training step is not the gradient of a single
scalar: the feature extractor sees ``label_loss - lam * domain_loss`` while
the heads see ``label_loss + domain_loss``, and with detached attention
weights the label predictor gets no domain gradient at all. The oracle here
re-evaluates the objective in plain numpy (no tape), holding fixed whatever
the analytic graph treats as constant, and differentiates it numerically
one parameter group at a time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Batch, make_batch
from .model import MadaModel, TrainConfig, build_model, step_loss
from .nn import ConfigError

GROUPS = ("feature_extractor", "label_predictor", "discriminators")
MAX_SAMPLES = 8
K1_TOLERANCE = 1e-10


@dataclass
class GradcheckConfig:
    class_count: int = 3
    input_dim: int = 2
    feature_hidden: list[int] = field(default_factory=lambda: [5])
    bottleneck_dim: int = 4
    feature_output: str = "sigmoid"
    disc_hidden: list[int] = field(default_factory=lambda: [6])
    share_mode: str = "independent"
    weight_flow: bool = False
    batch_source: int = 2
    batch_target: int = 2
    lam: float = 0.7
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    algorithms: list[str] = field(default_factory=lambda: ["mada", "dann", "source_only"])
    h: float = 1e-5
    tolerance: float = 1e-4

    def validate(self) -> None:
        if self.batch_source < 1 or self.batch_target < 0:
            raise ConfigError("gradcheck needs at least one source row")
        if self.batch_source + self.batch_target > MAX_SAMPLES:
            raise ConfigError(f"gradcheck batches are limited to {MAX_SAMPLES} samples")
        if self.h <= 0 or self.tolerance <= 0 or self.lam < 0:
            raise ConfigError("h and tolerance must be positive and lam non-negative")
        if not self.seeds or not self.algorithms:
            raise ConfigError("gradcheck needs at least one seed and one algorithm")
        self.train_config(self.algorithms[0], self.seeds[0]).validate()

    def train_config(self, algorithm: str, seed: int) -> TrainConfig:
        return TrainConfig(
            class_count=self.class_count,
            input_dim=self.input_dim,
            feature_hidden=list(self.feature_hidden),
            bottleneck_dim=self.bottleneck_dim,
            feature_output=self.feature_output,
            disc_hidden=list(self.disc_hidden),
            algorithm=algorithm,
            share_mode=self.share_mode,
            weight_flow=self.weight_flow,
            seed=seed,
        )


def random_batch(cfg: GradcheckConfig, rng: np.random.Generator) -> Batch:
    xs = rng.uniform(-2.0, 2.0, size=(cfg.batch_source, cfg.input_dim))
    xt = rng.uniform(-2.0, 2.0, size=(cfg.batch_target, cfg.input_dim))
    ys = rng.integers(0, cfg.class_count, size=cfg.batch_source)
    return make_batch(xs, ys, xt)


# --------------------------------------------------------------------------
# value-only objective pieces


def _bce(p: np.ndarray, t: np.ndarray) -> float:
    p = np.clip(p, ad.PROB_CLAMP, 1.0 - ad.PROB_CLAMP)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def label_value(model: MadaModel, batch: Batch) -> float:
    probs = model.label_predictor.forward(model.features(batch.x))[: batch.source_count]
    picked = probs[np.arange(batch.source_count), batch.class_labels]
    return float(np.mean(-np.log(np.maximum(picked, ad.PROB_CLAMP))))


def domain_value(direct: MadaModel, weights: MadaModel, batch: Batch, algorithm: str) -> float:
    """Domain loss with features from ``direct`` and attention from ``weights``."""
    f = direct.features(batch.x)
    if algorithm == "dann":
        return _bce(direct.discriminators[0].forward(f), batch.domain_labels)
    probs = weights.label_predictor.forward(weights.features(batch.x))
    return sum(
        _bce(disc.forward(f * probs[:, c : c + 1]), batch.domain_labels)
        for c, disc in enumerate(direct.discriminators)
    )


def group_of(model: MadaModel, name: str) -> str:
    for layer in model.feature_extractor.layers:
        if name.startswith(layer.name + "."):
            return "feature_extractor"
    for layer in model.label_predictor.layers:
        if name.startswith(layer.name + "."):
            return "label_predictor"
    return "discriminators"


def check_graph(
    model: MadaModel,
    batch: Batch,
    lam: float,
    algorithm: str,
    weight_flow: bool = False,
    h: float = 1e-5,
) -> tuple[dict[str, float], ad.Gradients]:
    """Per-parameter max relative error of one step's analytic gradient."""
    tape = ad.Tape()
    out = step_loss(model, batch, lam, tape, algorithm, weight_flow)
    analytic = ad.backward(tape, out.graph_loss)
    base = copy.deepcopy(model)
    errors = {}
    for name, arr in model.parameters().items():
        sign = -lam if group_of(model, name) == "feature_extractor" else 1.0

        def objective(sign=sign) -> float:
            value = label_value(model, batch)
            if algorithm == "source_only":
                return value
            value += sign * domain_value(model, base, batch, algorithm)
            if weight_flow and algorithm == "mada":
                value += domain_value(base, model, batch, algorithm)
            return value

        errors.update(ad.group_errors(objective, {name: arr}, analytic, h))
    return errors, analytic


def domain_branch_gradients(model: MadaModel, batch: Batch, lam: float, algorithm: str, weight_flow: bool = False) -> ad.Gradients:
    """Gradients of the domain term alone (as seen through the reversal)."""
    tape = ad.Tape()
    out = step_loss(model, batch, lam, tape, algorithm, weight_flow)
    if out.domain_node is None:
        return {name: np.zeros_like(v) for name, v in model.parameters().items()}
    return ad.backward(tape, out.domain_node)


@dataclass
class GradcheckReport:
    tolerance: float
    rows: list[dict] = field(default_factory=list)
    k1_reduction_max_diff: float | None = None

    @property
    def max_error(self) -> float:
        return max((r["max_rel_error"] for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        k1_ok = self.k1_reduction_max_diff is None or self.k1_reduction_max_diff <= K1_TOLERANCE
        return self.max_error <= self.tolerance and k1_ok


def run_gradcheck(cfg: GradcheckConfig) -> GradcheckReport:
    cfg.validate()
    report = GradcheckReport(cfg.tolerance)
    for seed in cfg.seeds:
        batch = random_batch(cfg, np.random.default_rng([seed, 7]))
        for algorithm in cfg.algorithms:
            model = build_model(cfg.train_config(algorithm, seed))
            errors, _ = check_graph(model, batch, cfg.lam, algorithm, cfg.weight_flow, cfg.h)
            per_group = {g: 0.0 for g in GROUPS}
            for name, err in errors.items():
                g = group_of(model, name)
                per_group[g] = max(per_group[g], float(err))
            dom = domain_branch_gradients(model, batch, cfg.lam, algorithm, cfg.weight_flow)
            fe_dom = max(
                float(np.abs(g).max()) for n, g in dom.items() if group_of(model, n) == "feature_extractor"
            )
            report.rows.append({
                "seed": seed,
                "algorithm": algorithm,
                "groups": per_group,
                "max_rel_error": max(per_group.values()),
                "feature_domain_grad_max_abs": fe_dom,
            })
        if cfg.class_count == 1 and {"mada", "dann"} <= set(cfg.algorithms):
            diff = k1_gradient_difference(cfg, seed, batch)
            prev = report.k1_reduction_max_diff or 0.0
            report.k1_reduction_max_diff = max(prev, diff)
    return report


def k1_gradient_difference(cfg: GradcheckConfig, seed: int, batch: Batch) -> float:
    """Largest gradient difference between one-class MADA and DANN.

    Both models are built from the same seed, so their parameters coincide
    in creation order even though the discriminator names differ.
    """
    grads = []
    for algorithm in ("mada", "dann"):
        model = build_model(cfg.train_config(algorithm, seed))
        tape = ad.Tape()
        out = step_loss(model, batch, cfg.lam, tape, algorithm, cfg.weight_flow)
        grads.append(list(ad.backward(tape, out.graph_loss).values()))
    return max(float(np.abs(a - b).max()) for a, b in zip(*grads))
