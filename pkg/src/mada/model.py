"""Multi-adversarial domain adaptation: graphs, training loop, prediction.

Three objectives share one network layout (feature extractor ``G_f`` ->
softmax label predictor ``G_y``):

* ``mada``: K sigmoid discriminators, discriminator k sees the reversed
  features scaled row-wise by the predicted probability of class k;
* ``dann``: one discriminator on the reversed, unscaled features;
* ``source_only``: no domain branch.

A single backward pass on ``label_loss + domain_loss`` trains everything:
discriminators descend on the domain loss, while the gradient-reversal node
makes the feature extractor ascend on it with weight lambda.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data import Batch, Dataset, make_batches
from .evaluation import Metrics, ProbeConfig, accuracy, proxy_a_distance
from .nn import (
    ConfigError,
    LambdaSchedule,
    LrSchedule,
    Mlp,
    SgdMomentum,
    init_layer,
    init_params,
    lambda_at,
    lr_at,
    sgd_step,
    unique_layers,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("mada", "dann", "source_only")
SHARE_MODES = ("independent", "partial", "full")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, step: "StepOutput"):
        super().__init__(f"non-finite loss at iteration {iteration}: {step}")
        self.iteration = iteration
        self.step = step


@dataclass
class TrainConfig:
    class_count: int = 4
    input_dim: int = 2
    feature_hidden: list[int] = field(default_factory=lambda: [32])
    bottleneck_dim: int = 16
    feature_output: str = "sigmoid"
    predictor_hidden: list[int] = field(default_factory=list)
    disc_hidden: list[int] = field(default_factory=lambda: [64, 64])
    algorithm: str = "mada"
    share_mode: str = "independent"
    weight_flow: bool = False
    total_iterations: int = 3000
    batch_source: int = 32
    batch_target: int = 32
    seed: int = 0
    lr: LrSchedule = field(default_factory=LrSchedule)
    lam: LambdaSchedule = field(default_factory=LambdaSchedule)
    momentum: float = 0.9
    feature_lr_mult: float = 1.0
    head_lr_mult: float = 1.0
    eval_interval: int = 100
    adist_interval: int | None = None
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.share_mode not in SHARE_MODES:
            raise ConfigError(f"share_mode must be one of {SHARE_MODES}, got {self.share_mode!r}")
        dims = [self.class_count, self.input_dim, self.bottleneck_dim,
                *self.feature_hidden, *self.predictor_hidden, *self.disc_hidden]
        if any(int(d) < 1 for d in dims):
            raise ConfigError("all dimensions must be positive")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be at least 1")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be at least 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be at least 1")
        if self.share_mode == "partial" and self.algorithm == "mada" and not self.disc_hidden:
            raise ConfigError("partial sharing needs at least one discriminator hidden layer")

    @property
    def effective_adist_interval(self) -> int:
        if self.adist_interval is not None:
            return self.adist_interval
        return max(1, self.total_iterations // 10)


@dataclass(eq=False)
class MadaModel:
    feature_extractor: Mlp
    label_predictor: Mlp
    discriminators: list[Mlp]
    share_mode: str = "independent"
    algorithm: str = "mada"

    @property
    def class_count(self) -> int:
        return self.label_predictor.out_dim

    @property
    def input_dim(self) -> int:
        return self.feature_extractor.in_dim

    def networks(self) -> list[Mlp]:
        return [self.feature_extractor, self.label_predictor, *self.discriminators]

    def parameters(self) -> dict[str, np.ndarray]:
        """Every distinct parameter array by name; shared layers appear once."""
        out = {}
        for layer in unique_layers(self.networks()):
            out.update(layer.named_params())
        return out

    def lr_multipliers(self, feature_mult: float = 1.0, head_mult: float = 1.0) -> dict[str, float]:
        feature_names = {name for layer in self.feature_extractor.layers for name, _ in layer.named_params()}
        return {name: feature_mult if name in feature_names else head_mult for name in self.parameters()}

    def features(self, x) -> np.ndarray:
        return self.feature_extractor.forward(x)

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, x)


def build_model(cfg: TrainConfig, seed: int | np.random.Generator | None = None) -> MadaModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    fe = init_params([cfg.input_dim, *cfg.feature_hidden, cfg.bottleneck_dim], rng, "feature", cfg.feature_output)
    lp = init_params([cfg.bottleneck_dim, *cfg.predictor_hidden, cfg.class_count], rng, "predictor", "softmax")
    disc_dims = [cfg.bottleneck_dim, *cfg.disc_hidden, 1]
    if cfg.algorithm == "source_only":
        discs = []
    elif cfg.algorithm == "dann":
        discs = [init_params(disc_dims, rng, "disc", "sigmoid")]
    else:
        discs = build_discriminators(disc_dims, cfg.class_count, cfg.share_mode, rng)
    return MadaModel(fe, lp, discs, cfg.share_mode, cfg.algorithm)


def build_discriminators(dims: list[int], k: int, share_mode: str, rng: np.random.Generator) -> list[Mlp]:
    if share_mode == "full":
        shared = init_params(dims, rng, "disc", "sigmoid")
        return [shared] * k
    if share_mode == "partial":
        bottom = init_layer("disc.shared.0", dims[0], dims[1], rng)
        discs = []
        for c in range(k):
            rest = [init_layer(f"disc{c}.{i}", dims[i], dims[i + 1], rng) for i in range(1, len(dims) - 1)]
            discs.append(Mlp([bottom, *rest], "sigmoid"))
        return discs
    if share_mode == "independent":
        return [init_params(dims, rng, f"disc{c}", "sigmoid") for c in range(k)]
    raise ConfigError(f"unknown share_mode {share_mode!r}")


# --------------------------------------------------------------------------
# objectives


@dataclass
class StepOutput:
    label_loss: float
    domain_loss: float
    total_objective: float
    lambda_used: float
    eta_used: float = float("nan")
    graph_loss: ad.Node | None = field(default=None, repr=False, compare=False)
    label_node: ad.Node | None = field(default=None, repr=False, compare=False)
    domain_node: ad.Node | None = field(default=None, repr=False, compare=False)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.label_loss, self.domain_loss, self.total_objective))


def _check_batch(model: MadaModel, batch: Batch) -> None:
    if batch.source_count < 1:
        raise ContractError("batch needs at least one source row")
    if len(batch.class_labels) != batch.source_count:
        raise ContractError("class_labels must cover exactly the source rows")
    if batch.class_labels.size and batch.class_labels.max() >= model.class_count:
        raise ConfigError(f"batch label {batch.class_labels.max()} outside the model's {model.class_count} classes")


def _label_branch(model: MadaModel, batch: Batch, tape: ad.Tape):
    _check_batch(model, batch)
    x = tape.constant(batch.x)
    f = model.feature_extractor.forward(x, tape)
    probs = model.label_predictor.forward(f, tape)
    src = ad.take_rows(probs, range(batch.source_count))
    return f, probs, ad.cross_entropy(src, batch.class_labels)


def _finish(ly: ad.Node, ld: ad.Node | None, lam: float) -> StepOutput:
    label_loss = float(ly.value[0, 0])
    if ld is None:
        return StepOutput(label_loss, 0.0, label_loss, lam, graph_loss=ly, label_node=ly)
    domain_loss = float(ld.value[0, 0])
    return StepOutput(
        label_loss, domain_loss, label_loss - lam * domain_loss, lam,
        graph_loss=ad.add(ly, ld), label_node=ly, domain_node=ld,
    )


def mada_loss(model: MadaModel, batch: Batch, lam: float, tape: ad.Tape, weight_flow: bool = False) -> StepOutput:
    """Label loss on source rows plus the sum of K attention-weighted domain losses.

    Each discriminator's loss is the plain mean over all batch rows, so the
    domain term is ``(1/n) sum_k sum_i bce_k(i)``. The class probabilities
    used as row weights are constants unless ``weight_flow`` is set.
    """
    k = model.class_count
    if len(model.discriminators) != k:
        raise ConfigError(f"{len(model.discriminators)} discriminators for {k} classes")
    f, probs, ly = _label_branch(model, batch, tape)
    rev = ad.grad_reverse(f, lam)
    ones = np.ones((batch.n, 1))
    ld = None
    for c, disc in enumerate(model.discriminators):
        if weight_flow:
            h = ad.scale_rows(rev, ad.take_col(probs, c), detach=False)
        else:
            h = ad.scale_rows(rev, probs.value[:, c : c + 1])
        lc = ad.binary_cross_entropy(disc.forward(h, tape), batch.domain_labels, ones)
        ld = lc if ld is None else ad.add(ld, lc)
    return _finish(ly, ld, lam)


def dann_loss(model: MadaModel, batch: Batch, lam: float, tape: ad.Tape) -> StepOutput:
    """Label loss plus one discriminator's mean log loss on reversed features."""
    if not model.discriminators:
        raise ConfigError("dann_loss needs a discriminator")
    f, _, ly = _label_branch(model, batch, tape)
    pred = model.discriminators[0].forward(ad.grad_reverse(f, lam), tape)
    ld = ad.binary_cross_entropy(pred, batch.domain_labels, np.ones((batch.n, 1)))
    return _finish(ly, ld, lam)


def source_only_loss(model: MadaModel, batch: Batch, tape: ad.Tape) -> StepOutput:
    _, _, ly = _label_branch(model, batch, tape)
    return _finish(ly, None, 0.0)


def step_loss(model: MadaModel, batch: Batch, lam: float, tape: ad.Tape, algorithm: str, weight_flow: bool = False) -> StepOutput:
    if algorithm == "mada":
        return mada_loss(model, batch, lam, tape, weight_flow)
    if algorithm == "dann":
        return dann_loss(model, batch, lam, tape)
    if algorithm == "source_only":
        return source_only_loss(model, batch, tape)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def predict(model: MadaModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per row (lowest index wins ties) and the class probabilities."""
    x = ad.as_tensor(x)
    probs = model.label_predictor.forward(model.feature_extractor.forward(x))
    return np.argmax(probs, axis=1), probs


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MadaModel
    metrics: list[Metrics]


def _seeds(seed: int) -> tuple[np.random.Generator, int]:
    init_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), int(batch_seq.generate_state(1)[0])


def train(
    cfg: TrainConfig,
    source: Dataset,
    target: Dataset,
    on_metrics: Callable[[Metrics], None] | None = None,
) -> TrainResult:
    """Run ``cfg.total_iterations`` SGD steps of the configured objective.

    Iteration ``t`` uses progress ``p = t / total`` for both schedules.
    Metrics are emitted after steps where ``t % eval_interval == 0`` and once
    more after the last step (``iteration = total``, ``p = 1``). Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    cfg.validate()
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("source and target datasets must be nonempty")
    if source.dim != cfg.input_dim or target.dim != cfg.input_dim:
        raise ConfigError(f"datasets have {source.dim}/{target.dim} features, config says {cfg.input_dim}")
    if source.labels.max() >= cfg.class_count:
        raise ConfigError(f"source labels reach {source.labels.max()}, config has {cfg.class_count} classes")
    init_rng, batch_seed = _seeds(cfg.seed)
    model = build_model(cfg, init_rng)
    params = model.parameters()
    opt = SgdMomentum(cfg.momentum, model.lr_multipliers(cfg.feature_lr_mult, cfg.head_lr_mult))
    batches = make_batches(source, target, cfg.batch_source, cfg.batch_target, batch_seed)
    metrics: list[Metrics] = []
    adist_every = cfg.effective_adist_interval

    def emit(t: int, p: float, eta: float, lam: float, out: StepOutput, with_adist: bool) -> None:
        rec = evaluate(model, source, target, t, p, eta, lam, out, cfg.probe if with_adist else None)
        metrics.append(rec)
        if on_metrics is not None:
            on_metrics(rec)

    total = cfg.total_iterations
    out = None
    for t in range(total):
        p = t / total
        eta = lr_at(cfg.lr, p)
        lam = lambda_at(cfg.lam, p)
        batch = next(batches)
        tape = ad.Tape()
        out = step_loss(model, batch, lam, tape, cfg.algorithm, cfg.weight_flow)
        out.eta_used = eta
        if not out.is_finite():
            raise TrainingDiverged(t, out)
        grads = ad.backward(tape, out.graph_loss)
        sgd_step(opt, params, grads, eta)
        if t % cfg.eval_interval == 0:
            emit(t, p, eta, lam, out, t % adist_every == 0)
    emit(total, 1.0, lr_at(cfg.lr, 1.0), lambda_at(cfg.lam, 1.0), out, True)
    return TrainResult(model, metrics)


def evaluate(
    model: MadaModel,
    source: Dataset,
    target: Dataset,
    iteration: int,
    p: float,
    eta: float,
    lam: float,
    step: StepOutput,
    probe: ProbeConfig | None = None,
) -> Metrics:
    tgt_acc = accuracy(model, target) if target.truth is not None else None
    a_dist = None
    if probe is not None:
        a_dist = proxy_a_distance(model.features(source.features), model.features(target.features), probe)
    return Metrics(
        iteration=iteration,
        p=p,
        eta=eta,
        lam=lam,
        label_loss=step.label_loss,
        domain_loss=step.domain_loss,
        target_accuracy=tgt_acc,
        source_accuracy=accuracy(model, source),
        a_distance=a_dist,
    )
