"""Similarity-rescaled second-order meta adaptation, its ablations and baselines.

One meta iteration:

1. sample ``n_tasks`` source batches; for each, run ``inner_steps`` of plain
   gradient descent from the shared snapshot theta, recording every step so
   the result phi_i stays differentiable in theta;
2. compute the meta loss of phi_i on the fixed k-shot target set and its
   gradient with respect to theta (through the inner loop, or first-order);
3. score each task by the cosine between its displacement phi_i - theta and
   its meta gradient, turn the scores into weights with a tempered softmax;
4. feed the weighted sum of meta gradients to an AdamW step on theta.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    CompGraph,
    GradientVector,
    Layout,
    NumericError,
    ParameterVector,
    Var,
    grad,
    numeric_grad,
)
from .data import Batch, MetaTask, SourceTask, sample_indices, sample_source_task
from .metrics import Metrics, evaluate
from .model import LR_SEGMENT, ModelSpec, init_params, loss_node

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_similarity", "no_adaptive_lr", "first_order", "maml", "naive_finetune")


class ConfigError(ValueError):
    pass


@dataclass
class MetaConfig:
    n_tasks: int = 3
    inner_steps: int = 3
    alpha0: float = 1e-2
    beta0: float = 1e-2
    tau: float = 0.01
    n_iters: int = 500
    validate_every: int = 50
    task_batch: int = 4
    variant: str = "full"
    weight_decay: float = 0.01
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ConfigError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if self.inner_steps < 0:
            raise ConfigError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ConfigError(f"alpha0 and beta0 must be > 0, got {self.alpha0}, {self.beta0}")
        if self.n_iters < 0 or self.validate_every < 1 or self.task_batch < 1:
            raise ConfigError("n_iters >= 0, validate_every >= 1 and task_batch >= 1 required")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def uses_similarity(self) -> bool:
        return self.variant in ("full", "no_adaptive_lr", "first_order")

    @property
    def adaptive_lr(self) -> bool:
        return self.variant in ("full", "no_similarity", "first_order", "maml")

    @property
    def mode(self) -> str:
        return "first_order" if self.variant == "first_order" else "second_order"


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    eta0: float
    horizon: int
    eta_min: float = 0.0


def cosine_anneal(sched: LRSchedule, t: int) -> float:
    if not 0 <= t <= sched.horizon:
        raise ValueError(f"step {t} outside [0, {sched.horizon}]")
    if sched.horizon == 0:
        return sched.eta0
    return sched.eta_min + 0.5 * (sched.eta0 - sched.eta_min) * (1.0 + math.cos(math.pi * t / sched.horizon))


# ---------------------------------------------------------------------------
# inner loop and meta gradient
# ---------------------------------------------------------------------------

LossFn = Callable[[Var], Var]


@dataclass
class InnerTrace:
    start: ParameterVector
    end: ParameterVector
    graph: CompGraph
    theta: Var
    phi: Var
    step_grads: list[Var]
    lr_nodes: list[Var]
    learnable_lr: bool


def batch_loss(layout: Layout, batch: Batch) -> LossFn:
    return lambda params: loss_node(params, layout, batch.features, batch.labels)


def inner_update(
    theta: ParameterVector,
    task_loss: LossFn,
    steps: int,
    lrs: Sequence[float] | None = None,
) -> InnerTrace:
    """phi <- phi - alpha_j * grad L(phi) for j = 1..steps, recorded differentiably.

    With ``lrs=None`` the step sizes are read from the learnable inner-LR
    segment of ``theta``; otherwise they are constants.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    learnable = lrs is None
    graph = CompGraph()
    th = graph.leaf(theta.values)
    if learnable:
        seg = theta.layout[LR_SEGMENT]
        if seg.size < steps:
            raise ValueError(f"theta carries {seg.size} inner learning rates, {steps} steps requested")
        lr_nodes = [graph.F.take(th, offset=seg.offset + j, shape=()) for j in range(steps)]
    else:
        if len(lrs) != steps:
            raise ValueError(f"need {steps} learning rates, got {len(lrs)}")
        lr_nodes = [graph.const(float(a)) for a in lrs]
    phi = th
    step_grads = []
    for j in range(steps):
        try:
            loss = task_loss(phi)
            (g,) = grad(loss, [phi])
        except NumericError as exc:
            raise NumericError(f"inner step {j + 1}: {exc}") from None
        step_grads.append(g)
        phi = phi - graph.F.scale(lr_nodes[j], g)
    end = theta.with_values(phi.value)
    return InnerTrace(theta.copy(), end, graph, th, phi, step_grads, lr_nodes, learnable)


def meta_gradient(trace: InnerTrace, meta_loss: LossFn, mode: str = "second_order") -> tuple[float, GradientVector]:
    """Meta loss at phi and its derivative with respect to theta.

    ``second_order`` backpropagates through the recorded inner loop.
    ``first_order`` treats d(phi)/d(theta) as the identity; learnable step
    sizes then see only the direct term -<grad_phi L, g_j>.
    """
    graph = trace.graph
    try:
        loss = meta_loss(trace.phi)
    except NumericError as exc:
        raise NumericError(f"meta loss: {exc}") from None
    value = float(loss.value)
    if mode == "second_order":
        (g,) = numeric_grad(graph, loss.id, [trace.theta.id])
    elif mode == "first_order":
        (g,) = numeric_grad(graph, loss.id, [trace.phi.id])
        if trace.learnable_lr and trace.step_grads:
            seg = trace.start.layout[LR_SEGMENT]
            g = g.copy()
            for j, sg in enumerate(trace.step_grads):
                # d(phi)/d(alpha_j) = -g_j once the inner gradients are held fixed
                g[seg.offset + j] = -float(np.dot(g, sg.value))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite meta gradient")
    return value, trace.start.with_values(g)


# ---------------------------------------------------------------------------
# similarity weighting
# ---------------------------------------------------------------------------


def task_similarity(task_grad, meta_grad, eps: float = 1e-12) -> float:
    a = np.asarray(getattr(task_grad, "values", task_grad), dtype=np.float64)
    b = np.asarray(getattr(meta_grad, "values", meta_grad), dtype=np.float64)
    la = getattr(task_grad, "layout", None)
    lb = getattr(meta_grad, "layout", None)
    if a.shape != b.shape or (la is not None and lb is not None and la != lb):
        raise ValueError(f"layout mismatch: {a.shape} vs {b.shape}")
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if math.sqrt(aa) < eps or math.sqrt(bb) < eps:
        return 0.0
    # one sqrt of the product keeps sim(v, v) exactly 1 (sqrt(fl(d*d)) == d)
    return float(np.clip(np.dot(a, b) / math.sqrt(aa * bb), -1.0, 1.0))


def rescale_weights(scores: Sequence[float], tau: float) -> np.ndarray:
    """Tempered softmax of the scores (max-subtracted)."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one score")
    z = s / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# outer update
# ---------------------------------------------------------------------------


@dataclass
class TaskOutcome:
    task_grad: GradientVector
    meta_loss: float
    meta_grad: GradientVector
    similarity: float


class AdamW:
    """Adam with decoupled weight decay over a flat vector.

    ``trainable`` masks coordinates that must never move; ``decay_mask``
    selects coordinates subject to weight decay.
    """

    def __init__(self, size: int, trainable=None, decay_mask=None, weight_decay: float = 0.01,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps
        self.weight_decay = weight_decay
        self.trainable = np.ones(size, bool) if trainable is None else np.asarray(trainable, bool)
        self.decay_mask = self.trainable.copy() if decay_mask is None else np.asarray(decay_mask, bool) & self.trainable

    def step(self, x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        g = np.where(self.trainable, g, 0.0)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        x = x - lr * self.weight_decay * np.where(self.decay_mask, x, 0.0)
        x = x - lr * np.where(self.trainable, m_hat / (np.sqrt(v_hat) + self.eps), 0.0)
        return x


def make_optimizer(layout: Layout, cfg: MetaConfig, learnable_lr: bool | None = None) -> AdamW:
    learnable_lr = cfg.adaptive_lr if learnable_lr is None else learnable_lr
    trainable = np.ones(layout.size, bool)
    decay = np.ones(layout.size, bool)
    if LR_SEGMENT in layout:
        seg = layout[LR_SEGMENT]
        trainable[seg.offset : seg.stop] = learnable_lr
        decay[seg.offset : seg.stop] = False
    return AdamW(layout.size, trainable, decay, weight_decay=cfg.weight_decay)


def aggregate(outcomes: Sequence[TaskOutcome], weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if len(outcomes) != len(weights):
        raise ValueError(f"{len(outcomes)} outcomes but {len(weights)} weights")
    agg = np.zeros_like(outcomes[0].meta_grad.values)
    # reduce in task order so results do not depend on scheduling
    for w, o in zip(weights, outcomes):
        agg = agg + w * o.meta_grad.values
    return agg


def outer_update(theta: ParameterVector, outcomes, weights, beta_t: float, opt: AdamW) -> ParameterVector:
    agg = aggregate(outcomes, weights)
    if not np.all(np.isfinite(agg)):
        raise NumericError("non-finite aggregated meta gradient")
    new = opt.step(theta.values, agg, beta_t)
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite parameters after outer update")
    return theta.with_values(new)


# ---------------------------------------------------------------------------
# per-task work
# ---------------------------------------------------------------------------


def task_outcome(
    theta: ParameterVector,
    task: SourceTask,
    meta: MetaTask,
    cfg: MetaConfig,
    alpha_t: float,
    mode: str | None = None,
) -> TaskOutcome:
    layout = theta.layout
    lrs = None if cfg.adaptive_lr else [alpha_t] * cfg.inner_steps
    trace = inner_update(theta, batch_loss(layout, task), cfg.inner_steps, lrs)
    meta_loss, meta_grad = meta_gradient(trace, batch_loss(layout, meta), mode or cfg.mode)
    task_grad = theta.with_values(trace.end.values - trace.start.values)
    return TaskOutcome(task_grad, meta_loss, meta_grad, task_similarity(task_grad, meta_grad))


SUPERVISED_STREAM = 1 << 20


def task_rng(seed: int, iteration: int, task: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, task])


@dataclass
class RunResult:
    best_params: ParameterVector
    history: list[tuple[int, Metrics]]
    best_iter: int
    final_params: ParameterVector
    diagnostics: list[dict] = field(default_factory=list)


class _Selector:
    """Keeps the parameters with the highest validation BA; ties keep the earlier."""

    def __init__(self, valid: Batch | None):
        self.valid = valid
        self.history: list[tuple[int, Metrics]] = []
        self.best: ParameterVector | None = None
        self.best_ba = -1.0
        self.best_iter = 0

    def __call__(self, it: int, params: ParameterVector) -> None:
        if self.valid is None or len(self.valid) == 0:
            self.best, self.best_iter = params.copy(), it
            return
        m = evaluate(params, self.valid.features, self.valid.labels)
        self.history.append((it, m))
        if m.ba > self.best_ba:
            self.best, self.best_ba, self.best_iter = params.copy(), m.ba, it


def pretrain_source(source_train: Batch, valid: Batch | None, cfg: MetaConfig, model_spec: ModelSpec, on_step=None) -> RunResult:
    """Supervised training on source batches from a fresh initialization."""
    theta = init_params(model_spec, cfg.seed, cfg.inner_steps, cfg.alpha0)
    return supervised_train(theta, source_batches(source_train, cfg), cfg, valid, on_step)


def initial_params(source_train: Batch, valid: Batch, cfg: MetaConfig, model_spec: ModelSpec) -> ParameterVector:
    if cfg.warm_start:
        return pretrain_source(source_train, valid, cfg, model_spec).best_params
    return init_params(model_spec, cfg.seed, cfg.inner_steps, cfg.alpha0)


def run_metaadapt(
    source_train: Batch,
    meta: MetaTask,
    valid: Batch,
    cfg: MetaConfig,
    model_spec: ModelSpec,
    on_step: Callable[[int, ParameterVector], None] | None = None,
    diagnostics: bool = False,
    init: ParameterVector | None = None,
) -> RunResult:
    """Adapt to the target domain and return the best validated parameters.

    The starting point is ``init`` if given, else the source-pretrained model
    (``cfg.warm_start``) or a fresh initialization. With an empty meta task
    (0-shot) the source-pretrained model is returned as is.
    """
    if len(meta) == 0:
        return pretrain_source(source_train, valid, cfg, model_spec, on_step)
    theta = init.copy() if init is not None else initial_params(source_train, valid, cfg, model_spec)
    if cfg.variant == "naive_finetune":
        return supervised_train(theta, lambda t: meta, cfg, valid, on_step)

    opt = make_optimizer(theta.layout, cfg)
    beta_sched = LRSchedule(cfg.beta0, cfg.n_iters)
    alpha_sched = LRSchedule(cfg.alpha0, cfg.n_iters)
    select = _Selector(valid)
    diag = []
    for t in range(cfg.n_iters):
        beta_t = cosine_anneal(beta_sched, t)
        alpha_t = cosine_anneal(alpha_sched, t)
        try:
            outcomes = [
                task_outcome(
                    theta,
                    sample_source_task(source_train, task_rng(cfg.seed, t, i), cfg.task_batch),
                    meta,
                    cfg,
                    alpha_t,
                )
                for i in range(cfg.n_tasks)
            ]
            scores = [o.similarity for o in outcomes]
            if cfg.uses_similarity:
                weights = rescale_weights(scores, cfg.tau)
            else:
                weights = np.full(cfg.n_tasks, 1.0 / cfg.n_tasks)
            theta = outer_update(theta, outcomes, weights, beta_t, opt)
        except NumericError as exc:
            raise NumericError(f"iteration {t}: {exc}") from None
        if diagnostics:
            diag.append({
                "iter": t + 1,
                "meta_loss": [o.meta_loss for o in outcomes],
                "similarity": scores,
                "weights": [float(w) for w in weights],
            })
        if on_step is not None:
            on_step(t + 1, theta)
        if (t + 1) % cfg.validate_every == 0:
            select(t + 1, theta)
    if select.best is None:
        select(cfg.n_iters, theta)
    return RunResult(select.best, select.history, select.best_iter, theta, diag)


# ---------------------------------------------------------------------------
# supervised training (source pretraining, naive fine-tuning)
# ---------------------------------------------------------------------------


def loss_and_grad(params: ParameterVector, batch: Batch) -> tuple[float, np.ndarray]:
    graph = CompGraph()
    th = graph.leaf(params.values)
    out = loss_node(th, params.layout, batch.features, batch.labels)
    (g,) = numeric_grad(graph, out.id, [th.id])
    return float(out.value), g


def supervised_train(
    theta: ParameterVector,
    draw: Callable[[int], Batch],
    cfg: MetaConfig,
    valid: Batch | None,
    on_step=None,
) -> RunResult:
    """Plain AdamW on the batch loss with an annealed step size and periodic selection."""
    opt = make_optimizer(theta.layout, cfg, learnable_lr=False)
    sched = LRSchedule(cfg.beta0, cfg.n_iters)
    select = _Selector(valid)
    for t in range(cfg.n_iters):
        _, g = loss_and_grad(theta, draw(t))
        theta = theta.with_values(opt.step(theta.values, g, cosine_anneal(sched, t)))
        if not theta.is_finite():
            raise NumericError(f"iteration {t}: non-finite parameters")
        if on_step is not None:
            on_step(t + 1, theta)
        if (t + 1) % cfg.validate_every == 0:
            select(t + 1, theta)
    if select.best is None:
        select(cfg.n_iters, theta)
    return RunResult(select.best, select.history, select.best_iter, theta)


def source_batches(train: Batch, cfg: MetaConfig) -> Callable[[int], Batch]:
    """Batches of n_tasks * task_batch examples: the meta loop's per-iteration source budget."""
    size = min(len(train), cfg.n_tasks * cfg.task_batch)

    def draw(t):
        idx = sample_indices(len(train), size, task_rng(cfg.seed, t, SUPERVISED_STREAM))
        return Batch(train.features[idx], train.labels[idx])

    return draw
