"""Sequential task training with SGD, OGD, OGD+, ONG and ONG+.

All variants share one loop. OGD-style variants project every update onto
the orthogonal complement of a growing set of stored logit-gradient
directions; ONG variants first precondition every gradient (updates and
stored directions alike) with the EKFAC inverse Fisher; "+" variants also
keep a small sample memory of earlier tasks whose logit gradients are
re-added to the direction set after each task.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ekfac import EMPIRICAL_FISHER, TRUE_FISHER, FisherApprox
from .errors import NumericalError, StructuralError
from .metrics import AccuracyMatrix
from .model import (
    Batch,
    ModelParams,
    accuracy,
    forward,
    init_kaiming,
    logit_gradients,
    loss_and_backward,
    sample_labels,
    score_stats,
)
from .projection import OrthoBasis, descent_check

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    SGD = "SGD"
    OGD = "OGD"
    OGD_PLUS = "OGD+"
    ONG = "ONG"
    ONG_PLUS = "ONG+"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("PLUS", "+").replace("_", "")
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown variant {name!r}; expected one of {[v.value for v in cls]}")

    @property
    def preconditions(self) -> bool:
        return self in (Variant.ONG, Variant.ONG_PLUS)

    @property
    def projects(self) -> bool:
        return self is not Variant.SGD

    @property
    def sample_memory(self) -> bool:
        return self in (Variant.OGD_PLUS, Variant.ONG_PLUS)


@dataclass
class TrainConfig:
    variant: Variant = Variant.OGD
    learning_rate: float = 1e-3
    epochs_per_task: int = 3
    batch_size: int = 32
    memory_per_task: int = 100
    replay_sample_size: int | None = None  # defaults to memory_per_task
    seed: int = 0
    hidden: tuple[int, ...] = (100, 100)
    ekfac_decay: float = 0.95
    ekfac_damping: float = 1e-3
    ekfac_refresh: int = 100
    fisher_mode: str = TRUE_FISHER
    store_all_logits: bool = False
    basis_capacity: int | None = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("epochs_per_task", "batch_size", "ekfac_refresh"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.memory_per_task < 0:
            raise ValueError("memory_per_task must be non-negative")
        if self.replay_sample_size is not None and self.replay_sample_size < 0:
            raise ValueError("replay_sample_size must be non-negative")
        if self.fisher_mode not in (TRUE_FISHER, EMPIRICAL_FISHER):
            raise ValueError(f"fisher_mode must be {TRUE_FISHER!r} or {EMPIRICAL_FISHER!r}")

    @property
    def replay_size(self) -> int:
        return self.memory_per_task if self.replay_sample_size is None else self.replay_sample_size

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class SampleMemory:
    """Stored raw examples from finished tasks, tagged with their task index."""

    x: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    task: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(t) for t in self.task)

    def add(self, x, y, task_index: int) -> None:
        y = np.asarray(y, dtype=np.int64)
        self.x.append(np.asarray(x, dtype=np.float64))
        self.y.append(y)
        self.task.append(np.full(y.shape[0], task_index, dtype=np.int64))

    def arrays(self):
        if not self.x:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return np.concatenate(self.x), np.concatenate(self.y), np.concatenate(self.task)

    def sample(self, n: int, rng: np.random.Generator):
        x, y, _ = self.arrays()
        n = min(n, len(y))
        if n == 0:
            return x[:0], y[:0]
        idx = rng.choice(len(y), size=n, replace=False)
        return x[idx], y[idx]


@dataclass
class StepDiagnostics:
    task: int
    epoch: int
    step: int
    loss: float
    grad_norm: float
    pre_norm: float
    tilde_norm: float
    inner: float | None
    descent_ok: bool | None


@dataclass
class RunLog:
    steps: list[StepDiagnostics] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def event(self, kind: str, **fields) -> None:
        self.events.append({"event": kind, **fields})

    def descent_failures(self) -> int:
        return sum(1 for s in self.steps if s.descent_ok is False)

    def lines(self):
        for e in self.events:
            yield json.dumps(e, sort_keys=True)
        checked = [s for s in self.steps if s.descent_ok is not None]
        yield json.dumps({
            "event": "summary",
            "steps": len(self.steps),
            "descent_checked": len(checked),
            "descent_failures": self.descent_failures(),
        }, sort_keys=True)


@dataclass
class TrainerState:
    params: ModelParams
    fisher: FisherApprox
    basis: OrthoBasis
    sample_memory: SampleMemory
    rng_data: np.random.Generator
    rng_memory: np.random.Generator
    rng_fisher: np.random.Generator
    task: int = 0
    epoch: int = 0
    step: int = 0
    tasks_finalized: int = 0


def init_state(config: TrainConfig, input_dim: int, n_classes: int, params: ModelParams | None = None) -> TrainerState:
    init_seq, data_seq, mem_seq, fisher_seq = np.random.SeedSequence(config.seed).spawn(4)
    dims = (input_dim, *config.hidden, n_classes)
    if params is None:
        params = init_kaiming(dims, np.random.default_rng(init_seq))
    elif params.dims[0] != input_dim or params.dims[-1] != n_classes:
        raise StructuralError(f"params with dims {params.dims} do not fit {input_dim} inputs / {n_classes} classes")
    fisher = FisherApprox(
        params.dims,
        mode=config.fisher_mode,
        damping=config.ekfac_damping,
        decay=config.ekfac_decay,
        refresh_period=config.ekfac_refresh,
    )
    return TrainerState(
        params=params,
        fisher=fisher,
        basis=OrthoBasis(params.flat.size, capacity=config.basis_capacity),
        sample_memory=SampleMemory(),
        rng_data=np.random.default_rng(data_seq),
        rng_memory=np.random.default_rng(mem_seq),
        rng_fisher=np.random.default_rng(fisher_seq),
    )


def train_step(state: TrainerState, batch: Batch, config: TrainConfig):
    """One update ``w <- w - lr * g_tilde``; returns ``(loss, StepDiagnostics)``."""
    variant = config.variant
    params = state.params
    cache = forward(params, batch.x)
    loss, grad, stats = loss_and_backward(params, batch, cache)
    g_pre = grad
    if variant.preconditions:
        if state.fisher.mode == TRUE_FISHER:
            fisher_stats = score_stats(params, cache, sample_labels(cache, state.rng_fisher))
        else:
            fisher_stats = stats
        state.fisher.observe(fisher_stats)
        g_pre = state.fisher.precondition(grad)
    inner = ok = None
    if variant.projects:
        g_tilde = state.basis.project_out(g_pre)
        inner, ok = descent_check(g_pre, g_tilde)
    else:
        g_tilde = g_pre
    if not np.all(np.isfinite(g_tilde)):
        raise NumericalError("non-finite update direction")
    params.flat -= config.learning_rate * g_tilde
    diag = StepDiagnostics(
        task=state.task + 1,
        epoch=state.epoch + 1,
        step=state.step,
        loss=loss,
        grad_norm=float(np.linalg.norm(grad)),
        pre_norm=float(np.linalg.norm(g_pre)),
        tilde_norm=float(np.linalg.norm(g_tilde)),
        inner=inner,
        descent_ok=ok,
    )
    state.step += 1
    return loss, diag


def _memory_gradients(params: ModelParams, x, y, all_logits: bool, chunk: int = 64):
    """Yield logit gradients at the stored examples in bounded-size chunks."""
    n_classes = params.dims[-1]
    if all_logits:
        x = np.repeat(x, n_classes, axis=0)
        y = np.tile(np.arange(n_classes), len(y))
    for start in range(0, len(y), chunk):
        yield logit_gradients(params, x[start:start + chunk], y[start:start + chunk])


def finalize_task(state: TrainerState, x, y, config: TrainConfig) -> dict:
    """Grow the direction set (and sample memory) after a task has been trained."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise StructuralError("finalize_task needs the task's training data")
    variant = config.variant
    info = {"task": state.task + 1, "added": 0, "dropped": 0, "replayed": 0}
    if variant.projects and config.memory_per_task > 0:
        rng = state.rng_memory
        idx = rng.choice(len(y), size=min(config.memory_per_task, len(y)), replace=False)
        xs, ys = x[idx], y[idx]
        if variant.sample_memory and len(state.sample_memory):
            hx, hy = state.sample_memory.sample(config.replay_size, rng)
            info["replayed"] = len(hy)
            xs = np.concatenate([xs, hx])
            ys = np.concatenate([ys, hy])
        before_added, before_dropped = state.basis.added, state.basis.dropped
        for block in _memory_gradients(state.params, xs, ys, config.store_all_logits):
            for g in block:
                if variant.preconditions:
                    g = state.fisher.precondition(g)
                state.basis.add_direction(state.basis.project_out(g))
        info["added"] = state.basis.added - before_added
        info["dropped"] = state.basis.dropped - before_dropped
        if variant.sample_memory:
            keep = rng.choice(len(y), size=min(config.memory_per_task, len(y)), replace=False)
            state.sample_memory.add(x[keep], y[keep], state.task + 1)
    info["basis_size"] = len(state.basis)
    state.tasks_finalized += 1
    return info


class RunAborted(NumericalError):
    """A run stopped on a numerical failure; carries the partial results."""

    def __init__(self, message, matrix: AccuracyMatrix, log: RunLog):
        super().__init__(message)
        self.matrix = matrix
        self.log = log


def train_task(state: TrainerState, x, y, config: TrainConfig, log: RunLog) -> None:
    n = len(y)
    for epoch in range(config.epochs_per_task):
        state.epoch = epoch
        order = state.rng_data.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, diag = train_step(state, Batch(x[idx], y[idx]), config)
            except NumericalError as exc:
                raise NumericalError(
                    f"task {state.task + 1} epoch {epoch + 1} step {state.step}: {exc}"
                ) from exc
            losses.append(loss)
            log.steps.append(diag)
        mean_loss = float(np.mean(losses))
        log.event("epoch", task=state.task + 1, epoch=epoch + 1, mean_loss=mean_loss, steps=len(losses))
        logger.info("task %d epoch %d mean loss %.4f", state.task + 1, epoch + 1, mean_loss)


def run_experiment(tasks, config: TrainConfig, params: ModelParams | None = None, state: TrainerState | None = None):
    """Train through every task in order, filling the accuracy matrix.

    Returns ``(AccuracyMatrix, RunLog)``. On a numerical failure raises
    :class:`RunAborted` holding whatever was completed.
    """
    if len(tasks) < 1:
        raise StructuralError("run_experiment needs at least one task")
    if state is None:
        state = init_state(config, tasks.input_dim, tasks.n_classes, params)
    matrix = AccuracyMatrix(len(tasks))
    log = RunLog()
    log.event("config", **config.as_dict())
    for k in range(len(tasks)):
        state.task = k
        x, y = tasks.train_data(k)
        if k > 0 and config.variant.preconditions:
            state.fisher.request_refresh()
        try:
            train_task(state, x, y, config, log)
            info = finalize_task(state, x, y, config)
        except NumericalError as exc:
            log.event("aborted", task=k + 1, reason=str(exc))
            raise RunAborted(str(exc), matrix, log) from exc
        log.event("finalize", **info)
        for j in range(k + 1):
            xv, yv = tasks.validation_data(j)
            matrix.record(k + 1, j + 1, accuracy(state.params, xv, yv))
        row = [round(matrix[k + 1, j + 1], 6) for j in range(k + 1)]
        log.event("evaluate", trained_through=k + 1, accuracies=row)
        logger.info("after task %d: %s", k + 1, row)
    return matrix, log
