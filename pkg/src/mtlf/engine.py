"""The multitask training loop.

Auxiliary tasks are trained through a per-epoch merge-and-shuffle
schedule: each task's data is reshuffled and cut into homogeneous
batches, all tasks' batches are concatenated and globally shuffled, and
the whole preprocessing step is repeated every epoch so no long runs of
a single task occur.  Target-task fine-tuning then runs with early
stopping on validation CE loss, restoring the best epoch's parameters.

The target task is excluded from the auxiliary phase; its head is
attached fresh when fine-tuning starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ContractError, DataError, NumericError, RegistryError
from .heads import SharedModel, TaskSpec, attach_head, forward_task, task_loss
from .optim import AdamW
from .text_pipeline import EncodedExample, split_stratified

# rng stream salts so schedule, dropout, splits, and head inits never collide
_SALT_SCHEDULE = 101
_SALT_MTL_DROPOUT = 202
_SALT_TARGET_DROPOUT = 303
_SALT_VAL_SPLIT = 404
_SALT_HEAD = 505


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 5e-5
    max_epochs: int = 4
    patience: int = 1
    min_delta: float = 0.0
    validation_fraction: float = 0.1
    mtl_epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_grad_norm: float | None = None  # gradient clipping, off by default

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in (0, 0.5)")
        if self.mtl_epochs < 0:
            raise ConfigError("mtl_epochs must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be >= 0")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "validation_fraction": self.validation_fraction,
            "mtl_epochs": self.mtl_epochs,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass(frozen=True)
class Batch:
    """A homogeneous per-task minibatch of encoded examples."""

    task: str
    examples: tuple[EncodedExample, ...]


# an epoch schedule is an ordered sequence of homogeneous batches
EpochSchedule = list[Batch]


def collate(examples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack encoded examples into (ids, mask, labels) arrays.

    Columns that are padding across the whole batch are trimmed; masked
    positions cannot influence unpadded outputs, so this only saves time.
    """
    ids = np.array([ex.token_ids for ex in examples], dtype=np.int64)
    mask = np.array([ex.attention_mask for ex in examples], dtype=np.float32)
    width = max(1, int(mask.sum(axis=1).max()))
    labels = np.array([ex.label for ex in examples])
    return ids[:, :width], mask[:, :width], labels


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_without_improvement: int = 0
    stopped: bool = False


def early_stop_check(
    state: EarlyStopState, new_loss: float, patience: int, min_delta: float
) -> EarlyStopState:
    """Fold one validation loss into the stopping state.

    Improvement means new_loss < best - min_delta; otherwise the
    no-improvement counter grows and training stops once it reaches
    ``patience``.
    """
    if not math.isfinite(new_loss):
        raise NumericError(f"validation loss is not finite: {new_loss}")
    epoch = state.best_epoch + state.epochs_without_improvement + 1
    if new_loss < state.best_loss - min_delta:
        return EarlyStopState(best_loss=new_loss, best_epoch=epoch)
    counter = state.epochs_without_improvement + 1
    return EarlyStopState(
        best_loss=state.best_loss,
        best_epoch=state.best_epoch,
        epochs_without_improvement=counter,
        stopped=counter >= patience,
    )


def train_step(
    model: SharedModel,
    optimizer: AdamW,
    task_name: str,
    batch: Batch,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward, loss, backward, AdamW update; returns the pre-step loss."""
    if batch.task != task_name:
        raise ContractError(f"batch for task '{batch.task}' passed to '{task_name}'")
    ids, mask, labels = collate(batch.examples)
    preds = forward_task(model, task_name, ids, mask, training=True, rng=rng)
    loss = task_loss(model.tasks[task_name], preds, labels)
    value = loss.item()
    optimizer.zero_grad()
    loss.backward()
    for p in optimizer.params.values():
        if p.grad is None:  # heads of other tasks receive exact zero gradient
            p.grad = np.zeros_like(p.data)
    optimizer.step()
    return value


def validation_ce(model: SharedModel, task_name: str, examples, batch_size: int) -> float:
    """Eval-mode mean CE loss over a validation set."""
    total = 0.0
    with ag.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            ids, mask, labels = collate(chunk)
            preds = forward_task(model, task_name, ids, mask, training=False)
            total += task_loss(model.tasks[task_name], preds, labels).item() * len(chunk)
    return total / len(examples)


class MtlEngine:
    """Task registry plus the auxiliary-phase training loop for one model."""

    def __init__(self, model: SharedModel, config: TrainConfig, log=None):
        self.model = model
        self.config = config
        self.task_data: dict[str, list[EncodedExample]] = {}
        self.loss_traces: dict[str, list[float]] = {}
        self._log = log  # callable(dict) or None

    def _emit(self, record: dict) -> None:
        if self._log is not None:
            self._log(record)

    def register_task(self, spec: TaskSpec, data) -> None:
        """Queue a task for scheduling and attach its head."""
        if spec.name in self.task_data:
            raise RegistryError(f"task '{spec.name}' already registered")
        data = list(data)
        if not data:
            raise DataError(f"task '{spec.name}' has no training data")
        labels = np.array([ex.label for ex in data])
        if spec.is_classification:
            if not np.issubdtype(labels.dtype, np.integer):
                raise ContractError(f"task '{spec.name}' needs integer class labels")
            if labels.min() < 0 or labels.max() >= spec.num_classes:
                raise ContractError(
                    f"task '{spec.name}' labels exceed its {spec.num_classes} classes"
                )
        attach_head(
            self.model,
            spec,
            np.random.default_rng([self.config.seed, _SALT_HEAD, len(self.task_data)]),
        )
        self.task_data[spec.name] = data
        self.loss_traces[spec.name] = []

    def build_epoch_schedule(self, epoch_index: int) -> EpochSchedule:
        """Reshuffle every task, cut into batches, merge, and shuffle globally."""
        if not self.task_data:
            raise RegistryError("no tasks registered")
        rng = np.random.default_rng([self.config.seed, _SALT_SCHEDULE, epoch_index])
        batches: list[Batch] = []
        for name, data in self.task_data.items():
            order = rng.permutation(len(data))
            for start in range(0, len(data), self.config.batch_size):
                chunk = tuple(data[i] for i in order[start : start + self.config.batch_size])
                batches.append(Batch(task=name, examples=chunk))
        return [batches[i] for i in rng.permutation(len(batches))]

    def run_mtl_phase(self) -> SharedModel:
        """Train all registered (auxiliary) tasks for mtl_epochs epochs."""
        if not self.task_data:
            raise RegistryError("no tasks registered")
        cfg = self.config
        optimizer = AdamW(
            dict(self.model.named_parameters()),
            learning_rate=cfg.learning_rate,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            epsilon=cfg.epsilon,
            weight_decay=cfg.weight_decay,
            max_grad_norm=cfg.max_grad_norm,
        )
        drop_rng = np.random.default_rng([cfg.seed, _SALT_MTL_DROPOUT])
        for epoch in range(cfg.mtl_epochs):
            for step, batch in enumerate(self.build_epoch_schedule(epoch)):
                value = train_step(self.model, optimizer, batch.task, batch, rng=drop_rng)
                self.loss_traces[batch.task].append(value)
                self._emit(
                    {"phase": "mtl", "epoch": epoch, "step": step, "task": batch.task, "loss": value}
                )
        return self.model


def run_target_finetune(
    model: SharedModel,
    target_task: str,
    train_data,
    config: TrainConfig,
    rng_salt: int = 0,
    log=None,
    val_loss_fn=None,
) -> tuple[SharedModel, int, list[float]]:
    """Fine-tune on the target task with early stopping on validation CE.

    A stratified validation_fraction of ``train_data`` is held out; after
    each epoch the validation CE updates the stopping state, and the
    parameters of the best epoch are restored at the end.  ``val_loss_fn``
    (model -> float) replaces the real validation pass when given.
    Returns (model, best_epoch, validation trace); epochs are 1-based.
    """
    spec = model.tasks.get(target_task)
    if spec is None:
        raise RegistryError(f"target task '{target_task}' has no head attached")
    if not spec.is_classification or spec.num_classes != 2:
        raise ContractError(f"target task '{target_task}' must be binary classification")
    train_data = list(train_data)
    labels = [ex.label for ex in train_data]
    kept, held = split_stratified(
        labels, config.validation_fraction, np.random.default_rng([config.seed, _SALT_VAL_SPLIT, rng_salt])
    )
    train_part = [train_data[i] for i in kept]
    val_part = [train_data[i] for i in held]
    if len(train_part) < config.batch_size:
        raise DataError(
            f"{len(train_part)} training examples after the validation split "
            f"do not fill one batch of {config.batch_size}"
        )

    params = dict(model.task_parameters(target_task))
    optimizer = AdamW(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
    )
    drop_rng = np.random.default_rng([config.seed, _SALT_TARGET_DROPOUT, rng_salt])
    state = EarlyStopState()
    best_params = {name: p.data.copy() for name, p in params.items()}
    trace: list[float] = []
    shuffle_base = np.random.default_rng([config.seed, _SALT_SCHEDULE, 1 + rng_salt])
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_base.permutation(len(train_part))
        for step, start in enumerate(range(0, len(train_part), config.batch_size)):
            chunk = tuple(train_part[i] for i in order[start : start + config.batch_size])
            batch = Batch(task=target_task, examples=chunk)
            value = train_step(model, optimizer, target_task, batch, rng=drop_rng)
            if log is not None:
                log({"phase": "target", "epoch": epoch, "step": step, "task": target_task, "loss": value})
        if val_loss_fn is not None:
            val = float(val_loss_fn(model))
        else:
            val = validation_ce(model, target_task, val_part, config.batch_size)
        trace.append(val)
        previous_best = state.best_loss
        state = early_stop_check(state, val, config.patience, config.min_delta)
        if log is not None:
            log({"phase": "target", "epoch": epoch, "validation_ce": val})
        if state.best_loss < previous_best:
            best_params = {name: p.data.copy() for name, p in params.items()}
        if state.stopped:
            break
    for name, p in params.items():
        p.data = best_params[name].copy()
        p.grad = None
    return model, state.best_epoch, trace
