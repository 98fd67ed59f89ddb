"""Deterministic training loop: losses, seeded batching, Adagrad and early stopping."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .models import ResponseModel, build_model
from .simkit import metrics
from .simkit.world import LoggedDataset, SyntheticWorld

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    epochs: int = 10
    seed: int = 0
    task_weights: tuple[float, float] = (1.0, 0.2)
    dropout: float = 0.3
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be non-negative and patience at least 1")
        self.task_weights = tuple(float(w) for w in self.task_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_weights"] = list(self.task_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class TrainingDiverged(RuntimeError):
    pass


def cross_entropy(pred, label) -> dc.Node:
    """Mean binary cross-entropy; probabilities outside ``[1e-12, 1-1e-12]`` are clamped."""
    pred = dc._as_node(pred)
    label = np.asarray(label, dtype=float).reshape(pred.shape)
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    outside = (pred.value < lo) | (pred.value > hi)
    if outside.any():
        warnings.warn(f"cross_entropy: clamped {int(outside.sum())} predictions to [{lo}, 1-{lo}]",
                      RuntimeWarning, stacklevel=2)
        pred = dc.where(pred.value < lo, np.full(pred.shape, lo),
                        dc.where(pred.value > hi, np.full(pred.shape, hi), pred))
    return -dc.mean(label * dc.log(pred) + (1.0 - label) * dc.log(1.0 - pred))


def squared_error(pred, target) -> dc.Node:
    pred = dc._as_node(pred)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    return dc.mean(dc.square(pred - target))


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    eval_kl: float = float("nan")


@dataclass
class TrainResult:
    model: ResponseModel
    trace: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "steps", "train_loss", "eval_kl"])
            for r in self.trace:
                w.writerow([r.epoch, r.steps, f"{r.train_loss:.17g}", f"{r.eval_kl:.17g}"])


def batch_loss(model: ResponseModel, batch: LoggedDataset, config: TrainConfig,
               rng: np.random.Generator | None) -> dc.Node:
    prob, value = model.forward(batch, rng)
    loss = config.task_weights[0] * cross_entropy(prob, batch.label)
    if value is not None and config.task_weights[1] > 0:
        loss = loss + config.task_weights[1] * squared_error(value, batch.value)
    return loss


def unbiased_kl(model: ResponseModel, data: LoggedDataset, treatments) -> float:
    return metrics.per_treatment_kl(data.treatment, data.label, model.predict(data), treatments)


def train(model: ResponseModel, data: LoggedDataset, config: TrainConfig,
          eval_data: LoggedDataset | None = None) -> TrainResult:
    """Fit ``model`` in place on ``data``.

    With ``eval_data`` (randomly treated records) the per-treatment KL is
    tracked after each epoch; training stops after ``patience`` epochs
    without improvement and the best parameters are restored.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = model.parameters()
    opt = dc.Adagrad(params, config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 101])
    drop_rng = np.random.default_rng([config.seed, 202])
    treatments = np.unique(eval_data.treatment) if eval_data is not None else None
    result = TrainResult(model)
    best_kl, best_values, since_best = np.inf, None, 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), config.batch_size):
            batch = data.subset(order[start:start + config.batch_size])
            loss = batch_loss(model, batch, config, drop_rng)
            step += 1
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss {float(loss.value)} at epoch {epoch}, step {step}")
            for p in params:
                p.grad = None
            dc.backward(loss)
            opt.step()
            model.check_constraints()
            total += float(loss.value) * len(batch)
        record = EpochRecord(epoch, step, total / len(data))
        if eval_data is not None:
            record.eval_kl = unbiased_kl(model, eval_data, treatments)
            if record.eval_kl < best_kl:
                best_kl, since_best, result.best_epoch = record.eval_kl, 0, epoch
                best_values = [p.value.copy() for p in params]
            else:
                since_best += 1
        result.trace.append(record)
        if eval_data is not None and since_best >= config.patience:
            result.stopped_early = True
            break
    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value = v
    return result


def train_named(name: str, data: LoggedDataset, world: SyntheticWorld, config: TrainConfig,
                eval_data: LoggedDataset | None = None, **overrides) -> TrainResult:
    """Build the named model (dropout from ``config``) and train it."""
    overrides.setdefault("dropout", config.dropout)
    model = build_model(name, data, world, seed=config.seed, **overrides)
    return train(model, data, config, eval_data)
