"""Minibatch SGD training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import rng as rngs
from ..errors import ConfigError, NumericError
from .model import Model, backward, evaluate, forward, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    dropout: float | None = None
    batchnorm: bool = False

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be a positive integer, got {self.batch_size}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"train.epochs must be a non-negative integer, got {self.epochs}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"train.dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float | None = None
    test_acc: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)


def train(model: Model, dataset, config: TrainConfig, *, test=None,
          callback: Callable[[Model, EpochRecord], bool | None] | None = None,
          target_train_acc: float | None = None, start_epoch: int = 0) -> TrainResult:
    """Train ``model`` in place with plain minibatch SGD.

    Data order and dropout masks come from streams derived from
    ``config.seed``, so two runs from the same initialization are bitwise
    identical.  After each epoch the model is scored in eval mode on the
    training set (and ``test`` if given).  ``callback`` may return True to
    stop early; ``target_train_acc`` stops once train accuracy reaches it.
    """
    config.validate()
    if len(dataset.labels) == 0:
        raise ConfigError("cannot train on an empty dataset")
    x, y = dataset.examples, np.asarray(dataset.labels)
    n = len(y)
    drop_rng = rngs.stream(config.seed, "dropout")
    history: list[EpochRecord] = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        order = rngs.stream(config.seed, f"shuffle/{epoch}").permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            trace = forward(model, x[idx], labels=y[idx], train=True, rng=drop_rng)
            if not np.isfinite(trace.loss):
                raise NumericError(f"training loss diverged at epoch {epoch}", epoch=epoch)
            grads = backward(model, trace, y[idx])
            try:
                sgd_step(model, grads, config.lr)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}", layer=exc.layer, epoch=epoch) from None
        tr = evaluate(model, dataset)
        if not np.isfinite(tr.loss):
            raise NumericError(f"training loss diverged at epoch {epoch}", epoch=epoch)
        rec = EpochRecord(epoch, tr.loss, tr.accuracy)
        if test is not None:
            te = evaluate(model, test)
            rec.test_loss, rec.test_acc = te.loss, te.accuracy
        history.append(rec)
        log.debug("epoch %d train_loss=%.4f train_acc=%.4f", epoch, rec.train_loss, rec.train_acc)
        stop = callback(model, rec) if callback is not None else False
        if stop or (target_train_acc is not None and rec.train_acc >= target_train_acc):
            break
    return TrainResult(model, history)
