"""Mini-batch training loop and evaluation over lists of user batches."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import evaluate
from .model import ARCH_VISTA, VistaModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_users: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainHistory:
    total: list = field(default_factory=list)
    bce: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    seconds: float = 0.0

    def smoothed(self, name, window=50):
        values = np.asarray(getattr(self, name), dtype=np.float64)
        if values.size == 0:
            return values
        window = max(1, min(window, values.size))
        return np.convolve(values, np.ones(window) / window, mode="valid")


def train(model: VistaModel, batches, config: TrainConfig, history: TrainHistory | None = None,
          shuffle=True, epoch_seed=None, on_step=None):
    """Run `config.epochs` passes over `batches` in mini-batches of users.

    Users are shuffled per epoch unless `shuffle` is False, in which case they
    are visited in list order. Passing `epoch_seed` runs a single epoch
    shuffled by ``(config.seed, epoch_seed)``, for callers that evaluate
    between epochs. `on_step(step, parts)` is called after each update.
    """
    history = history or TrainHistory()
    model.optimizer.lr = config.lr
    model.optimizer.weight_decay = config.weight_decay
    seed = config.seed if epoch_seed is None else [config.seed, epoch_seed]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    for epoch in range(config.epochs if epoch_seed is None else 1):
        order = rng.permutation(len(batches)) if shuffle else np.arange(len(batches))
        for i in range(0, len(order), config.batch_users):
            chunk = [batches[j] for j in order[i:i + config.batch_users]]
            parts = model.train_step(chunk)
            history.total.append(parts.total)
            history.bce.append(parts.bce)
            history.recon.append(parts.recon)
            if on_step is not None:
                on_step(model.step, parts)
            if config.log_every and model.step % config.log_every == 0:
                log.info("epoch %d step %d loss %.4f bce %.4f recon %.4f",
                         epoch, model.step, parts.total, parts.bce, parts.recon)
    history.seconds += time.perf_counter() - start
    return history


def predict_all(model: VistaModel, batches):
    return np.concatenate([model.predict_batch(b) for b in batches])


def evaluate_model(model: VistaModel, batches):
    preds = predict_all(model, batches)
    labels = np.concatenate([b.labels for b in batches])
    lengths = np.concatenate([np.full(b.n_candidates, b.history_length) for b in batches])
    return evaluate(preds, labels, lengths)


def summaries(model: VistaModel, batches):
    """``{user_id: tokens}`` for every batch; VISTA models only."""
    if model.config.arch != ARCH_VISTA:
        raise ValueError("summaries need a VISTA model")
    return {b.user_id: model.summary_tokens(b) for b in batches}
