"""SGD training with momentum and weight decay, one bag per step for MIL heads."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from wsimil.evaluation import auc

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
VARIANTS = ("attention", "max", "mean", "baseline")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    weight_decay: float = 1e-4
    seed: int = 0
    variant: str = "attention"
    batch_size: int | None = None  # None: 1 for MIL heads, 8 for the baseline

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return int(self.batch_size)
        return 8 if self.variant == "baseline" else 1


@dataclass
class Split:
    """Model inputs with binary labels; ``inputs[i]`` is a (K, M) bag or an image."""

    inputs: list
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.inputs))]
        if not (len(self.inputs) == len(self.labels) == len(self.ids)):
            raise ValueError("inputs, labels and ids differ in length")

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_bags(cls, bags) -> "Split":
        return cls(
            [np.asarray(b.instances, dtype=np.float64) for b in bags],
            [b.label for b in bags],
            [b.slide_id for b in bags],
        )


@dataclass
class RunHistory:
    seed: int
    train_loss: list
    val_loss: list
    val_auc: list
    params: dict
    best_params: dict
    best_epoch: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_auc": [None if math.isnan(x) else x for x in self.val_auc],
            "best_epoch": self.best_epoch,
        }


def bce_loss(p, y) -> float:
    p = min(max(float(p), BCE_EPS), 1.0 - BCE_EPS)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def sgd_step(params: dict, grads: dict, config: TrainConfig, velocity: dict) -> dict:
    """One momentum SGD update; ``velocity`` is updated in place, new params are returned."""
    out = {}
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        vel = config.momentum * velocity.get(name, 0.0) + g + config.weight_decay * value
        velocity[name] = vel
        out[name] = value - config.learning_rate * vel
    return out


def predict_split(model, params, split: Split):
    return np.array([model.predict(params, x) for x in split.inputs])


def _safe_auc(labels, scores) -> float:
    if len(set(np.asarray(labels).tolist())) < 2:
        return float("nan")
    return auc(labels, scores)


def train(model, train_split: Split, val_split: Split, config: TrainConfig,
          init_params: dict | None = None) -> RunHistory:
    """Train ``model`` from a seeded initialization; fully deterministic given seed and data."""
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    seq = np.random.SeedSequence(config.seed)
    init_rng, order_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    params = init_params if init_params is not None else model.init_params(init_rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    velocity: dict = {}
    bs = config.effective_batch_size

    history = RunHistory(config.seed, [], [], [], params, params, -1)
    best_auc = -math.inf
    n = len(train_split)
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xs = [train_split.inputs[i] for i in idx]
            ys = train_split.labels[idx]
            loss, grads = model.loss_and_grad(params, xs, ys)
            try:
                params = sgd_step(params, grads, config, velocity)
            except NonFiniteGradientError as exc:
                ids = [train_split.ids[i] for i in idx]
                raise NonFiniteGradientError(f"epoch {epoch}, examples {ids}: {exc}") from None
            losses.append(loss * len(idx))
        history.train_loss.append(float(np.sum(losses) / n))
        val_scores = predict_split(model, params, val_split)
        history.val_loss.append(float(np.mean(
            [bce_loss(p, y) for p, y in zip(val_scores, val_split.labels)])))
        val_auc = _safe_auc(val_split.labels, val_scores)
        history.val_auc.append(val_auc)
        if epoch == 0 or (not math.isnan(val_auc) and val_auc > best_auc):
            best_auc = val_auc if not math.isnan(val_auc) else best_auc
            history.best_params = params
            history.best_epoch = epoch
        log.debug("epoch %d train %.4f val %.4f auc %.4f", epoch,
                  history.train_loss[-1], history.val_loss[-1], val_auc)
    history.params = params
    return history


def rerun(model, train_split: Split, val_split: Split, config: TrainConfig, n_runs: int,
          workers: int = 1) -> list:
    """``n_runs`` trainings with seeds seed, seed+1, ...; results in seed order."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    configs = [_with_seed(config, config.seed + i) for i in range(n_runs)]
    if workers <= 1:
        return [train(model, train_split, val_split, c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(train, model, train_split, val_split, c) for c in configs]
        return [f.result() for f in futures]


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(config, seed=seed)
