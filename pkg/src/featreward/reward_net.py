"""Feature-based reward model trained with the pairwise Elo (Bradley-Terry) loss.

The loss for a pair is ``-log sigmoid(r_w - r_l)``: the winner's reward is
pushed above the loser's. Optimization is AdamW with decoupled weight decay,
linear warmup then cosine decay to zero, all in numpy and fully seeded.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import mlp
from .core_types import FeatureSchema, NumericalError, PreferencePair, pair_arrays
from .mlp import MLPParams

RewardNetParams = MLPParams

DEFAULT_HIDDEN = (16, 16)


def default_params(schema: FeatureSchema | None = None, hidden=DEFAULT_HIDDEN, activation="tanh", seed=0) -> MLPParams:
    schema = schema or FeatureSchema.default()
    return mlp.init_params((len(schema), *hidden, 1), activation, seed, schema)


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        return batch
    return pair_arrays(batch)


def _margins(params: MLPParams, xw: np.ndarray, xl: np.ndarray):
    n = len(xw)
    out, cache = mlp.forward_cache(params, np.vstack([xw, xl]))
    return out[:n] - out[n:], cache


def elo_loss(params: MLPParams, batch) -> float:
    """Mean of -log sigmoid(r_winner - r_loser) over the batch.

    ``batch`` is a list of PreferencePair or a ``(winners, losers)`` tuple of
    raw feature arrays.
    """
    xw, xl = _as_arrays(batch)
    if len(xw) == 0:
        raise ValueError("empty batch")
    d, _ = _margins(params, xw, xl)
    return float(np.mean(np.logaddexp(0.0, -d)))


def elo_loss_and_grad(params: MLPParams, batch) -> tuple[float, MLPParams]:
    xw, xl = _as_arrays(batch)
    n = len(xw)
    if n == 0:
        raise ValueError("empty batch")
    d, cache = _margins(params, xw, xl)
    loss = float(np.mean(np.logaddexp(0.0, -d)))
    # d/dd of log(1 + e^-d) is -sigmoid(-d)
    g = -_sigmoid(-d) / n
    grad = mlp.backward(params, cache, np.concatenate([g, -g]))
    return loss, grad


def elo_loss_grad(params: MLPParams, batch) -> MLPParams:
    return elo_loss_and_grad(params, batch)[1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def preference_accuracy(params: MLPParams, dataset) -> float:
    """Fraction of pairs where the winner scores higher; exact ties count half."""
    xw, xl = _as_arrays(dataset)
    if len(xw) == 0:
        raise ValueError("empty dataset")
    rw = mlp.forward(params, xw)
    rl = mlp.forward(params, xl)
    return float((np.sum(rw > rl) + 0.5 * np.sum(rw == rl)) / len(rw))


# -- optimization ------------------------------------------------------------


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then cosine to 0."""
    warmup = int(math.floor(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to weight matrices only."""

    def __init__(self, params: MLPParams, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: MLPParams, grad: MLPParams, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, (p, g) in enumerate(zip(params.arrays(), grad.arrays())):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if k % 2 == 0 and self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.005
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1
    total_epochs: int = 60
    seed: int = 0
    holdout_fraction: float = 0.1
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    holdout_loss: float | None
    holdout_acc: float | None


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    params: MLPParams
    config: TrainConfig
    wall_seconds: float = 0.0
    n_train: int = 0
    n_holdout: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "holdout_loss", "holdout_acc"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss),
                            "" if e.holdout_loss is None else repr(e.holdout_loss),
                            "" if e.holdout_acc is None else repr(e.holdout_acc)])


def split_holdout(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of range(n); the last fraction is held out."""
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(math.floor(holdout_fraction * n))
    return order[: n - n_hold], order[n - n_hold :]


def train_reward(
    dataset: Sequence[PreferencePair] | tuple[np.ndarray, np.ndarray],
    config: TrainConfig | None = None,
    init_seed: int | None = None,
    schema: FeatureSchema | None = None,
    init: MLPParams | None = None,
) -> TrainReport:
    """Fit a reward net on preference pairs.

    Accepts PreferencePair records (inputs normalized by ``schema``) or a raw
    ``(winners, losers)`` array tuple; for arrays pass ``init`` or a schema,
    otherwise inputs are used unnormalized.
    """
    config = config or TrainConfig()
    t0 = time.perf_counter()
    xw, xl = _as_arrays(dataset)
    n = len(xw)
    if n == 0:
        raise ValueError("empty dataset")
    if init is not None:
        params = init.copy()
    else:
        seed = config.seed if init_seed is None else init_seed
        if schema is None and not isinstance(dataset, tuple):
            schema = FeatureSchema.default()
        dims = (xw.shape[1], *config.hidden, 1)
        params = mlp.init_params(dims, config.activation, seed, schema)

    train_idx, hold_idx = split_holdout(n, config.holdout_fraction, config.seed)
    if config.batch_size > len(train_idx):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {len(train_idx)}")
    tw, tl = xw[train_idx], xl[train_idx]
    hw, hl = xw[hold_idx], xl[hold_idx]

    rng = np.random.default_rng([config.seed, 1])
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    total = steps_per_epoch * config.total_epochs
    opt = AdamW(params, config.weight_decay)
    history = []
    step = 0
    # overflow on divergence is caught below as a NumericalError
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.total_epochs):
            perm = rng.permutation(len(train_idx))
            for s in range(steps_per_epoch):
                b = perm[s * config.batch_size : (s + 1) * config.batch_size]
                loss, grad = elo_loss_and_grad(params, (tw[b], tl[b]))
                if not math.isfinite(loss):
                    raise NumericalError("non-finite loss", step)
                opt.step(params, grad, warmup_cosine_lr(step, total, config.learning_rate, config.warmup_fraction))
                if not params.is_finite():
                    raise NumericalError("non-finite parameters", step)
                step += 1
            train_loss = elo_loss(params, (tw, tl))
            if not math.isfinite(train_loss):
                raise NumericalError("non-finite loss", step)
            if len(hold_idx):
                hist = EpochStats(epoch + 1, train_loss, elo_loss(params, (hw, hl)), preference_accuracy(params, (hw, hl)))
            else:
                hist = EpochStats(epoch + 1, train_loss, None, None)
            history.append(hist)
    return TrainReport(history, params, config, time.perf_counter() - t0, len(train_idx), len(hold_idx))


def save_checkpoint(params: MLPParams, path, config: TrainConfig | None = None, **extra) -> None:
    meta = {"kind": "reward"}
    if config is not None:
        meta["train_config"] = config.to_dict()
    meta.update(extra)
    mlp.save(params, path, meta)


def load_checkpoint(path) -> tuple[MLPParams, dict]:
    return mlp.load(path)
