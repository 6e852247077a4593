"""KL-regularized policy optimization over an offline buffer of candidate pools.

The policy scores every candidate of a pool with a small feed-forward net and
picks one by softmax over those logits. Because each pool is a finite set,
the objective

    L = -mean_pools sum_s pi(s) * (reward(s) - beta * log(pi(s) / pi_ref(s)))

is evaluated exactly rather than by sampling. ``pi_ref`` is the softmax of
each candidate's stored ``sft_logprob``. A PPO-style clipped-ratio surrogate
with per-epoch old-policy snapshots is available as an alternative.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import mlp
from .core_types import CandidatePool, FeatureSchema, NumericalError
from .mlp import MLPParams
from .reward_net import AdamW, warmup_cosine_lr

EXACT = "exact"
CLIPPED = "clipped"


@dataclass
class PolicySelector:
    net: MLPParams

    def logits(self, pool: CandidatePool) -> np.ndarray:
        return mlp.forward(self.net, pool.feature_matrix())

    def distribution(self, pool: CandidatePool) -> np.ndarray:
        return policy_distribution(self, pool)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def policy_distribution(policy: PolicySelector, pool: CandidatePool) -> np.ndarray:
    return np.exp(log_softmax(policy.logits(pool)))


def _reward_fn(reward) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(reward, MLPParams):
        return lambda x: mlp.forward(reward, x)
    return reward


def _check_schema(policy: PolicySelector, reward, pools: Sequence[CandidatePool]) -> None:
    d = policy.net.layer_dims[0]
    if isinstance(reward, MLPParams) and reward.layer_dims[0] != d:
        raise ValueError(f"pool/reward schema mismatch: policy takes {d} features, reward takes {reward.layer_dims[0]}")
    if isinstance(reward, MLPParams) and reward.schema and policy.net.schema:
        if reward.schema.fingerprint() != policy.net.schema.fingerprint():
            raise ValueError("pool/reward schema mismatch: different feature schemas")
    for p in pools:
        if p.feature_matrix().shape[1] != d:
            raise ValueError(f"pool/reward schema mismatch in pool {p.context_id!r}")


class _Buffer:
    """Stacked features with per-pool slices, rewards and reference log-probs."""

    def __init__(self, pools: Sequence[CandidatePool], reward):
        if not pools:
            raise ValueError("no pools")
        self.x = np.vstack([p.feature_matrix() for p in pools])
        sizes = [len(p.candidates) for p in pools]
        self.bounds = np.cumsum([0] + sizes)
        self.rewards = np.asarray(_reward_fn(reward)(self.x), dtype=float)
        self.log_ref = np.concatenate([log_softmax(p.sft_logprobs()) for p in pools])
        self.n_pools = len(pools)

    def slices(self):
        for k in range(self.n_pools):
            yield slice(self.bounds[k], self.bounds[k + 1])


@dataclass
class PoolStats:
    objective: float
    mean_reward: float
    mean_kl: float


def _evaluate(buf: _Buffer, logits: np.ndarray, beta: float):
    """Objective, stats and d(objective)/d(logits) for the exact expectation."""
    dz = np.empty_like(logits)
    objs, rews, kls = [], [], []
    for sl in buf.slices():
        logp = log_softmax(logits[sl])
        p = np.exp(logp)
        r = buf.rewards[sl]
        log_ratio = logp - buf.log_ref[sl]
        g = r - beta * log_ratio
        j = float(p @ g)
        objs.append(j)
        rews.append(float(p @ r))
        kls.append(float(p @ log_ratio))
        # d J / d z_k = p_k * (g_k - E_p[g]); the extra -beta from d(p log p) cancels
        dz[sl] = -p * (g - j) / buf.n_pools
    stats = PoolStats(-math.fsum(objs) / buf.n_pools, math.fsum(rews) / buf.n_pools, math.fsum(kls) / buf.n_pools)
    return stats, dz


def policy_objective(policy: PolicySelector, pools: Sequence[CandidatePool], reward, beta: float) -> float:
    """Exact KL-penalized loss averaged over pools (lower is better)."""
    _check_schema(policy, reward, pools)
    buf = _Buffer(pools, reward)
    return _evaluate(buf, mlp.forward(policy.net, buf.x), beta)[0].objective


def policy_objective_grad(policy: PolicySelector, pools: Sequence[CandidatePool], reward, beta: float) -> MLPParams:
    _check_schema(policy, reward, pools)
    buf = _Buffer(pools, reward)
    logits, cache = mlp.forward_cache(policy.net, buf.x)
    _, dz = _evaluate(buf, logits, beta)
    return mlp.backward(policy.net, cache, dz)


def mean_kl(policy: PolicySelector, pools: Sequence[CandidatePool]) -> float:
    """Average over pools of KL(pi_theta || pi_ref)."""
    kls = []
    for p in pools:
        logp = log_softmax(policy.logits(p))
        kls.append(float(np.exp(logp) @ (logp - log_softmax(p.sft_logprobs()))))
    return math.fsum(kls) / len(kls)


def _clipped_surrogate(buf: _Buffer, logits: np.ndarray, old_logp: np.ndarray, adv: np.ndarray, eps: float):
    """PPO clipped surrogate (to maximize) averaged over pools, and its logit gradient for the loss."""
    dz = np.empty_like(logits)
    total = []
    for sl in buf.slices():
        logp = log_softmax(logits[sl])
        p = np.exp(logp)
        p_old = np.exp(old_logp[sl])
        a = adv[sl]
        ratio = np.exp(logp - old_logp[sl])
        unclipped = ratio * a
        clipped = np.clip(ratio, 1 - eps, 1 + eps) * a
        total.append(float(p_old @ np.minimum(unclipped, clipped)))
        active = np.where(a >= 0, ratio <= 1 + eps, ratio >= 1 - eps).astype(float)
        # p_old * ratio = p, so d/dz of the active terms is a_s * p_s * (e_s - p)
        w = active * a * p
        dz[sl] = -(w - p * w.sum()) / buf.n_pools
    return math.fsum(total) / buf.n_pools, dz


@dataclass
class PolicyOptConfig:
    beta: float
    learning_rate: float = 0.1
    epochs: int = 2000
    seed: int = 0
    objective_variant: str = EXACT
    epsilon: float = 0.2
    inner_steps: int = 4
    hidden: tuple[int, ...] = (16, 16)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be a finite non-negative number")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.inner_steps < 1:
            raise ValueError("epochs and inner_steps must be positive")
        if self.objective_variant not in (EXACT, CLIPPED):
            raise ValueError(f"objective_variant must be {EXACT!r} or {CLIPPED!r}")
        if self.objective_variant == CLIPPED and not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class PolicyEpoch:
    epoch: int
    objective: float
    mean_reward: float
    mean_kl: float


@dataclass
class PolicyReport:
    epochs: list[PolicyEpoch]
    config: PolicyOptConfig
    wall_seconds: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "objective", "mean_reward", "mean_kl"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.objective), repr(e.mean_reward), repr(e.mean_kl)])


def init_policy(schema: FeatureSchema, hidden=(16, 16), activation="tanh", seed=0) -> PolicySelector:
    return PolicySelector(mlp.init_params((len(schema), *hidden, 1), activation, seed, schema))


def train_policy(
    pools: Sequence[CandidatePool],
    reward,
    config: PolicyOptConfig,
    init_seed: int | None = None,
    schema: FeatureSchema | None = None,
    init: PolicySelector | None = None,
) -> tuple[PolicySelector, PolicyReport]:
    """Full-batch Adam on the exact objective or the clipped surrogate.

    The learning rate decays from ``learning_rate`` to 0 on a cosine over all
    optimizer steps. Deterministic given the seeds.
    """
    if not pools:
        raise ValueError("no pools")
    t0 = time.perf_counter()
    if init is not None:
        policy = PolicySelector(init.net.copy())
    else:
        schema = schema or (reward.schema if isinstance(reward, MLPParams) and reward.schema else FeatureSchema.default())
        seed = config.seed if init_seed is None else init_seed
        policy = init_policy(schema, config.hidden, config.activation, seed)
    _check_schema(policy, reward, pools)
    buf = _Buffer(pools, reward)
    opt = AdamW(policy.net, weight_decay=0.0)
    inner = config.inner_steps if config.objective_variant == CLIPPED else 1
    total = config.epochs * inner
    step = 0
    history = []
    for epoch in range(config.epochs):
        if config.objective_variant == CLIPPED:
            old = mlp.forward(policy.net, buf.x)
            old_logp = np.concatenate([log_softmax(old[sl]) for sl in buf.slices()])
            shaped = buf.rewards - config.beta * (old_logp - buf.log_ref)
            adv = np.empty_like(shaped)
            for sl in buf.slices():
                adv[sl] = shaped[sl] - np.exp(old_logp[sl]) @ shaped[sl]
        for _ in range(inner):
            logits, cache = mlp.forward_cache(policy.net, buf.x)
            if config.objective_variant == EXACT:
                stats, dz = _evaluate(buf, logits, config.beta)
                loss = stats.objective
            else:
                surr, dz = _clipped_surrogate(buf, logits, old_logp, adv, config.epsilon)
                loss = -surr
            if not math.isfinite(loss):
                raise NumericalError("non-finite policy objective", step)
            grad = mlp.backward(policy.net, cache, dz)
            opt.step(policy.net, grad, warmup_cosine_lr(step, total, config.learning_rate, 0.0))
            if not policy.net.is_finite():
                raise NumericalError("non-finite policy parameters", step)
            step += 1
        stats, _ = _evaluate(buf, mlp.forward(policy.net, buf.x), config.beta)
        history.append(PolicyEpoch(epoch + 1, stats.objective, stats.mean_reward, stats.mean_kl))
    return policy, PolicyReport(history, config, time.perf_counter() - t0)


def argmax_probability(policy: PolicySelector, pools: Sequence[CandidatePool], reward) -> np.ndarray:
    """Per-pool probability the policy puts on the highest-reward candidate."""
    f = _reward_fn(reward)
    out = []
    for p in pools:
        r = f(p.feature_matrix())
        out.append(policy_distribution(policy, p)[int(np.argmax(r))])
    return np.array(out)


def save_checkpoint(policy: PolicySelector, path, config: PolicyOptConfig | None = None, **extra) -> None:
    meta = {"kind": "policy"}
    if config is not None:
        meta["policy_config"] = config.to_dict()
        meta["objective_variant"] = config.objective_variant
        meta["beta"] = config.beta
    meta.update(extra)
    mlp.save(policy.net, path, meta)


def load_checkpoint(path) -> tuple[PolicySelector, dict]:
    net, meta = mlp.load(path)
    return PolicySelector(net), meta
