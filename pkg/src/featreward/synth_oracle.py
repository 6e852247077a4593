"""Known-answer generators: latent rewards, Bradley-Terry preferences, tiered pools."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import mlp
from .core_types import (
    Candidate,
    CandidatePool,
    CandidateRef,
    FeatureSchema,
    FeatureVector,
    PreferencePair,
    Tier,
)


@dataclass(frozen=True)
class LatentRewardSpec:
    """A ground-truth reward over raw feature values.

    ``kind="linear"`` uses ``weights`` directly on raw features.
    ``kind="mlp"`` builds a seeded random tanh network over normalized
    features with ``hidden_dims``.
    """

    kind: str = "linear"
    weights: tuple[float, ...] = ()
    hidden_dims: tuple[int, ...] = (16,)
    seed: int = 0
    noise_temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown latent kind {self.kind!r}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind == "linear" and not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if not self.noise_temperature >= 0:
            raise ValueError("noise_temperature must be >= 0")

    @classmethod
    def linear(cls, weights, noise_temperature: float = 0.0) -> "LatentRewardSpec":
        return cls("linear", tuple(weights), noise_temperature=noise_temperature)

    @classmethod
    def random_mlp(cls, hidden_dims=(16,), seed=0, noise_temperature: float = 0.0) -> "LatentRewardSpec":
        return cls("mlp", (), tuple(hidden_dims), seed, noise_temperature)

    def network(self, schema: FeatureSchema) -> mlp.MLPParams:
        return mlp.init_params((len(schema), *self.hidden_dims, 1), "tanh", self.seed, schema)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weights": list(self.weights),
            "hidden_dims": list(self.hidden_dims),
            "seed": self.seed,
            "noise_temperature": self.noise_temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentRewardSpec":
        return cls(d["kind"], tuple(d.get("weights", ())), tuple(d.get("hidden_dims", (16,))),
                   int(d.get("seed", 0)), float(d.get("noise_temperature", 0.0)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LatentRewardSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def latent_reward(spec: LatentRewardSpec, features, schema: FeatureSchema | None = None):
    """Latent reward of one vector (float) or a (n, d) array (array)."""
    schema = schema or FeatureSchema.default()
    x = np.asarray(list(features) if isinstance(features, FeatureVector) else features, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if spec.kind == "linear":
        if len(spec.weights) != X.shape[1]:
            raise ValueError(f"latent has {len(spec.weights)} weights, features have {X.shape[1]}")
        r = X @ np.asarray(spec.weights)
    else:
        r = mlp.forward(spec.network(schema), X)
    return float(r[0]) if single else r


def uniform_features(rng: np.random.Generator, n: int, schema: FeatureSchema) -> np.ndarray:
    return rng.uniform(schema.lows, schema.highs, size=(n, len(schema)))


def sample_preferences(
    spec: LatentRewardSpec,
    n: int,
    seed: int = 0,
    schema: FeatureSchema | None = None,
    prefix: str = "syn",
) -> list[PreferencePair]:
    """Draw ``n`` candidate pairs uniformly in the schema box and label them.

    With temperature t > 0 the first candidate wins with probability
    sigmoid((r_a - r_b) / t); at t = 0 the higher latent reward wins.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    schema = schema or FeatureSchema.default()
    rng = np.random.default_rng(seed)
    a = uniform_features(rng, n, schema)
    b = uniform_features(rng, n, schema)
    ra = latent_reward(spec, a, schema)
    rb = latent_reward(spec, b, schema)
    t = spec.noise_temperature
    if t == 0:
        a_wins = ra >= rb
    else:
        u = rng.uniform(size=n)
        z = np.clip((ra - rb) / t, -700, 700)
        a_wins = u < 1.0 / (1.0 + np.exp(-z))
    pairs = []
    for i in range(n):
        ctx = f"{prefix}-{i:06d}"
        ida, idb = CandidateRef(f"{ctx}-a"), CandidateRef(f"{ctx}-b")
        fa, fb = FeatureVector(a[i]), FeatureVector(b[i])
        if a_wins[i]:
            pairs.append(PreferencePair(ctx, ida, idb, fa, fb, "synthetic"))
        else:
            pairs.append(PreferencePair(ctx, idb, ida, fb, fa, "synthetic"))
    return pairs


def gen_candidate_pools(
    spec: LatentRewardSpec,
    pool_count: int,
    candidates_per_tier: int = 3,
    seed: int = 0,
    schema: FeatureSchema | None = None,
    prefix: str = "pool",
) -> list[CandidatePool]:
    """Pools of 3 * candidates_per_tier candidates tiered by within-pool latent terciles."""
    if candidates_per_tier < 1:
        raise ValueError("candidates_per_tier must be >= 1")
    schema = schema or FeatureSchema.default()
    rng = np.random.default_rng(seed)
    k = candidates_per_tier
    pools = []
    for p in range(pool_count):
        x = uniform_features(rng, 3 * k, schema)
        r = latent_reward(spec, x, schema)
        order = np.argsort(-r, kind="stable")
        tiers = [None] * (3 * k)
        for rank, idx in enumerate(order):
            tiers[idx] = (Tier.GOOD, Tier.SBAD, Tier.VBAD)[rank // k]
        ctx = f"{prefix}-{p:05d}"
        cands = tuple(
            Candidate(f"{ctx}-c{j}", tiers[j], FeatureVector(x[j]), 0.0) for j in range(3 * k)
        )
        pools.append(CandidatePool(ctx, cands))
    return pools
