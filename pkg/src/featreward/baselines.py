"""Reward baselines that need no human preferences.

``naive_mean_reward`` scores a candidate by the plain average of its raw
feature values. ``derive_implicit_pairs`` turns quality-tiered pools into
preference pairs using GOOD > SBAD > VBAD.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_types import CandidatePool, FeatureSchema, FeatureVector, PreferencePair, Tier

ALL_CROSS_TIER = "all_cross_tier"
ADJACENT_TIER_ONLY = "adjacent_tier_only"


def naive_mean_reward(features: FeatureVector | Sequence[float], schema: FeatureSchema | None = None) -> float:
    values = list(features)
    if schema is not None and len(values) != len(schema):
        raise ValueError("length mismatch")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class ImplicitPairPolicy:
    pairing: str = ALL_CROSS_TIER
    max_pairs_per_pool: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pairing not in (ALL_CROSS_TIER, ADJACENT_TIER_ONLY):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.max_pairs_per_pool is not None and self.max_pairs_per_pool < 1:
            raise ValueError("max_pairs_per_pool must be positive")


def _allowed(winner: Tier, loser: Tier, pairing: str) -> bool:
    gap = winner.rank - loser.rank
    return gap == 1 if pairing == ADJACENT_TIER_ONLY else gap >= 1


def derive_implicit_pairs(pools: Sequence[CandidatePool], policy: ImplicitPairPolicy | None = None) -> list[PreferencePair]:
    policy = policy or ImplicitPairPolicy()
    rng = np.random.default_rng(policy.seed)
    out = []
    for pool in pools:
        pairs = [
            PreferencePair(pool.context_id, w.ref(), l.ref(), w.features, l.features, "implicit")
            for w, l in itertools.permutations(pool.candidates, 2)
            if _allowed(w.tier, l.tier, policy.pairing)
        ]
        cap = policy.max_pairs_per_pool
        if cap is not None and len(pairs) > cap:
            keep = np.sort(rng.choice(len(pairs), size=cap, replace=False))
            pairs = [pairs[i] for i in keep]
        out.extend(pairs)
    return out
