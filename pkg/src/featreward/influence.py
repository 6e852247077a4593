"""Per-feature influence on a reward model via averaged symmetric differences.

For each feature i, the model is evaluated at x + delta*e_i and x - delta*e_i
over many base points x, and the differences are averaged and divided by
2*delta. Shares are the raw values divided by the sum of their absolute
values, so they sum to 1 in absolute value (exactly 1 when all are positive).
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mlp
from .core_types import FeatureSchema

CHUNK = 8192


@dataclass(frozen=True)
class InfluenceConfig:
    delta: float = 0.1
    sample_count: int = 8192
    sampling: str = "monte_carlo"  # or "grid"
    points_per_axis: int = 5
    seed: int = 0

    def validate(self, schema: FeatureSchema) -> None:
        half = 0.5 * float(np.min(schema.highs - schema.lows))
        if not (self.delta > 0 and self.delta < half):
            raise ValueError(f"delta out of range: need 0 < delta < {half:g}, got {self.delta:g}")
        if self.sampling == "monte_carlo":
            if self.sample_count < 1:
                raise ValueError("sample_count must be positive")
        elif self.sampling == "grid":
            if self.points_per_axis < 2:
                raise ValueError("points_per_axis must be >= 2")
        else:
            raise ValueError(f"unknown sampling {self.sampling!r}")


@dataclass(frozen=True)
class InfluenceReport:
    names: tuple[str, ...]
    raw: np.ndarray
    normalized: np.ndarray
    sample_count: int

    def rows(self):
        return list(zip(self.names, self.raw.tolist(), self.normalized.tolist()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "raw", "normalized"])
            for name, r, s in self.rows():
                w.writerow([name, repr(r), repr(s)])

    def bar_chart(self, width: int = 40) -> str:
        pad = max(len(n) for n in self.names)
        lines = []
        for name, _, s in self.rows():
            bar = ("#" if s >= 0 else "-") * int(round(abs(s) * width))
            lines.append(f"{name:<{pad}}  {s:+.4f}  {bar}")
        return "\n".join(lines)


def _base_points(schema: FeatureSchema, config: InfluenceConfig) -> np.ndarray:
    lo = schema.lows + config.delta
    hi = schema.highs - config.delta
    if config.sampling == "monte_carlo":
        rng = np.random.default_rng(config.seed)
        return rng.uniform(lo, hi, size=(config.sample_count, len(schema)))
    axes = [np.linspace(a, b, config.points_per_axis) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _chunk_diffs(f: Callable, x: np.ndarray, delta: float) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, d))
    for i in range(d):
        up = x.copy()
        dn = x.copy()
        up[:, i] += delta
        dn[:, i] -= delta
        out[:, i] = f(up) - f(dn)
    return out


def feature_influence(
    model,
    schema: FeatureSchema | None = None,
    config: InfluenceConfig | None = None,
    threads: int = 1,
) -> InfluenceReport:
    """Influence of each feature on ``model`` (MLPParams or a batched callable)."""
    config = config or InfluenceConfig()
    if schema is None:
        schema = model.schema if isinstance(model, mlp.MLPParams) and model.schema else FeatureSchema.default()
    config.validate(schema)
    f = (lambda x: mlp.forward(model, x)) if isinstance(model, mlp.MLPParams) else model

    x = _base_points(schema, config)
    chunks = [x[i : i + CHUNK] for i in range(0, len(x), CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda c: _chunk_diffs(f, c, config.delta), chunks))
    else:
        parts = [_chunk_diffs(f, c, config.delta) for c in chunks]
    diffs = np.vstack(parts)

    n = len(x)
    # fsum is exactly rounded, so the result does not depend on chunking or thread order
    raw = np.array([math.fsum(diffs[:, i]) / n / (2 * config.delta) for i in range(len(schema))])
    total = math.fsum(np.abs(raw))
    if not math.isfinite(total) or total < 1e-15:
        raise ValueError("zero total influence")
    return InfluenceReport(schema.names, raw, raw / total, n)
