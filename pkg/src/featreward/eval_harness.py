"""Evaluation utilities: pairwise win/tie/loss, Fleiss' kappa, feature gaps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_types import DataError, FeatureSchema, PreferencePair, pair_arrays


@dataclass(frozen=True)
class RankingRecord:
    """``ranking`` is a list of tie groups, best group first."""

    context_id: str
    rater_id: str
    ranking: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        groups = tuple(tuple(str(s) for s in g) for g in self.ranking)
        object.__setattr__(self, "ranking", groups)
        flat = [s for g in groups for s in g]
        if len(flat) != len(set(flat)):
            raise ValueError(f"record {self.context_id!r}: system listed more than once")
        if any(len(g) == 0 for g in groups):
            raise ValueError(f"record {self.context_id!r}: empty rank group")

    @property
    def systems(self) -> frozenset[str]:
        return frozenset(s for g in self.ranking for s in g)

    def positions(self) -> dict[str, int]:
        return {s: k for k, g in enumerate(self.ranking) for s in g}


def load_rankings(path: str | Path) -> list[RankingRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ranking = rec["ranking"]
                groups = [g if isinstance(g, list) else [g] for g in ranking]
                out.append(RankingRecord(str(rec["context_id"]), str(rec.get("rater_id", "")), groups))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"bad ranking record: {e}", lineno, str(path)) from None
    if not out:
        raise DataError("empty dataset", path=str(path))
    return out


@dataclass(frozen=True)
class WTLMatrix:
    systems: tuple[str, ...]
    cells: dict  # (row, col) -> (win, tie, loss), row vs col

    def __getitem__(self, key):
        return self.cells[key]

    def text_table(self) -> str:
        width = max(14, max(len(s) for s in self.systems) + 2)
        head = " " * width + "".join(f"{s:>{width}}" for s in self.systems)
        lines = [head]
        for a in self.systems:
            row = f"{a:<{width}}"
            for b in self.systems:
                cell = "-" if a == b else "{:.2f}/{:.2f}/{:.2f}".format(*self.cells[(a, b)])
                row += f"{cell:>{width}}"
            lines.append(row)
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["system", "opponent", "win", "tie", "loss"])
            for (a, b), (win, tie, loss) in sorted(self.cells.items()):
                w.writerow([a, b, repr(win), repr(tie), repr(loss)])


def pairwise_wtl(records: Sequence[RankingRecord]) -> WTLMatrix:
    """Fraction of records in which the row system ranks above/level/below the column system."""
    if not records:
        raise ValueError("no ranking records")
    systems = records[0].systems
    for r in records[1:]:
        if r.systems != systems:
            raise ValueError(f"inconsistent system sets across records (context {r.context_id!r})")
    names = tuple(sorted(systems))
    counts = {(a, b): [0, 0, 0] for a in names for b in names if a != b}
    for r in records:
        pos = r.positions()
        for (a, b), c in counts.items():
            if pos[a] < pos[b]:
                c[0] += 1
            elif pos[a] == pos[b]:
                c[1] += 1
            else:
                c[2] += 1
    n = len(records)
    return WTLMatrix(names, {k: (w / n, t / n, l / n) for k, (w, t, l) in counts.items()})


def fleiss_kappa(table) -> float:
    """Fleiss' kappa for an items x categories matrix of rating counts."""
    m = np.asarray(table, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("table must be a non-empty 2-D matrix")
    if m.shape[1] < 2:
        raise ValueError("need at least two categories")
    if np.any(m < 0) or not np.all(np.isfinite(m)) or np.any(m != np.round(m)):
        raise ValueError("counts must be non-negative integers")
    row_sums = m.sum(axis=1)
    if np.any(row_sums != row_sums[0]):
        raise ValueError("unequal row sums: every item needs the same number of raters")
    n = row_sums[0]
    if n < 2:
        raise ValueError("need at least two raters per item")
    n_items = m.shape[0]
    p_j = m.sum(axis=0) / (n_items * n)
    p_i = (np.sum(m * m, axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_e = float(np.sum(p_j * p_j))
    if p_e == 1.0:
        # every rating in one category: agreement is perfect, chance agreement too
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


@dataclass(frozen=True)
class FeatureGap:
    names: tuple[str, ...]
    winner_mean: np.ndarray
    loser_mean: np.ndarray

    def rows(self):
        return list(zip(self.names, self.winner_mean.tolist(), self.loser_mean.tolist()))

    def text_table(self) -> str:
        pad = max(len(n) for n in self.names)
        lines = [f"{'feature':<{pad}}  {'pref':>6}  {'dispref':>7}"]
        lines += [f"{n:<{pad}}  {w:6.2f}  {l:7.2f}" for n, w, l in self.rows()]
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "winner_mean", "loser_mean"])
            for n, a, b in self.rows():
                w.writerow([n, repr(a), repr(b)])


def feature_gap_report(dataset: Sequence[PreferencePair], schema: FeatureSchema | None = None) -> FeatureGap:
    if not dataset:
        raise ValueError("empty dataset")
    xw, xl = pair_arrays(dataset)
    names = schema.names if schema is not None else FeatureSchema.default().names
    if len(names) != xw.shape[1]:
        names = tuple(f"f{i}" for i in range(xw.shape[1]))
    wm = np.array([math.fsum(c) / len(c) for c in xw.T])
    lm = np.array([math.fsum(c) / len(c) for c in xl.T])
    return FeatureGap(tuple(names), wm, lm)
