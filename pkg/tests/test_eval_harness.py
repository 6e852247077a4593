import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featreward.core_types import CandidateRef, DataError, FeatureVector, PreferencePair
from featreward.eval_harness import (
    RankingRecord,
    feature_gap_report,
    fleiss_kappa,
    load_rankings,
    pairwise_wtl,
)
from featreward.synth_oracle import LatentRewardSpec, sample_preferences

from conftest import LATENT_WEIGHTS, write_jsonl

# 10 items, 5 raters, 3 categories
HAND_TABLE = [
    [5, 0, 0],
    [4, 1, 0],
    [3, 1, 1],
    [0, 5, 0],
    [0, 4, 1],
    [1, 1, 3],
    [0, 0, 5],
    [2, 2, 1],
    [0, 3, 2],
    [1, 0, 4],
]
# worked by hand: per-item agreement sums to 6.0 so P_bar = 0.6; column totals
# 16/17/17 of 50 give P_e = 0.3336; kappa = 0.2664 / 0.6664 = 333/833
HAND_KAPPA = 333 / 833


def exact_kappa(table):
    n = sum(table[0])
    items = len(table)
    p_i = [Fraction(sum(c * c for c in row) - n, n * (n - 1)) for row in table]
    p_bar = sum(p_i) / items
    p_j = [Fraction(sum(row[j] for row in table), items * n) for j in range(len(table[0]))]
    p_e = sum(p * p for p in p_j)
    return (p_bar - p_e) / (1 - p_e)


def rec(order, cid="c", rater="r"):
    return RankingRecord(cid, rater, [g if isinstance(g, list) else [g] for g in order])


class TestWTL:
    def test_always_above(self):
        m = pairwise_wtl([rec(["A", "B"], f"c{i}") for i in range(10)])
        assert m["A", "B"] == (1.0, 0.0, 0.0)
        assert m["B", "A"] == (0.0, 0.0, 1.0)

    def test_thirty_seconds(self):
        records = [rec(["A", "B"])] * 18 + [rec([["A", "B"]])] * 2 + [rec(["B", "A"])] * 12
        assert pairwise_wtl(records)["A", "B"] == (0.5625, 0.0625, 0.375)

    def test_fuzz_antisymmetry(self):
        rnd = random.Random(0)
        systems = ["IB", "NM", "SF", "GT", "SOTA"]
        for _ in range(1000):
            records = []
            for i in range(rnd.randint(1, 12)):
                s = systems[:]
                rnd.shuffle(s)
                groups, k = [], 0
                while k < len(s):
                    size = rnd.randint(1, 2)
                    groups.append(s[k : k + size])
                    k += size
                records.append(rec(groups, f"c{i}"))
            m = pairwise_wtl(records)
            for (a, b), (w, t, l) in m.cells.items():
                assert m[b, a] == (l, t, w)
                assert abs(w + t + l - 1.0) <= 1e-9

    def test_inconsistent_systems(self):
        with pytest.raises(ValueError, match="inconsistent system sets"):
            pairwise_wtl([rec(["A", "B"]), rec(["A", "C"])])

    def test_duplicate_system(self):
        with pytest.raises(ValueError):
            rec(["A", "A"])

    def test_load_and_export(self, tmp_path):
        path = write_jsonl(
            tmp_path / "r.jsonl",
            [
                {"context_id": "c0", "rater_id": "x", "ranking": [["A"], ["B", "C"]]},
                {"context_id": "c1", "rater_id": "x", "ranking": ["C", "A", "B"]},
            ],
        )
        m = pairwise_wtl(load_rankings(path))
        assert m["B", "C"] == (0.0, 0.5, 0.5)
        m.write_csv(tmp_path / "w.csv")
        lines = (tmp_path / "w.csv").read_text().splitlines()
        assert lines[0] == "system,opponent,win,tie,loss"
        assert len(lines) == 7
        assert "0.50/0.50/0.00" in m.text_table()

    def test_load_errors(self, tmp_path):
        p = tmp_path / "r.jsonl"
        p.write_text(json.dumps({"context_id": "c0", "ranking": ["A", "A"]}) + "\n")
        with pytest.raises(DataError) as ei:
            load_rankings(p)
        assert ei.value.line == 1


class TestFleiss:
    def test_hand_example(self):
        assert exact_kappa(HAND_TABLE) == Fraction(333, 833)
        assert fleiss_kappa(HAND_TABLE) == pytest.approx(HAND_KAPPA, abs=1e-6)

    def test_perfect_agreement(self):
        assert fleiss_kappa([[5, 0, 0], [0, 5, 0], [0, 0, 5], [5, 0, 0]]) == 1.0
        assert fleiss_kappa([[3, 0], [3, 0]]) == 1.0

    def test_chance_level(self):
        # every item split evenly: P_bar = 1/3 = P_e
        assert fleiss_kappa([[2, 2], [2, 2]]) == pytest.approx(-1 / 3)
        assert fleiss_kappa([[3, 1], [1, 3]]) == pytest.approx(0.0, abs=1e-12)

    def test_relabel_and_permute(self):
        base = fleiss_kappa(HAND_TABLE)
        t = np.array(HAND_TABLE)
        assert fleiss_kappa(t[:, [2, 0, 1]]) == pytest.approx(base, abs=1e-12)
        assert fleiss_kappa(t[::-1]) == pytest.approx(base, abs=1e-12)

    @settings(max_examples=40)
    @given(st.integers(2, 6), st.integers(2, 4), st.integers(1, 12), st.randoms(use_true_random=False))
    def test_matches_exact(self, n, k, items, rnd):
        table = []
        for _ in range(items):
            row = [0] * k
            for _ in range(n):
                row[rnd.randrange(k)] += 1
            table.append(row)
        used = [j for j in range(k) if any(r[j] for r in table)]
        ex = exact_kappa(table) if len(used) > 1 else Fraction(1)
        assert fleiss_kappa(table) == pytest.approx(float(ex), abs=1e-12)

    @pytest.mark.parametrize(
        "table,msg",
        [
            ([[2, 1], [1, 1]], "unequal row sums"),
            ([[3], [3]], "two categories"),
            ([[1, 0], [0, 1]], "two raters"),
            ([[1.5, 0.5]], "integers"),
        ],
    )
    def test_errors(self, table, msg):
        with pytest.raises(ValueError, match=msg):
            fleiss_kappa(table)


class TestFeatureGap:
    def test_single_pair(self, schema):
        p = PreferencePair("c", CandidateRef("w"), CandidateRef("l"), FeatureVector([1, 2, 3, 4, 5, 0, 1]), FeatureVector([0] * 7))
        gap = feature_gap_report([p], schema)
        np.testing.assert_array_equal(gap.winner_mean, [1, 2, 3, 4, 5, 0, 1])
        np.testing.assert_array_equal(gap.loser_mean, [0] * 7)

    def test_linear_latent_direction(self, schema):
        pairs = sample_preferences(LatentRewardSpec.linear(LATENT_WEIGHTS), 940, seed=0)
        gap = feature_gap_report(pairs, schema)
        assert np.all(gap.winner_mean > gap.loser_mean)

    def test_zero_weight_feature_has_no_gap_direction_requirement(self, schema):
        w = (1.0, 0, 0, 0, 0, 0, 0)
        gap = feature_gap_report(sample_preferences(LatentRewardSpec.linear(w), 4000, seed=1), schema)
        assert gap.winner_mean[0] - gap.loser_mean[0] > 1.0
        assert np.all(np.abs(gap.winner_mean[1:] - gap.loser_mean[1:]) < 0.2)

    def test_permutation_invariant(self, schema):
        pairs = sample_preferences(LatentRewardSpec.linear(LATENT_WEIGHTS), 300, seed=2)
        a = feature_gap_report(pairs, schema)
        shuffled = list(pairs)
        random.Random(3).shuffle(shuffled)
        b = feature_gap_report(shuffled, schema)
        assert np.array_equal(a.winner_mean, b.winner_mean) and np.array_equal(a.loser_mean, b.loser_mean)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            feature_gap_report([])

    def test_exports(self, schema, tmp_path):
        gap = feature_gap_report(sample_preferences(LatentRewardSpec.linear(LATENT_WEIGHTS), 10, seed=2), schema)
        gap.write_csv(tmp_path / "g.csv")
        assert (tmp_path / "g.csv").read_text().splitlines()[0] == "feature,winner_mean,loser_mean"
        assert gap.text_table().splitlines()[1].startswith("aspect-coverage")
