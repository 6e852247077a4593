import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featreward.core_types import (
    CandidatePool,
    DataError,
    FeatureSchema,
    FeatureSpec,
    FeatureVector,
    Tier,
    dump_jsonl,
    load_candidate_pools,
    load_preference_dataset,
    validate_feature_vector,
)
from featreward.synth_oracle import LatentRewardSpec, gen_candidate_pools, sample_preferences

from conftest import LATENT_WEIGHTS, write_jsonl


def pref_record(i=0, wf=None, lf=None, **extra):
    rec = {
        "context_id": f"c{i}",
        "winner": {"candidate_id": f"c{i}-w", "text": "good battery"},
        "loser": {"candidate_id": f"c{i}-l"},
        "winner_features": wf or [4.0] * 7,
        "loser_features": lf or [2.0] * 7,
    }
    rec.update(extra)
    return rec


def pool_record(i=0, tiers=("GOOD", "SBAD", "VBAD"), per_tier=3):
    cands = []
    for t in tiers:
        for j in range(per_tier):
            cands.append({"candidate_id": f"{t}-{j}", "tier": t, "features": [2.5] * 7, "sft_logprob": -1.0 * j})
    return {"context_id": f"p{i}", "candidates": cands}


class TestSchema:
    def test_default_order(self, schema):
        assert schema.names == (
            "aspect-coverage",
            "opinion-faithfulness",
            "opinion-coverage",
            "conciseness",
            "relevance",
            "hallucination",
            "language-correctness",
        )
        assert all(f.min == 0 and f.max == 5 for f in schema.features)

    @pytest.mark.parametrize(
        "features",
        [
            (FeatureSpec("a"), FeatureSpec("a")),
            (FeatureSpec(""),),
            (FeatureSpec("a", 1.0, 1.0),),
            (FeatureSpec("a", 2.0, 1.0),),
            (),
        ],
    )
    def test_invalid(self, features):
        with pytest.raises(ValueError):
            FeatureSchema(features)

    def test_file_round_trip(self, tmp_path, schema):
        p = tmp_path / "schema.json"
        p.write_text(json.dumps(schema.to_dict()))
        assert FeatureSchema.load(p) == schema
        assert FeatureSchema.load(p).fingerprint() == schema.fingerprint()


class TestValidateFeatureVector:
    def test_in_range_values(self, schema):
        assert validate_feature_vector(FeatureVector([3.6, 3.9, 3.8, 4.0, 4.1, 4.1, 4.6]), schema) == []

    def test_lower_boundary(self, schema):
        assert validate_feature_vector([0] * 7, schema) == []

    def test_exceeds_max(self, schema):
        v = validate_feature_vector([5.1, 3, 3, 3, 3, 3, 3], schema)
        assert len(v) == 1
        assert v[0].index == 0
        assert "exceeds max 5" in v[0].reason

    def test_length_mismatch(self, schema):
        v = validate_feature_vector([1] * 6, schema)
        assert "length mismatch" in str(v[0])

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite(self, schema, bad):
        v = validate_feature_vector([1, 1, bad, 1, 1, 1, 1], schema)
        assert v[0].index == 2 and "non-finite" in v[0].reason

    def test_below_min(self, schema):
        assert validate_feature_vector([1, 1, 1, -0.01, 1, 1, 1], schema)[0].index == 3

    @given(st.lists(st.floats(0, 5), min_size=7, max_size=7))
    def test_anything_in_box_is_valid(self, values):
        assert validate_feature_vector(values, FeatureSchema.default()) == []


class TestPreferenceLoading:
    def test_counts_and_order(self, tmp_path, schema):
        path = write_jsonl(tmp_path / "d.jsonl", [pref_record(i) for i in range(940)])
        pairs = load_preference_dataset(path, schema)
        assert len(pairs) == 940
        assert [p.context_id for p in pairs[:3]] == ["c0", "c1", "c2"]
        assert pairs[0].winner.text == "good battery"
        assert pairs[0].loser.text is None

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.raises(DataError, match="empty dataset"):
            load_preference_dataset(p)

    def test_short_vector_reports_line(self, tmp_path):
        recs = [pref_record(0), pref_record(1, wf=[1.0] * 6)]
        path = write_jsonl(tmp_path / "d.jsonl", recs)
        with pytest.raises(DataError, match="length mismatch") as ei:
            load_preference_dataset(path)
        assert ei.value.line == 2

    def test_parse_failure_reports_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps(pref_record(0)) + "\n{not json\n")
        with pytest.raises(DataError, match="parse failure") as ei:
            load_preference_dataset(p)
        assert ei.value.line == 2

    def test_same_winner_and_loser(self, tmp_path):
        rec = pref_record(0)
        rec["loser"] = rec["winner"]
        with pytest.raises(DataError, match="differ"):
            load_preference_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]))

    def test_out_of_bounds(self, tmp_path):
        rec = pref_record(0, lf=[9.0] * 7)
        with pytest.raises(DataError, match="exceeds max"):
            load_preference_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="file not found"):
            load_preference_dataset(tmp_path / "nope.jsonl")

    def test_round_trip(self, tmp_path, schema):
        pairs = sample_preferences(LatentRewardSpec.linear(LATENT_WEIGHTS, 0.5), 50, seed=3)
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        dump_jsonl(pairs, p1)
        loaded = load_preference_dataset(p1, schema)
        assert loaded == pairs
        dump_jsonl(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loading_is_pure(self, tmp_path):
        path = write_jsonl(tmp_path / "d.jsonl", [pref_record(i) for i in range(5)])
        assert load_preference_dataset(path) == load_preference_dataset(path)


class TestPoolLoading:
    def test_nine_candidates(self, tmp_path, schema):
        pools = load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [pool_record()]), schema)
        assert len(pools[0].candidates) == 9
        assert sorted(c.tier.value for c in pools[0].candidates) == ["GOOD"] * 3 + ["SBAD"] * 3 + ["VBAD"] * 3

    def test_too_small(self, tmp_path):
        with pytest.raises(DataError, match="pool too small"):
            load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [pool_record(tiers=("GOOD",), per_tier=1)]))

    def test_tier_case_insensitive(self, tmp_path):
        rec = pool_record()
        rec["candidates"][0]["tier"] = "good"
        rec["candidates"][3]["tier"] = "sBad"
        pool = load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [rec]))[0]
        assert pool.candidates[0].tier is Tier.GOOD
        assert pool.candidates[3].tier is Tier.SBAD

    def test_unknown_tier(self, tmp_path):
        rec = pool_record()
        rec["candidates"][0]["tier"] = "MEDIOCRE"
        with pytest.raises(DataError, match="unknown tier"):
            load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [rec]))

    def test_duplicate_ids(self, tmp_path):
        rec = pool_record()
        rec["candidates"][1]["candidate_id"] = rec["candidates"][0]["candidate_id"]
        with pytest.raises(DataError, match="duplicate candidate_id"):
            load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [rec]))

    def test_reference_distribution_is_softmax(self, tmp_path):
        pool = load_candidate_pools(write_jsonl(tmp_path / "p.jsonl", [pool_record()]))[0]
        q = pool.reference_distribution()
        assert q.sum() == pytest.approx(1.0, abs=1e-12)
        # logprobs 0, -1, -2 repeat per tier
        assert q[0] / q[1] == pytest.approx(2.718281828459045)

    def test_round_trip(self, tmp_path, schema):
        pools = gen_candidate_pools(LatentRewardSpec.linear(LATENT_WEIGHTS), 4, 3, seed=1)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dump_jsonl(pools, p1)
        loaded = load_candidate_pools(p1, schema)
        assert loaded == pools
        dump_jsonl(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_vectors_validate(self, tmp_path, schema):
        pools = gen_candidate_pools(LatentRewardSpec.linear(LATENT_WEIGHTS), 3, 2, seed=2)
        dump_jsonl(pools, tmp_path / "p.jsonl")
        for pool in load_candidate_pools(tmp_path / "p.jsonl", schema):
            for c in pool.candidates:
                assert validate_feature_vector(c.features, schema) == []

    def test_pool_invariants_direct(self):
        from featreward.core_types import Candidate

        c = Candidate("x", Tier.GOOD, FeatureVector([1] * 7))
        with pytest.raises(ValueError):
            CandidatePool("p", (c,))
        with pytest.raises(ValueError):
            CandidatePool("p", (c, c))


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.lists(st.floats(0, 5), min_size=7, max_size=7), st.lists(st.floats(0, 5), min_size=7, max_size=7)),
        min_size=1,
        max_size=8,
    )
)
def test_preference_round_trip_property(tmp_path_factory, rows):
    recs = [pref_record(i, wf=w, lf=l) for i, (w, l) in enumerate(rows)]
    d = tmp_path_factory.mktemp("rt")
    pairs = load_preference_dataset(write_jsonl(d / "a.jsonl", recs))
    dump_jsonl(pairs, d / "b.jsonl")
    assert load_preference_dataset(d / "b.jsonl") == pairs
