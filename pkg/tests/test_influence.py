import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featreward import mlp
from featreward.core_types import FeatureSchema
from featreward.influence import InfluenceConfig, feature_influence

from conftest import linear_reward_net

HALF_QUARTER = (0.5, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0)
GRID = InfluenceConfig(sampling="grid", points_per_axis=3)


class TestLinear:
    def test_grid_exact_shares(self):
        rep = feature_influence(linear_reward_net(HALF_QUARTER), config=GRID)
        np.testing.assert_allclose(rep.normalized, HALF_QUARTER, atol=1e-9)
        assert rep.sample_count == 3**7

    def test_monte_carlo_shares(self):
        rep = feature_influence(linear_reward_net(HALF_QUARTER), config=InfluenceConfig(sample_count=8192))
        np.testing.assert_allclose(rep.normalized, HALF_QUARTER, atol=0.02)

    def test_raw_is_slope_in_raw_units(self):
        rep = feature_influence(linear_reward_net([2.0, 0, 0, 0, 0, 0, -1.0]), config=GRID)
        assert rep.raw[0] == pytest.approx(2.0, rel=1e-9)
        assert rep.raw[6] == pytest.approx(-1.0, rel=1e-9)
        # signed shares keep the sign; absolute values sum to one
        assert rep.normalized[6] == pytest.approx(-1 / 3, rel=1e-9)
        assert math.fsum(np.abs(rep.normalized)) == pytest.approx(1.0, abs=1e-12)

    def test_callable_model(self, schema):
        w = np.array([1, 2, 3, 4, 0, 0, 0], dtype=float)
        rep = feature_influence(lambda x: x @ w, schema, GRID)
        np.testing.assert_allclose(rep.normalized, w / w.sum(), atol=1e-12)

    def test_quadratic_sign_cancels_on_symmetric_grid(self, schema):
        # d/dx (x - 2.5)^2 averages to zero over a grid symmetric about 2.5
        rep = feature_influence(lambda x: (x[:, 0] - 2.5) ** 2 + x[:, 1], schema, GRID)
        assert abs(rep.normalized[0]) < 1e-9
        assert rep.normalized[1] == pytest.approx(1.0, abs=1e-9)


class TestInvariances:
    def test_constant_model_fails(self, schema):
        with pytest.raises(ValueError, match="zero total influence"):
            feature_influence(mlp.zeros((7, 16, 1), "tanh", schema), config=GRID)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.01, 100), st.integers(0, 1000))
    def test_output_scale_invariant(self, c, seed):
        p = mlp.init_params((7, 8, 1), seed=seed, schema=FeatureSchema.default())
        q = p.copy()
        q.weights[-1] *= c
        q.biases[-1] *= c
        cfg = InfluenceConfig(sample_count=256, seed=seed)
        a = feature_influence(p, config=cfg).normalized
        b = feature_influence(q, config=cfg).normalized
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_feature_permutation_equivariant(self, schema):
        w = np.array([0.3, 1.0, 0.1, 0.0, 0.5, 0.2, 0.7])
        perm = np.array([6, 2, 4, 0, 1, 5, 3])
        a = feature_influence(lambda x: x @ w, schema, GRID).normalized
        b = feature_influence(lambda x: x @ w[perm], schema, GRID).normalized
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_monte_carlo_seeds_agree(self):
        p = mlp.init_params((7, 16, 16, 1), seed=4, schema=FeatureSchema.default())
        a = feature_influence(p, config=InfluenceConfig(seed=1)).normalized
        b = feature_influence(p, config=InfluenceConfig(seed=2)).normalized
        assert np.max(np.abs(a - b)) <= 0.02

    def test_threads_do_not_change_result(self):
        p = mlp.init_params((7, 16, 1), seed=9, schema=FeatureSchema.default())
        cfg = InfluenceConfig(sample_count=20000, seed=3)
        a = feature_influence(p, config=cfg, threads=1)
        b = feature_influence(p, config=cfg, threads=4)
        assert np.array_equal(a.raw, b.raw)


class TestConfig:
    @pytest.mark.parametrize("delta", [0.0, -0.1, 2.5, 3.0])
    def test_delta_out_of_range(self, delta):
        with pytest.raises(ValueError, match="delta out of range"):
            feature_influence(linear_reward_net(HALF_QUARTER), config=InfluenceConfig(delta=delta))

    def test_unknown_sampling(self):
        with pytest.raises(ValueError, match="unknown sampling"):
            feature_influence(linear_reward_net(HALF_QUARTER), config=InfluenceConfig(sampling="sobol"))

    def test_csv_and_chart(self, tmp_path):
        rep = feature_influence(linear_reward_net(HALF_QUARTER), config=GRID)
        rep.write_csv(tmp_path / "i.csv")
        lines = (tmp_path / "i.csv").read_text().splitlines()
        assert lines[0] == "feature,raw,normalized"
        assert lines[1].startswith("aspect-coverage,")
        assert len(lines) == 8
        chart = rep.bar_chart(width=20)
        assert chart.splitlines()[0].endswith("#" * 10)
