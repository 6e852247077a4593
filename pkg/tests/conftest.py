import json

import numpy as np
import pytest

from featreward import mlp
from featreward.core_types import FeatureSchema
from featreward.synth_oracle import LatentRewardSpec

LATENT_WEIGHTS = (1.0, 0.8, 0.4, 0.2, 0.4, 1.0, 0.2)


@pytest.fixture
def schema():
    return FeatureSchema.default()


@pytest.fixture
def linear_latent():
    return LatentRewardSpec.linear(LATENT_WEIGHTS)


def linear_reward_net(raw_weights, schema=None, bias=0.0):
    """A 7->1 net equal to sum_i w_i * x_i on raw feature values."""
    schema = schema or FeatureSchema.default()
    p = mlp.zeros((len(schema), 1), "tanh", schema)
    # normalized input is (x - lo) / (hi - lo); undo the scale and the offset
    span = schema.highs - schema.lows
    w = np.asarray(raw_weights, dtype=float)
    p.weights[0][0] = w * span
    p.biases[0][0] = bias + float(w @ schema.lows)
    return p


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
