import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgru.metrics import MetricError, compute_metrics


def test_scalar_oracle():
    r = compute_metrics([2.0, 4.0], [1.0, 6.0])
    assert r.mae == pytest.approx((1 + 2) / 2, abs=1e-12)
    assert r.rmse == pytest.approx(math.sqrt((1 + 4) / 2), abs=1e-12)
    assert r.mape == pytest.approx(100 * (1 / 1 + 2 / 6) / 2, abs=1e-9)
    assert (r.n_evaluated, r.n_masked) == (2, 0)


def test_perfect_prediction():
    y = np.random.default_rng(0).uniform(1, 100, size=(5, 12, 3, 1))
    r = compute_metrics(y, y)
    assert (r.mae, r.rmse, r.mape) == (0.0, 0.0, 0.0)


def test_zero_target_masked_from_mape_only():
    r = compute_metrics([1.0, 3.0], [0.0, 2.0], mape_threshold=1e-3)
    assert r.n_masked == 1 and r.n_evaluated == 1
    assert r.mae == 1.0
    assert r.mape == pytest.approx(50.0)


def test_all_masked_is_error():
    with pytest.raises(MetricError, match="MAPE undefined"):
        compute_metrics([1.0], [0.0])


def test_shape_mismatch():
    with pytest.raises(MetricError):
        compute_metrics([1.0, 2.0], [1.0])


def test_per_horizon_uses_leading_steps():
    pred = np.zeros((2, 12, 3, 1))
    target = np.zeros((2, 12, 3, 1)) + 1.0
    target[:, 3:] = 5.0
    r = compute_metrics(pred, target, horizons=(3, 12))
    assert r.per_horizon_mae[3] == 1.0
    assert r.per_horizon_mae[12] == pytest.approx((3 * 1 + 9 * 5) / 12)


def test_report_serialization():
    r = compute_metrics([2.0, 4.0], [1.0, 6.0], horizons=())
    d = json.loads(r.to_json())
    assert d["mae"] == 1.5
    assert r.csv_row().count(",") == r.csv_header().count(",")


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=1000, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.integers(0, 2**32 - 1))
def test_rmse_at_least_mae(pred, seed):
    target = np.random.default_rng(seed).uniform(1, 500, size=pred.shape)
    r = compute_metrics(pred, target)
    assert r.rmse >= r.mae - 1e-12 * max(1.0, r.mae)
    assert r.mae >= 0 and r.mape >= 0
    assert r.n_evaluated + r.n_masked == pred.size


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_permutation_and_scale(seed, c):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=40), rng.uniform(1, 50, size=40)
    base = compute_metrics(pred, target)
    perm = rng.permutation(40)
    shuffled = compute_metrics(pred[perm], target[perm])
    assert shuffled.mae == pytest.approx(base.mae, rel=1e-12)
    assert shuffled.rmse == pytest.approx(base.rmse, rel=1e-12)
    assert shuffled.mape == pytest.approx(base.mape, rel=1e-12)
    scaled = compute_metrics(c * pred, c * target)
    assert scaled.mae == pytest.approx(c * base.mae, rel=1e-12)
    assert scaled.rmse == pytest.approx(c * base.rmse, rel=1e-12)
    assert scaled.mape == pytest.approx(base.mape, rel=1e-12)


def test_reference_magnitudes_are_percent_scale():
    # published full-scale magnitudes put MAPE in percent (10.22), not a fraction
    y = np.full(10, 100.0)
    assert compute_metrics(y * 1.1022, y).mape == pytest.approx(10.22)
