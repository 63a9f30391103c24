import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from mortenv.analysis import (
    backtest,
    deviance_by_region,
    deviance_reduction,
    edp,
    harvesting_grid,
    model_frame,
    poisson_deviance,
)
from mortenv.boost import BoostParams
from mortenv.exceptions import ValidationError
from mortenv.synth import SyntheticTruth, synth_generate


# --- EDP and deviance -----------------------------------------------------

@pytest.mark.parametrize("d, b, expected", [(110, 100, 0.1), (100, 100, 0.0), (90, 120, -0.25)])
def test_edp_examples(d, b, expected):
    assert edp(d, b) == pytest.approx(expected, abs=1e-15)


def test_edp_rejects_nonpositive_baseline():
    with pytest.raises(ValidationError):
        edp([1.0], [0.0])


def test_poisson_deviance_examples():
    assert poisson_deviance([3.0, 5.0], [3.0, 5.0]) == 0.0
    assert poisson_deviance([0.0], [3.0]) == pytest.approx(6.0, abs=1e-12)
    assert poisson_deviance([2.0], [1.0]) == pytest.approx(2 * (2 * math.log(2) - 1), abs=1e-12)
    with pytest.raises(ValidationError):
        poisson_deviance([1.0], [0.0])
    with pytest.raises(ValidationError):
        poisson_deviance([-1.0], [1.0])


@given(st.lists(st.tuples(st.integers(0, 200), st.floats(0.01, 300)), min_size=1, max_size=30))
def test_poisson_deviance_nonnegative_and_zero_only_at_fit(rows):
    d = np.array([r[0] for r in rows], dtype=float)
    m = np.array([r[1] for r in rows])
    dev = poisson_deviance(d, m)
    assert dev >= -1e-9
    if not np.allclose(d, m, rtol=1e-6, atol=0):
        assert dev > 0


def test_deviance_reduction_examples():
    assert deviance_reduction(200, 100) == 0.5
    assert deviance_reduction(252912.3, 220766.0) == pytest.approx(0.1271, abs=1e-4)
    with pytest.raises(ValidationError):
        deviance_reduction(0.0, 1.0)


def test_deviance_by_region_zero_baseline():
    frame = pd.DataFrame({"region": ["A", "A", "B", "B"], "deaths": [2.0, 3.0, 4.0, 4.0],
                          "b_hat": [2.0, 3.0, 2.0, 2.0]})
    out = deviance_by_region(frame, [2.0, 3.0, 4.0, 4.0]).set_index("region")
    assert out.loc["A", "relative_change"] == 0.0
    assert out.loc["B", "relative_change"] == 1.0
    worse = deviance_by_region(frame, [1.0, 3.0, 4.0, 4.0]).set_index("region")
    assert worse.loc["A", "relative_change"] == -np.inf
    with pytest.raises(ValidationError, match="no rows"):
        deviance_by_region(frame, np.ones(4), regions=["C"])


# --- harvesting grid ------------------------------------------------------

def grouping_oracle(cur, lag, obs_edp, B):
    """Literal cell means with explicit loops over rows and equal intervals."""
    lo, hi = min(min(cur), min(lag)), max(max(cur), max(lag))
    width = (hi - lo) / B
    edges = [lo + i * width for i in range(B)] + [hi]

    def bin_of(x):
        for i in range(B - 1):
            if edges[i] <= x < edges[i + 1]:
                return i
        return B - 1

    cells = {}
    for c, l, e in zip(cur, lag, obs_edp):
        cells.setdefault((bin_of(l), bin_of(c)), []).append(e)
    out = np.full((B, B), np.nan)
    for (i, j), v in cells.items():
        out[i, j] = sum(v) / len(v)
    return out, cells


def random_rows(seed, n=200, quantised=False):
    rng = np.random.default_rng(seed)
    cur = rng.uniform(0, 1, n)
    lag = rng.uniform(0, 1, n)
    if quantised:
        # values on exact multiples of 1/7 as the weekly indices are
        cur, lag = np.round(cur * 7) / 7, np.round(lag * 7) / 7
    X = pd.DataFrame({"x": cur, "x_lag1": lag})
    b = rng.uniform(50, 150, n)
    d = rng.poisson(b).astype(float)
    d_hat = b * np.exp(rng.normal(0, 0.1, n))
    return X, d, b, d_hat


@pytest.mark.parametrize("seed, quantised", [(0, False), (1, True), (2, True)])
def test_harvest_grid_matches_grouping_oracle(seed, quantised):
    X, d, b, d_hat = random_rows(seed, quantised=quantised)
    g = harvesting_grid(X, d, b, d_hat, "x", B=4)
    ref, cells = grouping_oracle(X["x"].tolist(), X["x_lag1"].tolist(), ((d - b) / b).tolist(), 4)
    np.testing.assert_array_equal(np.isnan(g.observed), np.isnan(ref))
    np.testing.assert_allclose(g.observed, ref, rtol=0, atol=1e-15, equal_nan=True)
    counts = np.zeros((4, 4), dtype=int)
    for (i, j), v in cells.items():
        counts[i, j] = len(v)
    np.testing.assert_array_equal(g.counts, counts)
    assert g.counts.sum() == len(X)


@given(st.integers(0, 10_000))
def test_harvest_cell_means_within_cell_range(seed):
    X, d, b, d_hat = random_rows(seed, n=60)
    g = harvesting_grid(X, d, b, d_hat, "x", B=3)
    _, cells = grouping_oracle(X["x"].tolist(), X["x_lag1"].tolist(), ((d - b) / b).tolist(), 3)
    for (i, j), v in cells.items():
        assert min(v) - 1e-12 <= g.observed[i, j] <= max(v) + 1e-12


def test_harvest_estimated_zero_when_model_equals_baseline():
    X, d, b, _ = random_rows(3)
    g = harvesting_grid(X, d, b, b, "x", B=4)
    filled = ~g.missing
    assert np.all(g.estimated[filled] == 0.0)
    assert np.all(np.isnan(g.estimated[g.missing]))


def test_harvest_frame_layout_and_validation():
    X, d, b, d_hat = random_rows(4, n=40)
    fr = harvesting_grid(X, d, b, d_hat, "x", B=2).to_frame()
    assert list(fr.columns) == ["feature", "bin_lag", "bin_cur", "observed", "estimated", "count"]
    assert len(fr) == 4 and fr["count"].sum() == 40
    with pytest.raises(ValidationError, match="not present"):
        harvesting_grid(X, d, b, d_hat, "y")
    with pytest.raises(ValidationError, match="constant"):
        harvesting_grid(pd.DataFrame({"x": np.ones(5), "x_lag1": np.ones(5)}), np.ones(5), np.ones(5),
                        np.ones(5), "x")
    with pytest.raises(ValidationError):
        harvesting_grid(X, d, b, d_hat, "x", B=1)


# --- model frame and backtest ---------------------------------------------

@pytest.fixture(scope="module")
def fixture():
    return synth_generate(SyntheticTruth(n_rows=2, n_cols=2, n_years=3, points_per_region=1, seed=5,
                                         planted={"i_hot": 0.3}))


def test_model_frame_alignment(fixture):
    b_hat = np.arange(len(fixture.panel.data), dtype=float) + 1
    frame = model_frame(fixture.panel, fixture.features, b_hat)
    assert len(frame) == len(fixture.features)
    merged = fixture.panel.data.assign(b_hat=b_hat).merge(frame[["region", "iso_year", "iso_week", "b_hat"]],
                                                          on=["region", "iso_year", "iso_week"])
    assert np.array_equal(merged["b_hat_x"], merged["b_hat_y"])


def test_backtest_provenance_and_rows(fixture):
    res = backtest(fixture.panel, fixture.graph, fixture.daily, 2017,
                   boost_params=BoostParams(eta=0.1, nrounds=30, max_depth=2, min_child_weight=10, seed=0),
                   nrounds_grid=[10, 30], max_depth_grid=[1, 2])
    assert len(res.per_region) == len(fixture.graph.regions)
    assert list(res.per_region.columns) == ["region", "deviance_baseline", "deviance_model", "relative_change"]
    for name, years in res.provenance.items():
        assert 2017 not in years, name
    assert res.provenance["environmental_baselines"] == (2015, 2016)
    assert res.provenance["boosting"] == (2015, 2016)
    assert set(res.series["iso_year"]) == {2017}
    assert len(res.cv_results) == 4


def test_backtest_rejects_leaky_years(fixture):
    with pytest.raises(ValidationError, match="holdout"):
        backtest(fixture.panel, fixture.graph, fixture.daily, 2017, train_years=[2015, 2016, 2017])
    with pytest.raises(ValidationError, match="not in panel"):
        backtest(fixture.panel, fixture.graph, fixture.daily, 2030)
