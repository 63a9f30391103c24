import numpy as np
import pytest

from mortenv.baseline import design_matrix
from mortenv.exceptions import ValidationError
from mortenv.panel import AVG_WEEKS_PER_YEAR
from mortenv.synth import SyntheticTruth, synth_generate, write_fixture


def serfling_mean(data):
    """Exposure times the Serfling intensity, recomputed from the truth."""
    df = data.panel.data
    Z = design_matrix(df["iso_year"].to_numpy() - data.truth.first_year, df["iso_week"].to_numpy(),
                      AVG_WEEKS_PER_YEAR)
    B = np.array([data.beta[r] for r in df["region"]])
    return df["exposure"].to_numpy() * np.exp(np.einsum("ij,ij->i", Z, B))


def test_null_model_is_pure_serfling():
    data = synth_generate(SyntheticTruth(n_rows=1, n_cols=2, n_years=2, planted={}, seed=4, points_per_region=1))
    assert np.all(data.multipliers["phi_true"] == 1.0)
    mu0 = serfling_mean(data)
    np.testing.assert_allclose(data.multipliers["baseline_mean"], mu0, rtol=1e-12)
    zero = synth_generate(SyntheticTruth(n_rows=1, n_cols=2, n_years=2, planted={"i_hot": 0.0}, seed=4,
                                         points_per_region=1))
    assert np.array_equal(zero.panel.data["deaths"], data.panel.data["deaths"])


def test_planted_multiplier_matches_features():
    data = synth_generate(SyntheticTruth(n_rows=1, n_cols=2, n_years=2, seed=2, points_per_region=1,
                                         planted={"i_hot": 0.3, "tmax_anom_lag1": -0.05}))
    m = data.multipliers.set_index(["region", "iso_year", "iso_week"])
    X = data.features
    expected = np.exp(0.3 * X["i_hot"] - 0.05 * X["tmax_anom_lag1"])
    np.testing.assert_allclose(m.loc[X.index, "phi_true"], expected, rtol=1e-12)


def test_same_seed_same_bytes(tmp_path):
    truth = dict(n_rows=1, n_cols=2, n_years=2, seed=9, points_per_region=1)
    a = write_fixture(synth_generate(SyntheticTruth(**truth)), tmp_path / "a")
    b = write_fixture(synth_generate(SyntheticTruth(**truth)), tmp_path / "b")
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes(), k
    c = write_fixture(synth_generate(SyntheticTruth(**{**truth, "seed": 10})), tmp_path / "c")
    assert c["deaths"].read_bytes() != a["deaths"].read_bytes()


def test_monte_carlo_mean_of_standardised_deaths():
    ratios = []
    for seed in range(8):
        data = synth_generate(SyntheticTruth(seed=seed))
        m = data.multipliers
        ratios.append(data.panel.data["deaths"].to_numpy() / (serfling_mean(data) * m["phi_true"].to_numpy()))
    r = np.concatenate(ratios)
    assert r.size >= 10_000
    assert 0.98 <= r.mean() <= 1.02


def test_truth_validation():
    with pytest.raises(ValidationError, match="unknown planted"):
        SyntheticTruth(planted={"nope": 1.0})
    with pytest.raises(ValidationError):
        SyntheticTruth(n_rows=0)
    assert SyntheticTruth(n_rows=2, n_cols=2).regions == ["R00", "R01", "R10", "R11"]
