import math
import warnings
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from mortenv.boost import PoissonBoostRegressor
from mortenv.exceptions import ValidationError
from mortenv.interpret import (
    ale_edges,
    ale_interaction,
    ale_main,
    ale_regional,
    bootstrap_ci,
    feature_importance,
)


# --- literal oracles ------------------------------------------------------

def oracle_edges(v, K):
    """Inverse-ECDF quantiles at k/K with duplicates removed."""
    s = sorted(v)
    n = len(s)
    out = []
    for k in range(K + 1):
        p = Fraction(k, K)
        i = max(math.ceil(p * n), 1) - 1
        if not out or s[i] > out[-1]:
            out.append(s[i])
    return out


def oracle_bin(x, z):
    for k in range(1, len(z)):
        if x <= z[k]:
            return k
    return len(z) - 1


def oracle_ale_main(f, X, l, K):
    z = oracle_edges(X[:, l], K)
    nb = len(z) - 1
    sums = [0.0] * (nb + 1)
    cnt = [0] * (nb + 1)
    for row in X:
        k = oracle_bin(row[l], z)
        hi, lo = row.copy(), row.copy()
        hi[l], lo[l] = z[k], z[k - 1]
        sums[k] += f(hi[None, :])[0] - f(lo[None, :])[0]
        cnt[k] += 1

    def tilde(x):
        return sum(sums[k] / cnt[k] for k in range(1, oracle_bin(x, z) + 1) if cnt[k])

    c = sum(tilde(row[l]) for row in X) / len(X)
    effect = [0.0 - c] + [sum(sums[j] / cnt[j] for j in range(1, k + 1) if cnt[j]) - c for k in range(1, nb + 1)]
    return np.array(z), np.array(effect), c, tilde


def oracle_ale_pair(f, X, a, b, K):
    za, zb = oracle_edges(X[:, a], K), oracle_edges(X[:, b], K)
    na, nb = len(za) - 1, len(zb) - 1
    sums = np.zeros((na + 1, nb + 1))
    cnt = np.zeros((na + 1, nb + 1), dtype=int)

    def at(row, va, vb):
        r = row.copy()
        r[a], r[b] = va, vb
        return f(r[None, :])[0]

    for row in X:
        i, j = oracle_bin(row[a], za), oracle_bin(row[b], zb)
        sums[i, j] += (at(row, za[i], zb[j]) - at(row, za[i - 1], zb[j])
                       - at(row, za[i], zb[j - 1]) + at(row, za[i - 1], zb[j - 1]))
        cnt[i, j] += 1
    acc = np.zeros((na + 1, nb + 1))
    for i in range(1, na + 1):
        for j in range(1, nb + 1):
            acc[i, j] = sum(sums[p, q] / cnt[p, q] for p in range(1, i + 1) for q in range(1, j + 1) if cnt[p, q])
    c = sum(acc[oracle_bin(row[a], za), oracle_bin(row[b], zb)] for row in X) / len(X)
    return acc[1:, 1:] - c, cnt[1:, 1:]


def hand_predictor(X):
    X = np.asarray(X, dtype=float)
    return np.exp(0.3 * np.sin(X[:, 0]) + 0.2 * X[:, 0] * X[:, 1] - 0.1 * X[:, 2] ** 2)


@pytest.fixture
def rows50():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    X[:5, 0] = X[5, 0]  # duplicated values exercise merged quantile edges
    return X


# --- importance -----------------------------------------------------------

def _hand_model(trees, schema=("A", "B")):
    base = PoissonBoostRegressor(nrounds=1).fit(np.zeros((2, len(schema))), [1.0, 1.0], [1.0, 1.0]).to_dict()
    return PoissonBoostRegressor.from_dict({**base, "schema": list(schema), "trees": trees})


def _split(feature, gain):
    return {"feature": feature, "threshold": 0.0, "gain": gain, "left": {"leaf": -0.1}, "right": {"leaf": 0.1}}


def test_importance_hand_bookkeeping():
    rep = feature_importance(_hand_model([_split(0, 3.0), _split(1, 1.0)]))
    assert rep == pytest.approx({"A": 0.75, "B": 0.25}, abs=1e-15)
    single = feature_importance(_hand_model([_split(0, 2.0)]))
    assert single["A"] == 1.0 and single["B"] == 0.0
    assert single.top(1) == ["A"]


def test_importance_zero_gain_warns():
    with pytest.warns(RuntimeWarning):
        rep = feature_importance(_hand_model([{"leaf": 0.3}]))
    assert rep == {"A": 0.0, "B": 0.0}


def test_importance_sums_to_one_and_column_permutation():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4))
    b = np.full(300, 20.0)
    d = rng.poisson(b * np.exp(0.5 * np.tanh(X[:, 0]) + 0.2 * X[:, 2])).astype(float)
    names = ["a", "b", "c", "e"]
    kw = dict(nrounds=15, eta=0.3, max_depth=2, subsample=1.0, colsample_bytree=1.0, min_child_weight=2.0)
    m1 = PoissonBoostRegressor(**kw).fit(pd.DataFrame(X, columns=names), d, b)
    perm = [2, 0, 3, 1]
    m2 = PoissonBoostRegressor(**kw).fit(pd.DataFrame(X[:, perm], columns=[names[i] for i in perm]), d, b)
    r1, r2 = feature_importance(m1), feature_importance(m2)
    assert sum(r1.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(0 <= v <= 1 for v in r1.values())
    for k in names:
        assert r1[k] == pytest.approx(r2[k], rel=1e-9, abs=1e-12)


# --- ALE main -------------------------------------------------------------

def test_edges_match_oracle(rows50):
    for K in (1, 3, 7, 40):
        assert ale_edges(rows50[:, 0], K).tolist() == oracle_edges(rows50[:, 0], K)
    with pytest.raises(ValidationError):
        ale_edges(np.ones(10), 5)


@pytest.mark.parametrize("l, K", [(0, 5), (1, 10), (2, 40), (0, 1)])
def test_ale_main_matches_literal_oracle(rows50, l, K):
    curve = ale_main(hand_predictor, rows50, l, K=K)
    z, effect, _, _ = oracle_ale_main(hand_predictor, rows50, l, K)
    assert np.array_equal(curve.edges, z)
    assert np.allclose(curve.effect, effect, rtol=0, atol=1e-10)


def test_ale_main_thirty_rows_oracle():
    X = np.random.default_rng(8).uniform(-2, 2, size=(30, 3))
    z, effect, c, tilde = oracle_ale_main(hand_predictor, X, 1, 5)
    curve = ale_main(hand_predictor, X, 1, K=5)
    assert np.allclose(curve.effect, effect, atol=1e-10)
    for x in X[:, 1]:
        assert curve(x) == pytest.approx(tilde(x) - c, abs=1e-10)


def test_ale_linear_predictor_has_unit_slope():
    X = np.random.default_rng(1).normal(size=(20, 2))
    curve = ale_main(lambda Z: np.asarray(Z)[:, 0], X, 0, K=10)
    assert np.allclose(np.diff(curve.effect), np.diff(curve.edges), atol=1e-12)
    # centring: the data-weighted mean of the step function is zero
    assert abs(np.mean(curve(X[:, 0]))) < 1e-12


def test_ale_constant_predictor_is_zero(rows50):
    curve = ale_main(lambda Z: np.full(len(Z), 2.0), rows50, 0, K=8)
    assert np.all(curve.effect == 0)


@given(st.integers(0, 10_000), st.integers(1, 30))
def test_ale_centring(seed, K):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    curve = ale_main(hand_predictor, X, seed % 3, K=K)
    assert abs(np.sum(curve(X[:, seed % 3]))) < 1e-8
    assert curve.counts.sum() == 40


def test_ale_remap_invariance(rows50):
    def T(v):
        return np.exp(v) + 2 * v

    X2 = rows50.copy()
    X2[:, 1] = T(rows50[:, 1])
    # edges are observed values, so the inverse map is exact on every evaluation point
    inverse = dict(zip(X2[:, 1].tolist(), rows50[:, 1].tolist()))

    def composed(Z):
        Z = np.asarray(Z, dtype=float).copy()
        Z[:, 1] = [inverse[v] for v in Z[:, 1]]
        return hand_predictor(Z)

    a = ale_main(hand_predictor, rows50, 1, K=10)
    b = ale_main(composed, X2, 1, K=10)
    assert np.allclose(b.edges, T(a.edges), rtol=1e-14)
    assert np.allclose(b.effect, a.effect, atol=1e-10)


def test_ale_below_minimum_and_frames(rows50):
    curve = ale_main(hand_predictor, pd.DataFrame(rows50, columns=["p", "q", "r"]), "q", K=6)
    assert curve.feature == "q"
    assert curve(curve.edges[0] - 5) == curve.effect[0]
    frame = curve.to_frame()
    assert list(frame.columns) == ["feature", "edge", "effect", "count"]
    assert frame["count"].sum() == 50 and frame["count"].iloc[0] == 0


def test_ale_with_boosting_model_uses_multiplier(rows50):
    b = np.full(50, 10.0)
    d = np.random.default_rng(0).poisson(b).astype(float)
    m = PoissonBoostRegressor(nrounds=5, eta=0.5, max_depth=2, min_child_weight=1.0).fit(rows50, d, b)
    c1 = ale_main(m, rows50, 0, K=5)
    c2 = ale_main(m.predict_multiplier, rows50, 0, K=5)
    c3 = ale_main(m, rows50, 0, K=5, log_scale=True)
    c4 = ale_main(m.decision_function, rows50, 0, K=5)
    assert np.array_equal(c1.effect, c2.effect) and np.array_equal(c3.effect, c4.effect)


# --- ALE interaction ------------------------------------------------------

@pytest.mark.parametrize("K", [3, 5, 20])
def test_ale_interaction_matches_literal_oracle(rows50, K):
    s = ale_interaction(hand_predictor, rows50, 0, 1, K=K)
    effect, cnt = oracle_ale_pair(hand_predictor, rows50, 0, 1, K)
    assert np.array_equal(s.counts, cnt)
    assert np.allclose(s.effect, effect, rtol=0, atol=1e-10)


def test_ale_interaction_product_oracle(rows50):
    def prod(Z):
        return np.asarray(Z)[:, 0] * np.asarray(Z)[:, 2]

    s = ale_interaction(prod, rows50, 0, 2, K=6)
    effect, _ = oracle_ale_pair(prod, rows50, 0, 2, 6)
    assert np.allclose(s.effect, effect, atol=1e-10)


def test_additive_predictor_has_zero_interaction(rows50):
    def additive(Z):
        Z = np.asarray(Z)
        return np.sin(Z[:, 0]) + Z[:, 1] ** 3 + np.exp(Z[:, 2])

    s = ale_interaction(additive, rows50, 0, 1, K=8)
    assert np.all(np.abs(s.effect) < 1e-10)


def test_interaction_invariant_to_additive_terms(rows50):
    def plus(Z):
        Z = np.asarray(Z)
        return hand_predictor(Z) + 3 * np.cos(Z[:, 0]) - Z[:, 1] ** 2

    a = ale_interaction(hand_predictor, rows50, 0, 1, K=7)
    b = ale_interaction(plus, rows50, 0, 1, K=7)
    assert np.allclose(a.effect, b.effect, atol=1e-10)


def test_empty_cells_masked():
    x = np.arange(20, dtype=float)
    X = np.column_stack([x, x, np.zeros(20)])  # perfectly correlated: off-diagonal cells empty
    s = ale_interaction(hand_predictor, X, 0, 1, K=4)
    assert s.missing.sum() == 12
    assert np.all(np.isnan(s.masked()[s.missing]))
    assert not np.any(np.isnan(s.masked()[~s.missing]))
    frame = s.to_frame()
    assert list(frame.columns) == ["f1", "f2", "e1", "e2", "effect", "missing"]
    assert frame["missing"].sum() == 12
    with pytest.raises(ValidationError):
        ale_interaction(hand_predictor, X, 0, 0)


# --- regional ALE ---------------------------------------------------------

def test_regional_identity_for_single_region(rows50):
    regions = np.array(["A"] * 50)
    full = ale_main(hand_predictor, rows50, 0, K=10)
    for v in (-1.0, 0.0, 0.7):
        assert ale_regional(hand_predictor, rows50, regions, "A", 0, v, K=10) == full(v)
    assert ale_regional(hand_predictor, rows50, regions, "A", 0, -100.0, K=10) == full.effect[0]
    with pytest.raises(ValidationError):
        ale_regional(hand_predictor, rows50, regions, "B", 0, 0.0)


def test_regional_curves_follow_latitude():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.normal(size=80), np.repeat([40.0, 60.0], 40)])
    regions = np.repeat(["south", "north"], 40)

    def f(Z):
        Z = np.asarray(Z)
        return np.exp(Z[:, 0] * (70 - Z[:, 1]) / 20)

    vals = {}
    for r in ("south", "north"):
        sub = X[regions == r]
        _, effect, c, tilde = oracle_ale_main(f, sub, 0, 10)
        got = ale_regional(f, X, regions, r, 0, 1.0, K=10)
        assert got == pytest.approx(tilde(1.0) - c, abs=1e-10)
        vals[r] = got
    assert vals["south"] > vals["north"]


# --- bootstrap ------------------------------------------------------------

def test_bootstrap_constant_and_deterministic():
    rows = np.random.default_rng(0).normal(size=30)
    res = bootstrap_ci(lambda s: 3.0, rows, B=20, seed=1)
    assert res.lo[0] == res.hi[0] == 3.0
    a = bootstrap_ci(np.mean, rows, B=50, seed=7)
    b = bootstrap_ci(np.mean, rows, B=50, seed=7)
    assert np.array_equal(a.lo, b.lo) and np.array_equal(a.replicates, b.replicates)


def test_bootstrap_replicate_rng_rule():
    rows = np.arange(10.0)
    res = bootstrap_ci(lambda s: s, rows, B=3, seed=5)
    for b in range(3):
        idx = np.random.default_rng([5, b]).integers(0, 10, size=10)
        assert np.array_equal(res.replicates[b], rows[idx])


def test_bootstrap_parallel_matches_serial():
    rows = np.random.default_rng(2).normal(size=40)
    a = bootstrap_ci(np.median, rows, B=30, seed=3)
    b = bootstrap_ci(np.median, rows, B=30, seed=3, n_jobs=2)
    assert np.array_equal(a.replicates, b.replicates)


def test_bootstrap_frames_and_series():
    rows = pd.DataFrame({"x": np.arange(20.0), "y": np.arange(20.0) ** 2})
    res = bootstrap_ci(lambda s: s.mean(), rows, B=40, level=0.9)
    assert res.index == ["x", "y"]
    frame = res.to_frame()
    assert list(frame.index) == ["x", "y"] and np.all(frame["lo"] <= frame["hi"])
    ref = np.quantile(res.replicates, [0.05, 0.95], axis=0)
    assert np.array_equal(res.lo, ref[0]) and np.array_equal(res.hi, ref[1])


def test_bootstrap_failure_accounting():
    rows = np.arange(50.0)
    calls = {"n": 0}

    def flaky(s):
        calls["n"] += 1
        if calls["n"] % 20 == 0:
            raise ArithmeticError("boom")
        return s.mean()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = bootstrap_ci(flaky, rows, B=40)
    assert res.n_failed == 2 and len(res.replicates) == 38

    def bad(s):
        raise ValueError("always")

    with pytest.raises(ValidationError, match="40 of 40"):
        bootstrap_ci(bad, rows, B=40)


def test_bootstrap_validation():
    with pytest.raises(ValidationError):
        bootstrap_ci(np.mean, np.arange(5.0), B=1)
    with pytest.raises(ValidationError):
        bootstrap_ci(np.mean, np.arange(5.0), level=1.0)


def test_bootstrap_coverage_of_mean():
    rng = np.random.default_rng(2024)
    hits = 0
    for rep in range(200):
        rows = rng.normal(size=100)
        res = bootstrap_ci(np.mean, rows, B=500, seed=rep)
        hits += res.lo[0] <= 0.0 <= res.hi[0]
    assert 0.90 <= hits / 200 <= 0.99
