"""Excess-death grids, deviance comparisons and the one-year backtest."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .baseline import SpatialSerflingBaseline
from .boost import BoostParams, TUNED_PARAMS, PoissonBoostRegressor, cross_validate
from .exceptions import ValidationError
from .features import EnvironmentalFeatureBuilder
from .panel import RegionGraph, WeeklyPanel

logger = logging.getLogger(__name__)

__all__ = [
    "EdpGrid",
    "BacktestResult",
    "edp",
    "harvesting_grid",
    "poisson_deviance",
    "deviance_reduction",
    "model_frame",
    "deviance_by_region",
    "backtest",
]

_KEYS = ["region", "iso_year", "iso_week"]


def edp(d, b_hat):
    """Excess-death proportion ``(d - b_hat) / b_hat``."""
    d = np.asarray(d, dtype=float)
    b = np.asarray(b_hat, dtype=float)
    if np.any(b <= 0):
        raise ValidationError("baseline deaths must be positive")
    out = (d - b) / b
    return out.item() if out.ndim == 0 else out


def poisson_deviance(d, d_hat) -> float:
    """Poisson deviance ``2 sum(d log(d / d_hat) - (d - d_hat))``, ``0 log 0 = 0``."""
    d = np.asarray(d, dtype=float)
    m = np.asarray(d_hat, dtype=float)
    if np.any(m <= 0):
        raise ValidationError("fitted means must be positive")
    if np.any(d < 0):
        raise ValidationError("counts must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, d * np.log(d / m), 0.0)
    return float(2.0 * np.sum(t - (d - m)))


def deviance_reduction(dev_baseline, dev_model) -> float:
    """Relative deviance change; positive when the model improves on the baseline."""
    if dev_baseline <= 0:
        raise ValidationError("baseline deviance must be positive")
    return float((dev_baseline - dev_model) / dev_baseline)


@dataclass
class EdpGrid:
    """Cell means of observed and estimated EDP on a (lag, current) grid.

    Rows index the bins of the lagged feature, columns those of the current
    one.  Empty cells hold NaN.
    """

    feature: str
    lag_feature: str
    edges: np.ndarray
    observed: np.ndarray
    estimated: np.ndarray
    counts: np.ndarray

    @property
    def missing(self):
        return self.counts == 0

    def to_frame(self):
        B = len(self.edges) - 1
        i, j = np.meshgrid(np.arange(B), np.arange(B), indexing="ij")
        return pd.DataFrame({
            "feature": self.feature,
            "bin_lag": i.ravel(),
            "bin_cur": j.ravel(),
            "observed": self.observed.ravel(),
            "estimated": self.estimated.ravel(),
            "count": self.counts.ravel(),
        })


def _equal_bins(x, edges):
    B = len(edges) - 1
    # intervals [a_i, a_{i+1}) except the last, which is closed
    return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, B - 1)


def harvesting_grid(features, deaths, b_hat, d_hat, feature, lag_feature=None, B=4) -> EdpGrid:
    """Observed and estimated EDP averaged over equal-width feature bins.

    Parameters
    ----------
    features : DataFrame
        Must hold ``feature`` and its lag (``<feature>_lag1`` by default).
    deaths, b_hat, d_hat : array-like
        Observed, baseline and model-estimated deaths per row.
    B : int
        Bins per axis over the range of the current and lagged values.
    """
    if int(B) != B or B < 2:
        raise ValidationError("B must be an integer >= 2")
    lag_feature = lag_feature or f"{feature}_lag1"
    for c in (feature, lag_feature):
        if c not in features.columns:
            raise ValidationError(f"feature {c!r} not present")
    cur = features[feature].to_numpy(dtype=float)
    lag = features[lag_feature].to_numpy(dtype=float)
    ok = np.isfinite(cur) & np.isfinite(lag)
    if not ok.any():
        raise ValidationError("no rows with both current and lagged values")
    cur, lag = cur[ok], lag[ok]
    obs = edp(np.asarray(deaths, dtype=float)[ok], np.asarray(b_hat, dtype=float)[ok])
    est = edp(np.asarray(d_hat, dtype=float)[ok], np.asarray(b_hat, dtype=float)[ok])
    lo = min(cur.min(), lag.min())
    hi = max(cur.max(), lag.max())
    if not hi > lo:
        raise ValidationError(f"feature {feature!r} is constant")
    edges = np.linspace(lo, hi, int(B) + 1)
    cell = _equal_bins(lag, edges) * int(B) + _equal_bins(cur, edges)
    size = int(B) * int(B)
    counts = np.bincount(cell, minlength=size)

    def cell_mean(v):
        s = np.bincount(cell, weights=v, minlength=size)
        out = np.full(size, np.nan)
        np.divide(s, counts, out=out, where=counts > 0)
        return out.reshape(int(B), int(B))

    return EdpGrid(feature, lag_feature, edges, cell_mean(obs), cell_mean(est),
                   counts.reshape(int(B), int(B)))


def model_frame(panel: WeeklyPanel, features: pd.DataFrame, b_hat) -> pd.DataFrame:
    """Join panel rows, baseline predictions and features on region-week.

    Rows without features (for instance the first week, which has no lag)
    are dropped.  The result keeps the panel order.
    """
    df = panel.data[_KEYS + ["deaths", "exposure"]].copy()
    df["b_hat"] = np.asarray(b_hat, dtype=float)
    feats = features.reset_index()
    missing = [k for k in _KEYS if k not in feats.columns]
    if missing:
        raise ValidationError(f"features lack index levels {missing}")
    out = df.merge(feats, on=_KEYS, how="inner", validate="one_to_one", sort=False)
    out = out.set_flags(allows_duplicate_labels=True)
    if out.empty:
        raise ValidationError("no region-weeks shared by panel and features")
    return out


def deviance_by_region(frame, d_hat, regions=None):
    """Baseline and model deviance per region with the relative change.

    A region whose baseline deviance is zero gets a change of 0 when the
    model matches it and ``-inf`` otherwise.
    """
    d_hat = np.asarray(d_hat, dtype=float)
    rows = []
    for r in regions if regions is not None else sorted(frame["region"].unique()):
        m = (frame["region"] == r).to_numpy()
        if not m.any():
            raise ValidationError(f"region {r} has no rows")
        db = poisson_deviance(frame["deaths"].to_numpy()[m], frame["b_hat"].to_numpy()[m])
        dm = poisson_deviance(frame["deaths"].to_numpy()[m], d_hat[m])
        if db > 0:
            change = deviance_reduction(db, dm)
        else:
            # a perfect baseline can only be matched, never improved on
            change = 0.0 if dm == 0 else -np.inf
        rows.append({"region": r, "deviance_baseline": db, "deviance_model": dm,
                     "relative_change": change})
    return pd.DataFrame(rows)


@dataclass
class BacktestResult:
    """Holdout-year comparison of baseline and boosted model."""

    holdout_year: int
    per_region: pd.DataFrame
    series: pd.DataFrame
    best_params: BoostParams
    cv_results: pd.DataFrame
    provenance: dict = field(default_factory=dict)


def _check_provenance(provenance, holdout_year):
    for name, years in provenance.items():
        if holdout_year in set(years):
            raise ValidationError(f"holdout year {holdout_year} leaked into {name}")


def backtest(panel: WeeklyPanel, graph: RegionGraph, daily, holdout_year, lambdas=None,
             boost_params: BoostParams = TUNED_PARAMS, nrounds_grid=None, max_depth_grid=None,
             train_years=None, builder_params=None, n_jobs=1) -> BacktestResult:
    """Refit everything on the training years and score the holdout year.

    The baseline reuses the given smoothing parameters, anomaly baselines
    and thresholds are estimated on training days only, and boosting is
    retuned over ``nrounds`` and ``max_depth`` with the other parameters
    taken from ``boost_params``.  Holdout features may use lagged weather
    from the end of the last training year.

    Parameters
    ----------
    panel : WeeklyPanel
    graph : RegionGraph
    daily : mapping of str to DataFrame
        Daily regional series for all years.
    holdout_year : int
    lambdas : sequence of 6 floats, optional
        Smoothing parameters for the baseline; when absent they are
        selected by UBRE on the training years.
    nrounds_grid, max_depth_grid : sequence of int, optional
        Tuning grids; default to the single value in ``boost_params``.
    train_years : sequence of int, optional
        Defaults to all panel years except the holdout.
    """
    holdout_year = int(holdout_year)
    years = panel.years
    if holdout_year not in years:
        raise ValidationError(f"holdout year {holdout_year} not in panel")
    if train_years is None:
        train_years = [y for y in years if y != holdout_year]
    train_years = sorted(int(y) for y in train_years)
    if holdout_year in train_years:
        raise ValidationError("holdout year is part of the training years")
    if len(train_years) < 2:
        raise ValidationError("need at least two training years")

    base = SpatialSerflingBaseline(lambdas=None if lambdas is None else list(lambdas))
    base.fit(panel.restrict_years(train_years), graph)
    builder = EnvironmentalFeatureBuilder(graph=graph, n_jobs=n_jobs, **(builder_params or {}))
    builder.fit(daily, years=train_years)
    X = builder.transform(daily)
    frame = model_frame(panel, X, base.predict(panel))
    names = list(builder.get_feature_names_out())
    is_train = frame["iso_year"].isin(train_years).to_numpy()
    is_hold = (frame["iso_year"] == holdout_year).to_numpy()
    tr = frame[is_train]

    grid = {
        "nrounds": list(nrounds_grid or [boost_params.nrounds]),
        "max_depth": list(max_depth_grid or [boost_params.max_depth]),
    }
    best, cv = cross_validate(tr[names], tr["b_hat"], tr["deaths"], tr["iso_year"], grid,
                              n_jobs=n_jobs, base_params=boost_params)
    model = PoissonBoostRegressor(**best.as_dict()).fit(tr[names], tr["deaths"], tr["b_hat"],
                                                        years=tr["iso_year"])
    provenance = {
        "baseline": tuple(base.fit_.fit_years),
        "lambda_search": tuple(base.fit_.fit_years) if lambdas is None else (),
        "environmental_baselines": tuple(builder.fit_years_),
        "cross_validation": tuple(sorted(set(tr["iso_year"].tolist()))),
        "boosting": tuple(model.fit_years_),
    }
    _check_provenance(provenance, holdout_year)

    ho = frame[is_hold].reset_index(drop=True)
    if ho.empty:
        raise ValidationError(f"no feature rows in holdout year {holdout_year}")
    d_hat = model.predict(ho[names], offset=ho["b_hat"])
    per_region = deviance_by_region(ho, d_hat, regions=list(graph.regions))
    series = ho[_KEYS + ["deaths", "b_hat"]].rename(columns={"deaths": "observed", "b_hat": "baseline"})
    series["model"] = d_hat
    return BacktestResult(holdout_year, per_region, series, best, cv, provenance)
