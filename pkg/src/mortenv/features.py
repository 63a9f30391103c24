"""Weekly environmental features: anomalies, extreme indices, lags, season.

Daily regional series are turned into 25 weekly features per region:
anomalies from a robust seasonal Fourier baseline, daily exceedance
indicators of region-specific 5%/95% quantiles (a three-part hot/cold index
for temperature), each averaged over the seven days of the ISO week.  One
week lags of those 25 columns, four one-hot season columns and the region
centroid complete the feature matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConvergenceError, ValidationError
from .panel import IsoWeek, RegionGraph

__all__ = [
    "WEATHER_FACTORS",
    "POLLUTANTS",
    "SEASONS",
    "base_feature_names",
    "feature_names",
    "AnomalyBaseline",
    "ExtremeThresholds",
    "huber_irls",
    "fit_anomaly_baseline",
    "anomaly",
    "extreme_temperature_index",
    "extreme_factor_indicator",
    "weekly_average",
    "season_of",
    "assemble_features",
    "EnvironmentalFeatureBuilder",
]

TEMPERATURE = ("tmax", "tavg", "tmin")
WEATHER_FACTORS = TEMPERATURE + ("humidity", "precip", "wind")
POLLUTANTS = ("o3", "no2", "pm10", "pm25")
SEASONS = ("spring", "summer", "autumn", "winter")
# series that receive an anomaly column (tavg only feeds the temperature index)
_ANOMALY_FACTORS = ("tmax", "tmin", "humidity", "precip", "wind") + POLLUTANTS
_INDICATOR_FACTORS = ("humidity", "precip", "wind") + POLLUTANTS


def base_feature_names() -> list[str]:
    """The 25 weekly environmental feature names in fixed order."""
    names = ["tmax_anom", "tmin_anom", "i_hot", "i_cold"]
    for f in ("humidity", "precip", "wind") + POLLUTANTS:
        names += [f"{f}_anom", f"i_high_{f}", f"i_low_{f}"]
    return names


def feature_names(lag: int = 1) -> list[str]:
    """All feature-matrix columns; 56 for ``lag=1``."""
    base = base_feature_names()
    names = list(base)
    for u in range(1, lag + 1):
        names += [f"{n}_lag{u}" for n in base]
    return names + [f"season_{s}" for s in SEASONS] + ["lon", "lat"]


def _series_key(factor, pollutant_stat):
    return f"{factor}_{pollutant_stat}" if factor in POLLUTANTS else factor


def _day_angle(dates, days_per_year="average"):
    dates = pd.DatetimeIndex(dates)
    doy = dates.dayofyear.to_numpy(dtype=float)
    if days_per_year == "average":
        length = 365.25
    elif days_per_year == "exact":
        length = np.where(dates.is_leap_year, 366.0, 365.0)
    else:
        raise ValidationError("days_per_year must be 'average' or 'exact'")
    return 2.0 * np.pi * doy / length


def huber_irls(X, y, c=1.345, tol=1e-8, max_iter=50):
    """Huber M-estimate of a linear model by iteratively reweighted LS.

    The residual scale is the normalised MAD, re-estimated every iteration.

    Returns
    -------
    coef : ndarray
    weights : ndarray
        Final Huber weights.
    n_iter : int

    Raises
    ------
    ConvergenceError
        If the coefficient change is still above ``tol`` after ``max_iter``
        iterations; ``last_iterate`` holds the final coefficients.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    w = np.ones_like(y)
    history = []
    for it in range(1, max_iter + 1):
        r = y - X @ coef
        scale = np.median(np.abs(r - np.median(r))) / 0.6744897501960817
        if scale <= 1e-12 * (1.0 + np.max(np.abs(y))):
            # (near) exact fit: every residual is inside the Huber band
            return coef, np.ones_like(y), it
        u = np.abs(r) / scale
        w = np.where(u <= c, 1.0, c / np.maximum(u, 1e-300))
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        step = np.max(np.abs(new - coef))
        history.append(step)
        coef = new
        if step <= tol * (1.0 + np.max(np.abs(coef))):
            return coef, w, it
    raise ConvergenceError(
        f"Huber IRLS did not converge in {max_iter} iterations", last_iterate=coef, history=history
    )


@dataclass(frozen=True)
class AnomalyBaseline:
    """Seasonal baseline ``a0 + a1 sin(2 pi day/365.25) + a2 cos(...)``."""

    alpha0: float
    alpha1: float
    alpha2: float
    zero_baseline: bool = False
    converged: bool = True
    n_iter: int = 0
    days_per_year: str = "average"

    def predict(self, dates) -> np.ndarray:
        dates = pd.DatetimeIndex(np.atleast_1d(pd.to_datetime(dates)))
        if self.zero_baseline:
            return np.zeros(len(dates))
        ang = _day_angle(dates, self.days_per_year)
        return self.alpha0 + self.alpha1 * np.sin(ang) + self.alpha2 * np.cos(ang)


def fit_anomaly_baseline(dates, values, zero_baseline=False, days_per_year="average",
                         c=1.345, tol=1e-8, max_iter=50) -> AnomalyBaseline:
    """Robust one-harmonic Fourier baseline of a daily regional series."""
    if zero_baseline:
        return AnomalyBaseline(0.0, 0.0, 0.0, zero_baseline=True, days_per_year=days_per_year)
    dates = pd.DatetimeIndex(pd.to_datetime(dates))
    y = np.asarray(values, dtype=float)
    if len(dates) != len(y):
        raise ValidationError("dates and values differ in length")
    if not np.all(np.isfinite(y)):
        raise ValidationError("baseline input contains non-finite values")
    if dates.normalize().nunique() < 3:
        raise ValidationError("need at least 3 distinct days to fit a baseline")
    ang = _day_angle(dates, days_per_year)
    X = np.column_stack([np.ones_like(ang), np.sin(ang), np.cos(ang)])
    coef, _, n_iter = huber_irls(X, y, c=c, tol=tol, max_iter=max_iter)
    return AnomalyBaseline(*map(float, coef), zero_baseline=False, converged=True,
                           n_iter=n_iter, days_per_year=days_per_year)


def anomaly(value, baseline: AnomalyBaseline, date):
    """Deviation of ``value`` from the baseline on ``date``."""
    if baseline.zero_baseline:
        return value
    pred = baseline.predict(date)
    out = np.asarray(value, dtype=float) - (pred if np.ndim(value) else pred[0])
    return out.item() if np.ndim(out) == 0 else out


def extreme_temperature_index(tmax, tavg, tmin, thresholds, direction="hot"):
    """Count (0-3) of temperature statistics beyond their quantile.

    ``thresholds`` maps ``"tmax"``, ``"tavg"``, ``"tmin"`` to ``(q5, q95)``.
    Hot uses ``>= q95``, cold uses ``<= q5``.
    """
    total = 0
    for key, v in (("tmax", tmax), ("tavg", tavg), ("tmin", tmin)):
        total = total + extreme_factor_indicator(v, thresholds[key], direction)
    return total


def extreme_factor_indicator(value, thresholds, direction="high"):
    """1 if ``value >= q95`` (high/hot) or ``value <= q5`` (low/cold)."""
    q5, q95 = thresholds
    v = np.asarray(value, dtype=float)
    if direction in ("high", "hot"):
        out = (v >= q95).astype(int)
    elif direction in ("low", "cold"):
        out = (v <= q5).astype(int)
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    return int(out) if out.ndim == 0 else out


def weekly_average(values) -> float:
    """Mean of the seven daily values of one ISO week."""
    v = np.asarray(values, dtype=float)
    if v.shape != (7,):
        raise ValidationError(f"a week needs 7 daily values, got {v.size}")
    return float(v.sum() / 7.0)


def season_of(week_start) -> str:
    """Season containing the first day (Monday) of a week.

    Spring starts March 15, summer June 15, autumn September 15 and winter
    December 15; each bound belongs to the season it opens.
    """
    if isinstance(week_start, IsoWeek):
        week_start = week_start.monday()
    d = pd.Timestamp(week_start)
    md = (d.month, d.day)
    if (3, 15) <= md < (6, 15):
        return "spring"
    if (6, 15) <= md < (9, 15):
        return "summer"
    if (9, 15) <= md < (12, 15):
        return "autumn"
    return "winter"


class ExtremeThresholds(dict):
    """(region, series) -> (q5, q95), with a frame export for auditing."""

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"region": r, "series": s, "q05": q5, "q95": q95}
            for (r, s), (q5, q95) in sorted(self.items())
        ]
        return pd.DataFrame(rows, columns=["region", "series", "q05", "q95"])


def _iso_keys(dates):
    iso = pd.DatetimeIndex(dates).isocalendar()
    return iso["year"].to_numpy(dtype=int), iso["week"].to_numpy(dtype=int)


def _weekly_means(frame: pd.DataFrame) -> pd.DataFrame:
    years, weeks = _iso_keys(frame.index)
    g = frame.groupby([years, weeks])
    means = g.mean()
    counts = g.size()
    means = means[counts.to_numpy() == 7]
    means.index = means.index.set_names(["iso_year", "iso_week"])
    return means


def assemble_features(daily, baselines, thresholds, graph: RegionGraph, lag=1,
                      pollutant_stat="avg", regions=None) -> pd.DataFrame:
    """Build the weekly feature matrix from daily regional series.

    Parameters
    ----------
    daily : mapping of str to DataFrame
        Daily series (index dates, one column per region) keyed by factor
        name, pollutants as ``"<factor>_<stat>"``.
    baselines : mapping of (region, series) to AnomalyBaseline
    thresholds : mapping of (region, series) to (q5, q95)
    graph : RegionGraph
        Supplies centroid coordinates and the row order of regions.
    lag : int
        Number of weekly lags; the first ``lag`` weeks of each region are
        dropped.

    Returns
    -------
    DataFrame
        Indexed by (region, iso_year, iso_week), columns ``feature_names(lag)``.
    """
    if lag < 1:
        raise ValidationError("lag depth must be >= 1")
    regions = list(graph.regions if regions is None else regions)
    keys = {f: _series_key(f, pollutant_stat) for f in WEATHER_FACTORS + POLLUTANTS}
    for f, key in keys.items():
        if key not in daily:
            raise ValidationError(f"daily series {key!r} is missing")
        absent = [r for r in regions if r not in daily[key].columns]
        if absent:
            raise ValidationError(f"factor {key!r} missing for region {absent[0]}")
    index = daily[keys["tmax"]].index
    for key in keys.values():
        if not daily[key].index.equals(index):
            raise ValidationError(f"daily series {key!r} does not share the common date index")

    per_region = []
    for r in regions:
        def col(f):
            return daily[keys[f]][r].to_numpy(dtype=float)

        def thr(f):
            try:
                return thresholds[(r, keys[f])]
            except KeyError:
                raise ValidationError(f"no thresholds for region {r}, series {keys[f]}") from None

        def anom(f):
            try:
                b = baselines[(r, keys[f])]
            except KeyError:
                raise ValidationError(f"no anomaly baseline for region {r}, series {keys[f]}") from None
            return col(f) - b.predict(index)

        tthr = {f: thr(f) for f in TEMPERATURE}
        cols = {
            "tmax_anom": anom("tmax"),
            "tmin_anom": anom("tmin"),
            "i_hot": extreme_temperature_index(col("tmax"), col("tavg"), col("tmin"), tthr, "hot"),
            "i_cold": extreme_temperature_index(col("tmax"), col("tavg"), col("tmin"), tthr, "cold"),
        }
        for f in _INDICATOR_FACTORS:
            cols[f"{f}_anom"] = anom(f)
            cols[f"i_high_{f}"] = extreme_factor_indicator(col(f), thr(f), "high")
            cols[f"i_low_{f}"] = extreme_factor_indicator(col(f), thr(f), "low")
        day_frame = pd.DataFrame(cols, index=index, dtype=float)[base_feature_names()]
        weekly = _weekly_means(day_frame)

        weeks = [IsoWeek(int(y), int(w)) for y, w in weekly.index]
        blocks = [weekly]
        for u in range(1, lag + 1):
            shifted = weekly.shift(u)
            # a lag is usable only when the row u positions back is exactly u weeks earlier
            ok = np.array([
                i >= u and weeks[i - u] == weeks[i].shift(-u) for i in range(len(weeks))
            ], dtype=bool)
            shifted.loc[~ok, :] = np.nan
            shifted.columns = [f"{c}_lag{u}" for c in weekly.columns]
            blocks.append(shifted)
        frame = pd.concat(blocks, axis=1)
        seasons = [season_of(wk.monday()) for wk in weeks]
        for s in SEASONS:
            frame[f"season_{s}"] = [1.0 if x == s else 0.0 for x in seasons]
        frame["lon"], frame["lat"] = graph.centroids[r]
        frame = frame.dropna(axis=0, how="any")
        frame.index = pd.MultiIndex.from_tuples(
            [(r, y, w) for y, w in frame.index], names=["region", "iso_year", "iso_week"]
        )
        per_region.append(frame)
    out = pd.concat(per_region, axis=0)[feature_names(lag)].astype(float)
    return out


def _fit_one(region, key, dates, values, zero, days_per_year, c, tol, max_iter):
    try:
        b = fit_anomaly_baseline(dates, values, zero_baseline=zero, days_per_year=days_per_year,
                                 c=c, tol=tol, max_iter=max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(f"baseline for region {region}, series {key}: {exc}",
                               last_iterate=exc.last_iterate, history=exc.history) from None
    return (region, key), b


class EnvironmentalFeatureBuilder(TransformerMixin, BaseEstimator):
    """Learn anomaly baselines and quantile thresholds, then build features.

    Parameters
    ----------
    graph : RegionGraph
        Regions and centroids used for the coordinate columns.
    lag : int, default=1
    zero_baseline : tuple of str, default=("precip",)
        Factors whose anomaly is the raw value.
    pollutant_stat : {"avg", "min", "max"}, default="avg"
    days_per_year : {"average", "exact"}, default="average"
    huber_c, tol, max_iter : Huber IRLS settings.
    quantiles : (float, float), default=(0.05, 0.95)
    n_jobs : int, default=1

    Attributes
    ----------
    baselines_ : dict of (region, series) -> AnomalyBaseline
    thresholds_ : ExtremeThresholds
    fit_years_ : tuple of int
        ISO years of the days the parameters were estimated on.
    """

    def __init__(self, graph=None, lag=1, zero_baseline=("precip",), pollutant_stat="avg",
                 days_per_year="average", huber_c=1.345, tol=1e-8, max_iter=50,
                 quantiles=(0.05, 0.95), n_jobs=1):
        self.graph = graph
        self.lag = lag
        self.zero_baseline = zero_baseline
        self.pollutant_stat = pollutant_stat
        self.days_per_year = days_per_year
        self.huber_c = huber_c
        self.tol = tol
        self.max_iter = max_iter
        self.quantiles = quantiles
        self.n_jobs = n_jobs

    def _keys(self):
        return {f: _series_key(f, self.pollutant_stat) for f in WEATHER_FACTORS + POLLUTANTS}

    def _regions(self, daily):
        if self.graph is not None:
            return list(self.graph.regions)
        return list(daily[self._keys()["tmax"]].columns)

    def fit(self, daily, y=None, years=None):
        """Estimate baselines and thresholds from the daily series.

        ``years`` restricts estimation to days of those ISO years.
        """
        keys = self._keys()
        regions = self._regions(daily)
        for key in keys.values():
            if key not in daily:
                raise ValidationError(f"daily series {key!r} is missing")
        index = pd.DatetimeIndex(daily[keys["tmax"]].index)
        iso_year, _ = _iso_keys(index)
        mask = np.ones(len(index), dtype=bool) if years is None else np.isin(iso_year, list(years))
        if not mask.any():
            raise ValidationError("no days left to fit on")
        dates = index[mask]
        zero = set(self.zero_baseline)

        tasks = []
        thresholds = ExtremeThresholds()
        for f, key in keys.items():
            frame = daily[key]
            for r in regions:
                if r not in frame.columns:
                    raise ValidationError(f"factor {key!r} missing for region {r}")
                values = frame[r].to_numpy(dtype=float)[mask]
                if not np.all(np.isfinite(values)):
                    raise ValidationError(f"non-finite values in {key!r} for region {r}")
                if f in _ANOMALY_FACTORS:
                    tasks.append((r, key, dates, values, f in zero))
                if f in TEMPERATURE or f in _INDICATOR_FACTORS:
                    lo, hi = np.quantile(values, self.quantiles)
                    thresholds[(r, key)] = (float(lo), float(hi))
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(_fit_one)(r, key, d, v, z, self.days_per_year, self.huber_c, self.tol, self.max_iter)
            for r, key, d, v, z in tasks
        )
        self.baselines_ = dict(results)
        self.thresholds_ = thresholds
        self.fit_years_ = tuple(sorted(set(iso_year[mask].tolist())))
        self.regions_ = regions
        return self

    def transform(self, daily):
        check_is_fitted(self, "baselines_")
        if self.graph is None:
            raise ValidationError("a RegionGraph is required for the coordinate features")
        return assemble_features(daily, self.baselines_, self.thresholds_, self.graph,
                                 lag=self.lag, pollutant_stat=self.pollutant_stat,
                                 regions=self.regions_)

    def get_feature_names_out(self, input_features=None):
        return np.array(feature_names(self.lag), dtype=object)

    def baselines_frame(self) -> pd.DataFrame:
        check_is_fitted(self, "baselines_")
        rows = [
            {"region": r, "series": s, "alpha0": b.alpha0, "alpha1": b.alpha1, "alpha2": b.alpha2,
             "zero_baseline": b.zero_baseline, "converged": b.converged, "n_iter": b.n_iter}
            for (r, s), b in sorted(self.baselines_.items())
        ]
        return pd.DataFrame(rows)
