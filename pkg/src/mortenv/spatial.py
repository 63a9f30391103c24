"""Population-weighted aggregation of gridded environmental fields.

Gridded fields arrive either hourly (air pollutants) or daily (weather).
Hourly fields are first reduced to daily minimum, average and maximum at each
grid point; every daily field is then averaged over the points of a region
using population weights that sum to one within the region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import ValidationError

__all__ = [
    "GriddedField",
    "RegionWeights",
    "daily_stats_from_hourly",
    "build_population_weights",
    "region_daily_series",
    "regional_daily",
    "read_grid_csv",
    "read_pop_grid",
    "read_mapping",
]

DAILY_STATS = ("min", "avg", "max")


def daily_stats_from_hourly(values):
    """Daily ``(min, avg, max)`` from exactly 24 hourly values."""
    v = np.asarray(values, dtype=float)
    if v.shape != (24,):
        raise ValidationError(f"need 24 hourly values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("hourly values must be finite")
    return float(v.min()), float(v.mean()), float(v.max())


def _coord_key(lon, lat):
    return (round(float(lon), 6), round(float(lat), 6))


@dataclass(frozen=True)
class GriddedField:
    """Values of one environmental factor on a lon/lat grid.

    Attributes
    ----------
    factor : str
    resolution : {"hourly", "daily"}
    grid : ndarray of shape (n_points, 2)
        Longitude and latitude of each grid point.
    times : DatetimeIndex
        Contiguous timestamps at the declared resolution.
    values : ndarray of shape (n_times, n_points)
    """

    factor: str
    resolution: str
    grid: np.ndarray
    times: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self):
        if self.resolution not in ("hourly", "daily"):
            raise ValidationError(f"unknown resolution {self.resolution!r}")
        grid = np.asarray(self.grid, dtype=float).reshape(-1, 2)
        keys = [_coord_key(*p) for p in grid]
        if len(set(keys)) != len(keys):
            raise ValidationError(f"{self.factor}: grid points must be unique")
        times = pd.DatetimeIndex(self.times)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(times), len(grid)):
            raise ValidationError(
                f"{self.factor}: values shape {values.shape} does not match "
                f"{len(times)} times x {len(grid)} points"
            )
        step = pd.Timedelta(hours=1) if self.resolution == "hourly" else pd.Timedelta(days=1)
        if len(times) > 1 and not np.all(np.diff(times.asi8) == step.value):
            raise ValidationError(f"{self.factor}: timestamps are not contiguous")
        if self.resolution == "daily" and len(times) and np.any(times != times.normalize()):
            raise ValidationError(f"{self.factor}: daily timestamps must be midnight")
        for name, val in (("grid", grid), ("times", times), ("values", values)):
            object.__setattr__(self, name, val)

    def point_index(self):
        return {_coord_key(*p): i for i, p in enumerate(self.grid)}

    def to_daily(self) -> dict[str, "GriddedField"]:
        """Reduce an hourly field to daily {"min", "avg", "max"} fields.

        A daily field is returned unchanged under the key ``"value"``.
        """
        if self.resolution == "daily":
            return {"value": self}
        times = self.times
        if len(times) % 24 or (len(times) and times[0].hour != 0):
            raise ValidationError(f"{self.factor}: hourly series must cover whole days")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"{self.factor}: missing hourly values")
        cube = self.values.reshape(-1, 24, self.values.shape[1])
        days = times[::24].normalize()
        out = {}
        for stat, fn in zip(DAILY_STATS, (np.min, np.mean, np.max)):
            out[stat] = GriddedField(self.factor, "daily", self.grid, days, fn(cube, axis=1))
        return out


@dataclass(frozen=True)
class RegionWeights:
    """Per-region grid indices and population weights (summing to one)."""

    weights: dict

    def __getitem__(self, region):
        return self.weights[region]

    def __iter__(self):
        return iter(self.weights)

    @property
    def regions(self):
        return list(self.weights)

    def to_frame(self, grid=None) -> pd.DataFrame:
        rows = []
        for r, (idx, w) in self.weights.items():
            for i, wi in zip(idx, w):
                row = {"region": r, "grid_index": int(i), "weight": float(wi)}
                if grid is not None:
                    row["lon"], row["lat"] = float(grid[i, 0]), float(grid[i, 1])
                rows.append(row)
        return pd.DataFrame(rows)


def build_population_weights(pop_grid, feature_grid, point_to_region, regions=None, centroids=None):
    """Population weights of feature-grid points within each region.

    Each population point is attributed to the Euclidean-nearest feature point
    of its own region (ties go to the lowest feature-grid index).  A point's
    weight is its attributed population over the region's total population.

    Parameters
    ----------
    pop_grid : array-like of shape (m, 3)
        ``lon, lat, population`` rows.
    feature_grid : array-like of shape (n, 2)
    point_to_region : mapping of (lon, lat) to region
        Must cover every feature and population point.
    regions : sequence of str, optional
        Regions to weight; defaults to those appearing in the mapping.
    centroids : mapping of region to (lon, lat), optional
        Needed only for regions without feature points: such a region gets
        weight one on the feature point nearest its centroid.

    Returns
    -------
    RegionWeights
    """
    pop_grid = np.asarray(pop_grid, dtype=float).reshape(-1, 3)
    feature_grid = np.asarray(feature_grid, dtype=float).reshape(-1, 2)
    if np.any(pop_grid[:, 2] < 0):
        raise ValidationError("population counts must be non-negative")
    mapping = {_coord_key(*k): v for k, v in dict(point_to_region).items()}

    def region_of(lon, lat, what):
        try:
            return mapping[_coord_key(lon, lat)]
        except KeyError:
            raise ValidationError(f"{what} point ({lon}, {lat}) missing from mapping") from None

    feat_region = np.array([region_of(lon, lat, "feature grid") for lon, lat in feature_grid], dtype=object)
    pop_region = np.array([region_of(lon, lat, "population grid") for lon, lat, _ in pop_grid], dtype=object)
    if regions is None:
        regions = sorted(set(feat_region) | set(pop_region))

    out = {}
    for r in regions:
        in_pop = np.flatnonzero(pop_region == r)
        total = pop_grid[in_pop, 2].sum()
        if total <= 0:
            raise ValidationError(f"region {r} has zero total population")
        feat_idx = np.flatnonzero(feat_region == r)
        if feat_idx.size == 0:
            if centroids is None or r not in centroids:
                raise ValidationError(
                    f"region {r} has no feature grid points and no centroid for fallback"
                )
            d2 = ((feature_grid - np.asarray(centroids[r], dtype=float)) ** 2).sum(axis=1)
            out[r] = (np.array([int(np.argmin(d2))]), np.array([1.0]))
            continue
        pts = pop_grid[in_pop, :2]
        d2 = ((pts[:, None, :] - feature_grid[None, feat_idx, :]) ** 2).sum(axis=2)
        # argmin returns the first minimum; feat_idx is ascending
        nearest = np.argmin(d2, axis=1)
        attributed = np.bincount(nearest, weights=pop_grid[in_pop, 2], minlength=feat_idx.size)
        out[r] = (feat_idx, attributed / total)
    return RegionWeights(out)


def region_daily_series(field: GriddedField, weights: RegionWeights) -> pd.DataFrame:
    """Population-weighted regional series of a daily field.

    Returns a frame indexed by date with one column per region.
    """
    if field.resolution != "daily":
        raise ValidationError("aggregate daily fields; reduce hourly fields with to_daily()")
    times = field.times
    if len(times) > 1 and not np.all(np.diff(times.asi8) == pd.Timedelta(days=1).value):
        raise ValidationError(f"{field.factor}: date gaps in field")
    n_points = field.values.shape[1]
    cols = {}
    for r in weights:
        idx, w = weights[r]
        if np.any(idx >= n_points):
            raise ValidationError(f"weights for {r} reference points outside the field grid")
        cols[r] = field.values[:, idx] @ w
    return pd.DataFrame(cols, index=pd.DatetimeIndex(times, name="date"))


def regional_daily(fields, weights: RegionWeights) -> dict[str, pd.DataFrame]:
    """Regional daily series for every field.

    Daily fields are keyed by factor name; hourly fields are reduced first
    and keyed ``"<factor>_<stat>"`` for ``stat`` in min, avg and max.
    """
    out = {}
    for name in sorted(fields):
        field = fields[name]
        if field.resolution == "daily":
            out[name] = region_daily_series(field, weights)
        else:
            for stat, f in field.to_daily().items():
                out[f"{name}_{stat}"] = region_daily_series(f, weights)
    return out


def read_grid_csv(path) -> dict[str, GriddedField]:
    """Read ``grid_daily.csv`` or ``grid_hourly.csv`` into fields per factor."""
    df = pd.read_csv(path)
    need = {"factor", "date", "lon", "lat", "value"}
    if not need <= set(df.columns):
        raise ValidationError(f"{path}: need columns {sorted(need)}")
    hourly = "hour" in df.columns
    ts = pd.to_datetime(df["date"])
    if hourly:
        if np.any((df["hour"] < 0) | (df["hour"] > 23)):
            raise ValidationError(f"{path}: hour outside 0-23")
        ts = ts + pd.to_timedelta(df["hour"], unit="h")
    df = df.assign(ts=ts, key=list(zip(df["lon"].round(6), df["lat"].round(6))))
    out = {}
    for factor, g in df.groupby("factor", sort=True):
        if g.duplicated(["ts", "key"]).any():
            raise ValidationError(f"{path}: duplicate {factor} observations")
        wide = g.pivot(index="ts", columns="key", values="value").sort_index()
        keys = sorted(wide.columns)
        wide = wide[keys]
        if wide.isna().any().any():
            raise ValidationError(f"{path}: {factor} has missing (time, point) values")
        out[factor] = GriddedField(
            factor,
            "hourly" if hourly else "daily",
            np.array(keys, dtype=float),
            wide.index,
            wide.to_numpy(),
        )
    return out


def read_pop_grid(path) -> np.ndarray:
    df = pd.read_csv(path)
    if not {"lon", "lat", "population"} <= set(df.columns):
        raise ValidationError(f"{path}: need columns lon,lat,population")
    return df[["lon", "lat", "population"]].to_numpy(dtype=float)


def read_mapping(path) -> dict:
    df = pd.read_csv(path, dtype={"region": str})
    if not {"lon", "lat", "region"} <= set(df.columns):
        raise ValidationError(f"{path}: need columns lon,lat,region")
    out = {}
    for lon, lat, r in df[["lon", "lat", "region"]].itertuples(index=False):
        key = _coord_key(lon, lat)
        if key in out and out[key] != r:
            raise ValidationError(f"{path}: point {key} mapped to two regions")
        out[key] = r
    return out
