"""Synthetic fixtures with known baseline and environmental multipliers.

Regions sit on a rook lattice.  Each region carries weather and pollution
grid points (daily weather, hourly pollutants) and a few population points
per grid point.  Deaths are Poisson with mean
``E * exp(z' beta_r) * phi_true`` where ``phi_true`` is the exponential of
planted coefficients times the engineered features (computed from the full
history by the feature builder).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .baseline import COEF_NAMES, design_matrix
from .exceptions import ValidationError
from .features import EnvironmentalFeatureBuilder, POLLUTANTS, feature_names
from .panel import AVG_WEEKS_PER_YEAR, IsoWeek, RegionGraph, WeeklyPanel, weekly_exposure, weeks_in_iso_year
from .spatial import GriddedField, build_population_weights, regional_daily

__all__ = ["SyntheticTruth", "SyntheticData", "synth_generate", "write_fixture"]

# sub-stream ids of the generator seed
_STREAMS = {"beta": 1, "population": 2, "weather": 3, "pollution": 4, "deaths": 5}
_DAILY_FACTORS = ("tmax", "tavg", "tmin", "humidity", "precip", "wind")


@dataclass
class SyntheticTruth:
    """Parameters of a synthetic fixture.

    Attributes
    ----------
    n_rows, n_cols : int
        Lattice shape; regions are named ``R<row><col>``.
    first_year, n_years : int
        ISO years covered by the deaths panel.
    planted : dict
        Feature name -> log-multiplier per unit.
    seed : int
    beta : dict, optional
        Region -> six baseline coefficients; drawn from the seed if absent.
    points_per_region, pop_per_point : int
        Grid points per region and population points per grid point.
    """

    n_rows: int = 2
    n_cols: int = 3
    first_year: int = 2015
    n_years: int = 4
    planted: dict = field(default_factory=lambda: {"i_hot": 0.3})
    seed: int = 0
    beta: dict | None = None
    points_per_region: int = 2
    pop_per_point: int = 4

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValidationError("lattice needs at least one row and column")
        if self.n_years < 1:
            raise ValidationError("need at least one year")
        if self.points_per_region < 1 or self.pop_per_point < 1:
            raise ValidationError("need at least one grid and population point per region")
        unknown = set(self.planted) - set(feature_names(1))
        if unknown:
            raise ValidationError(f"unknown planted features {sorted(unknown)}")

    @property
    def regions(self):
        return [f"R{i}{j}" for i in range(self.n_rows) for j in range(self.n_cols)]

    @property
    def years(self):
        return list(range(self.first_year, self.first_year + self.n_years))

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticData:
    """In-memory fixture; :func:`write_fixture` stores it as input files."""

    truth: SyntheticTruth
    graph: RegionGraph
    panel: WeeklyPanel
    population: pd.DataFrame
    fields: dict
    pop_grid: np.ndarray
    mapping: dict
    daily: dict
    features: pd.DataFrame
    multipliers: pd.DataFrame
    beta: dict


def _rng(seed, stream):
    return np.random.default_rng([int(seed), _STREAMS[stream]])


def _ar1(rng, n_times, n_series, rho, sd):
    e = rng.normal(0.0, sd, size=(n_times, n_series))
    out = np.empty_like(e)
    out[0] = e[0] / np.sqrt(1 - rho * rho)
    for t in range(1, n_times):
        out[t] = rho * out[t - 1] + e[t]
    return out


def _draw_beta(truth):
    rng = _rng(truth.seed, "beta")
    centre = np.array([np.log(0.045), -0.01, 0.02, 0.15, -0.01, 0.03])
    spread = np.array([0.05, 0.003, 0.01, 0.02, 0.005, 0.005])
    return {r: (centre + spread * rng.normal(size=6)).tolist() for r in truth.regions}


def synth_generate(truth: SyntheticTruth) -> SyntheticData:
    """Generate a complete fixture from ``truth``."""
    regions = truth.regions
    R, K, M = len(regions), truth.points_per_region, truth.pop_per_point
    pos = {r: (i // truth.n_cols, i % truth.n_cols) for i, r in enumerate(regions)}
    centroids = {r: (2.0 + c + 0.5, 40.0 + rr + 0.5) for r, (rr, c) in pos.items()}
    edges = [(a, b) for a in regions for b in regions
             if a < b and abs(pos[a][0] - pos[b][0]) + abs(pos[a][1] - pos[b][1]) == 1]
    graph = RegionGraph.from_edges(regions, edges, centroids)

    # grid points inside each unit cell, population points around them
    grid, mapping, pop_rows = [], {}, []
    prng = _rng(truth.seed, "population")
    for r in regions:
        lon0, lat0 = centroids[r][0] - 0.5, centroids[r][1] - 0.5
        for k in range(K):
            p = (round(lon0 + (k + 0.5) / K, 6), round(lat0 + 0.5, 6))
            grid.append(p)
            mapping[p] = r
            for m in range(M):
                ang = 2 * np.pi * m / M
                q = (round(p[0] + 0.1 / K * np.cos(ang), 6), round(p[1] + 0.1 * np.sin(ang), 6))
                mapping[q] = r
                pop_rows.append((q[0], q[1], float(prng.integers(1000, 5000))))
    grid = np.array(grid)
    pop_grid = np.array(pop_rows)

    base_pop = prng.uniform(100_000, 300_000, size=R)
    growth = prng.uniform(0.0, 0.01, size=R)
    pop_years = truth.years + [truth.years[-1] + 1]
    population = pd.DataFrame(
        [(r, y, float(round(base_pop[i] * (1 + growth[i]) ** (y - truth.first_year))))
         for i, r in enumerate(regions) for y in pop_years],
        columns=["region", "year", "pop65plus"],
    )

    start = pd.Timestamp(IsoWeek(truth.first_year, 1).monday()) - pd.Timedelta(days=7)
    last = truth.years[-1]
    end = pd.Timestamp(IsoWeek(last, weeks_in_iso_year(last)).monday()) + pd.Timedelta(days=6)
    days = pd.date_range(start, end, freq="D")
    T, P = len(days), len(grid)
    region_of_point = np.repeat(np.arange(R), K)
    lat = grid[:, 1]
    season = np.sin(2 * np.pi * (days.dayofyear.to_numpy() - 105) / 365.25)[:, None]

    wrng = _rng(truth.seed, "weather")
    reg_t = _ar1(wrng, T, R, 0.85, 2.0)[:, region_of_point]
    tavg = 14.0 - 0.5 * (lat - 40.0) + 9.0 * season + reg_t + 0.3 * wrng.normal(size=(T, P))
    tmax = tavg + 5.0 + 0.8 * wrng.normal(size=(T, P))
    tmin = tavg - 5.0 + 0.8 * wrng.normal(size=(T, P))
    humidity = 70.0 - 10.0 * season + _ar1(wrng, T, R, 0.7, 3.0)[:, region_of_point] + wrng.normal(size=(T, P))
    wet = wrng.random(size=(T, R))[:, region_of_point] < 0.35
    precip = np.where(wet, wrng.gamma(0.7, 5.0, size=(T, P)), 0.0)
    wind = np.abs(3.0 + _ar1(wrng, T, R, 0.6, 0.8)[:, region_of_point] + 0.3 * wrng.normal(size=(T, P)))
    fields = {}
    for name, vals in zip(_DAILY_FACTORS, (tmax, tavg, tmin, humidity, precip, wind)):
        fields[name] = GriddedField(name, "daily", grid, days, vals)

    arng = _rng(truth.seed, "pollution")
    hours = pd.date_range(start, end + pd.Timedelta(hours=23), freq="h")
    diurnal = np.sin(2 * np.pi * (np.arange(24) - 8) / 24.0)
    levels = {"o3": (60.0, 0.3), "no2": (30.0, -0.3), "pm10": (25.0, -0.1), "pm25": (15.0, -0.1)}
    for name in POLLUTANTS:
        base, amp = levels[name]
        log_level = amp * season + _ar1(arng, T, R, 0.7, 0.2)[:, region_of_point]
        daily_level = base * np.exp(log_level)
        cube = daily_level[:, None, :] * (1.0 + 0.25 * diurnal[None, :, None])
        cube = cube * np.exp(0.05 * arng.normal(size=cube.shape))
        fields[name] = GriddedField(name, "hourly", grid, hours, cube.reshape(T * 24, P))

    weights = build_population_weights(pop_grid, grid, mapping, regions=regions, centroids=centroids)
    daily = regional_daily(fields, weights)
    builder = EnvironmentalFeatureBuilder(graph=graph).fit(daily)
    X = builder.transform(daily)

    beta = truth.beta if truth.beta is not None else _draw_beta(truth)
    rows = []
    for i, r in enumerate(regions):
        for y in truth.years:
            p_t = population.loc[(population.region == r) & (population.year == y), "pop65plus"].item()
            p_n = population.loc[(population.region == r) & (population.year == y + 1), "pop65plus"].item()
            e = weekly_exposure(p_t, p_n)
            for w in range(1, weeks_in_iso_year(y) + 1):
                rows.append((r, y, w, e))
    frame = pd.DataFrame(rows, columns=["region", "iso_year", "iso_week", "exposure"])
    B = np.array([beta[r] for r in frame["region"]])
    Z = design_matrix(frame["iso_year"].to_numpy() - truth.first_year, frame["iso_week"].to_numpy(),
                      AVG_WEEKS_PER_YEAR)
    mu0 = frame["exposure"].to_numpy() * np.exp(np.einsum("ij,ij->i", Z, B))
    log_phi = pd.Series(0.0, index=X.index)
    for name, coef in truth.planted.items():
        log_phi = log_phi + float(coef) * X[name]
    keys = pd.MultiIndex.from_frame(frame[["region", "iso_year", "iso_week"]])
    phi = np.exp(log_phi.reindex(keys).fillna(0.0).to_numpy())
    deaths = _rng(truth.seed, "deaths").poisson(mu0 * phi)
    frame["deaths"] = deaths
    panel = WeeklyPanel(frame)
    multipliers = frame[["region", "iso_year", "iso_week"]].assign(baseline_mean=mu0, phi_true=phi)
    return SyntheticData(truth, graph, panel, population, fields, pop_grid, mapping, daily,
                         X, multipliers, beta)


def _field_frame(f: GriddedField) -> pd.DataFrame:
    T, P = f.values.shape
    out = pd.DataFrame({
        "factor": f.factor,
        "date": np.repeat(f.times.normalize().strftime("%Y-%m-%d"), P),
        "lon": np.tile(f.grid[:, 0], T),
        "lat": np.tile(f.grid[:, 1], T),
        "value": f.values.ravel(),
    })
    if f.resolution == "hourly":
        out.insert(2, "hour", np.repeat(f.times.hour, P))
    return out


def write_fixture(data: SyntheticData, directory) -> dict:
    """Write the fixture as CSV input files plus truth files.

    Returns a mapping of logical name to written path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}

    def put(name, filename, frame):
        p = d / filename
        frame.to_csv(p, index=False, lineterminator="\n")
        paths[name] = p

    g = data.graph
    put("deaths", "deaths.csv", data.panel.data[["region", "iso_year", "iso_week", "deaths"]])
    put("population", "population.csv", data.population)
    put("adjacency", "adjacency.csv", pd.DataFrame(g.edges(), columns=["region_a", "region_b"]))
    put("centroids", "centroids.csv", pd.DataFrame(
        [(r, *g.centroids[r]) for r in g.regions], columns=["region", "lon", "lat"]))
    daily = [f for f in data.fields.values() if f.resolution == "daily"]
    hourly = [f for f in data.fields.values() if f.resolution == "hourly"]
    put("grid_daily", "grid_daily.csv", pd.concat([_field_frame(f) for f in daily], ignore_index=True))
    put("grid_hourly", "grid_hourly.csv", pd.concat([_field_frame(f) for f in hourly], ignore_index=True))
    put("pop_grid", "pop_grid.csv", pd.DataFrame(data.pop_grid, columns=["lon", "lat", "population"]))
    put("mapping", "mapping.csv", pd.DataFrame(
        [(lon, lat, r) for (lon, lat), r in sorted(data.mapping.items())], columns=["lon", "lat", "region"]))
    put("true_multipliers", "true_multipliers.csv", data.multipliers)
    truth = data.truth.to_dict()
    truth["beta"] = {r: [float(x) for x in v] for r, v in data.beta.items()}
    truth["coef_names"] = list(COEF_NAMES)
    p = d / "truth.json"
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["truth"] = p
    return paths
