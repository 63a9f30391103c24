"""ISO-week calendar helpers, weekly exposures and the mortality panel.

The panel is the response data of the whole framework: one record of deaths
and exposure-to-risk per (region, ISO year, ISO week).  Regions are tied
together by a :class:`RegionGraph` that carries neighbour sets and centroid
coordinates.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .exceptions import ValidationError

AVG_WEEKS_PER_YEAR = 52.18

__all__ = [
    "AVG_WEEKS_PER_YEAR",
    "IsoWeek",
    "RegionGraph",
    "WeeklyPanel",
    "iso_week_of",
    "weeks_in_iso_year",
    "iso_weeks",
    "weekly_exposure",
    "rate_from_mu",
    "load_panel",
]


def iso_week_of(date):
    """Return the ISO-8601 ``(iso_year, iso_week, iso_weekday)`` of a date.

    Weekday runs from 1 (Monday) to 7 (Sunday).  Strings in ``YYYY-MM-DD``
    form are accepted as well as :class:`datetime.date` objects.
    """
    if isinstance(date, str):
        try:
            date = _dt.date.fromisoformat(date)
        except ValueError as exc:
            raise ValidationError(f"invalid date {date!r}") from exc
    elif isinstance(date, _dt.datetime):
        date = date.date()
    elif isinstance(date, (np.datetime64, pd.Timestamp)):
        date = pd.Timestamp(date).date()
    if not isinstance(date, _dt.date):
        raise ValidationError(f"not a calendar date: {date!r}")
    iso = date.isocalendar()
    return (iso[0], iso[1], iso[2])


def weeks_in_iso_year(iso_year: int) -> int:
    """Number of ISO weeks (52 or 53) in ``iso_year``."""
    # Dec 28 always lies in the last ISO week of its year.
    return _dt.date(int(iso_year), 12, 28).isocalendar()[1]


@dataclass(frozen=True, order=True)
class IsoWeek:
    """An ISO week ``iso_week`` of ISO year ``iso_year``; ordered in time."""

    iso_year: int
    iso_week: int

    def __post_init__(self):
        if not 1 <= self.iso_week <= weeks_in_iso_year(self.iso_year):
            raise ValidationError(
                f"ISO year {self.iso_year} has no week {self.iso_week}"
            )

    @classmethod
    def from_date(cls, date) -> "IsoWeek":
        year, week, _ = iso_week_of(date)
        return cls(year, week)

    def monday(self) -> _dt.date:
        return _dt.date.fromisocalendar(self.iso_year, self.iso_week, 1)

    def days(self) -> list[_dt.date]:
        start = self.monday()
        return [start + _dt.timedelta(days=k) for k in range(7)]

    def shift(self, weeks: int) -> "IsoWeek":
        return IsoWeek.from_date(self.monday() + _dt.timedelta(weeks=weeks))

    def __str__(self):
        return f"{self.iso_year}-W{self.iso_week:02d}"


def iso_weeks(years) -> list[IsoWeek]:
    """All ISO weeks of the given ISO years, in calendar order."""
    return [
        IsoWeek(int(y), w)
        for y in sorted(set(int(y) for y in years))
        for w in range(1, weeks_in_iso_year(y) + 1)
    ]


def weekly_exposure(p_t, p_next, weeks_per_year=AVG_WEEKS_PER_YEAR):
    """Weekly exposure-to-risk from two January-1 population counts.

    ``(p_t + p_next) / (2 * weeks_per_year)``; the same value applies to every
    week of year ``t``.  Works elementwise on arrays.
    """
    p_t = np.asarray(p_t, dtype=float)
    p_next = np.asarray(p_next, dtype=float)
    if np.any(p_t < 0) or np.any(p_next < 0):
        raise ValidationError("population counts must be non-negative")
    out = (p_t + p_next) / (2.0 * np.asarray(weeks_per_year, dtype=float))
    return out.item() if out.ndim == 0 else out


def rate_from_mu(mu):
    """Weekly mortality rate ``q = 1 - exp(-mu)`` under a constant force."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0) or np.any(np.isnan(mu)):
        raise ValidationError("force of mortality must be non-negative")
    out = -np.expm1(-mu)
    return out.item() if out.ndim == 0 else out


@dataclass(frozen=True)
class RegionGraph:
    """Regions, their (symmetric, irreflexive) neighbour sets and centroids.

    Parameters
    ----------
    regions : sequence of str
        Region identifiers; this order defines the row order of the penalty
        matrix and of every per-region array.
    neighbors : mapping of str to set of str
    centroids : mapping of str to (lon, lat)
    """

    regions: tuple
    neighbors: Mapping[str, frozenset] = field(repr=False)
    centroids: Mapping[str, tuple] = field(repr=False)

    def __post_init__(self):
        regions = tuple(str(r) for r in self.regions)
        if len(set(regions)) != len(regions):
            raise ValidationError("region identifiers must be unique")
        known = set(regions)
        nb = {r: frozenset(self.neighbors.get(r, ())) for r in regions}
        for r, ns in nb.items():
            if r in ns:
                raise ValidationError(f"region {r} lists itself as neighbour")
            unknown = ns - known
            if unknown:
                raise ValidationError(
                    f"region {r} has unknown neighbours {sorted(unknown)}"
                )
            for s in ns:
                if r not in nb[s]:
                    raise ValidationError(
                        f"neighbour relation not symmetric: {r}-{s}"
                    )
        extra = set(self.neighbors) - known
        if extra:
            raise ValidationError(f"neighbours given for unknown regions {sorted(extra)}")
        cents = {}
        for r in regions:
            if r not in self.centroids:
                raise ValidationError(f"region {r} has no centroid")
            lon, lat = self.centroids[r]
            cents[r] = (float(lon), float(lat))
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "centroids", cents)

    @classmethod
    def from_edges(cls, regions, edges, centroids) -> "RegionGraph":
        """Build a graph from an undirected edge list (symmetric closure)."""
        nb = {r: set() for r in regions}
        for a, b in edges:
            if a == b:
                raise ValidationError(f"self-loop on region {a}")
            for x in (a, b):
                if x not in nb:
                    raise ValidationError(f"edge references unknown region {x}")
            nb[a].add(b)
            nb[b].add(a)
        return cls(tuple(regions), nb, centroids)

    def __len__(self):
        return len(self.regions)

    def index(self, region) -> int:
        return self.regions.index(region)

    def edges(self) -> list[tuple[str, str]]:
        """Unordered neighbour pairs, each listed once in region order."""
        pos = {r: i for i, r in enumerate(self.regions)}
        return [
            (r, s)
            for r in self.regions
            for s in sorted(self.neighbors[r], key=pos.__getitem__)
            if pos[s] > pos[r]
        ]

    def subgraph(self, regions) -> "RegionGraph":
        keep = [r for r in self.regions if r in set(regions)]
        ks = set(keep)
        return RegionGraph(
            tuple(keep),
            {r: self.neighbors[r] & ks for r in keep},
            {r: self.centroids[r] for r in keep},
        )


@dataclass(frozen=True)
class WeeklyPanel:
    """Deaths and exposures per (region, ISO year, ISO week).

    ``data`` has the columns ``region, iso_year, iso_week, deaths, exposure``
    and is sorted by region (in graph order when built by :func:`load_panel`)
    and then by time.
    """

    data: pd.DataFrame

    COLUMNS = ("region", "iso_year", "iso_week", "deaths", "exposure")

    def __post_init__(self):
        df = self.data
        missing = [c for c in self.COLUMNS if c not in df.columns]
        if missing:
            raise ValidationError(f"panel is missing columns {missing}")
        df = df.loc[:, list(self.COLUMNS)].copy()
        df["region"] = df["region"].astype(str)
        df["iso_year"] = df["iso_year"].astype(int)
        df["iso_week"] = df["iso_week"].astype(int)
        df["exposure"] = df["exposure"].astype(float)
        deaths = df["deaths"].to_numpy(dtype=float)
        if np.any(deaths < 0) or np.any(deaths != np.round(deaths)):
            raise ValidationError("deaths must be non-negative integers")
        df["deaths"] = deaths.astype(np.int64)
        if df.duplicated(["region", "iso_year", "iso_week"]).any():
            raise ValidationError("duplicate (region, iso_year, iso_week) records")
        bad = (df["exposure"] <= 0) & (df["deaths"] > 0)
        if bad.any():
            r = df.loc[bad].iloc[0]
            raise ValidationError(
                f"non-positive exposure with deaths in {r.region} "
                f"{r.iso_year}-W{r.iso_week:02d}"
            )
        df = df.reset_index(drop=True)
        df.flags.allows_duplicate_labels = False
        object.__setattr__(self, "data", df)

    def __len__(self):
        return len(self.data)

    @property
    def regions(self) -> list[str]:
        return list(dict.fromkeys(self.data["region"]))

    @property
    def years(self) -> list[int]:
        return sorted(self.data["iso_year"].unique().tolist())

    def rates(self) -> np.ndarray:
        """Observed death rates ``m = d / E``."""
        return self.data["deaths"].to_numpy() / self.data["exposure"].to_numpy()

    def restrict_years(self, years) -> "WeeklyPanel":
        years = set(int(y) for y in years)
        return WeeklyPanel(self.data[self.data["iso_year"].isin(years)])

    def missing_cells(self, regions=None) -> list[tuple[str, int, int]]:
        """(region, year, week) cells absent from the rectangular grid."""
        regions = list(regions) if regions is not None else self.regions
        have = set(
            zip(self.data["region"], self.data["iso_year"], self.data["iso_week"])
        )
        return [
            (r, wk.iso_year, wk.iso_week)
            for r in regions
            for wk in iso_weeks(self.years)
            if (r, wk.iso_year, wk.iso_week) not in have
        ]

    def check_rectangular(self, regions=None):
        missing = self.missing_cells(regions)
        if missing:
            head = ", ".join(f"{r} {y}-W{w:02d}" for r, y, w in missing[:5])
            raise ValidationError(
                f"panel is not rectangular: {len(missing)} missing cells ({head}...)"
            )
        if np.any(self.data["exposure"].to_numpy() <= 0):
            raise ValidationError("panel contains non-positive exposures")


def _read_rows(path, columns):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in columns if c not in header]
        if absent:
            raise ValidationError(f"{path.name}: missing columns {absent}")
        # data rows start on line 2 of the file
        return [(n, row) for n, row in enumerate(reader, start=2)]


def _number(row, key, n, path, kind=float):
    try:
        value = kind(row[key])
    except (TypeError, ValueError):
        raise ValidationError(
            f"{Path(path).name} row {n}: bad {key} value {row[key]!r}"
        ) from None
    if kind is float and not math.isfinite(value):
        raise ValidationError(f"{Path(path).name} row {n}: non-finite {key}")
    return value


def load_panel(
    deaths_file,
    population_file,
    adjacency_file,
    centroids_file,
    weeks_per_year="average",
):
    """Read and validate the four panel input files.

    Parameters
    ----------
    deaths_file, population_file, adjacency_file, centroids_file : path-like
        CSV files with headers ``region,iso_year,iso_week,deaths``,
        ``region,year,pop65plus``, ``region_a,region_b`` and
        ``region,lon,lat``.
    weeks_per_year : {"average", "exact"}
        Divide yearly exposure by 52.18 or by the exact ISO week count.

    Returns
    -------
    graph : RegionGraph
    panel : WeeklyPanel
        Rectangular over regions x ISO weeks of the years present in the
        deaths file.  Row order does not depend on input row order.
    """
    if weeks_per_year not in ("average", "exact"):
        raise ValidationError("weeks_per_year must be 'average' or 'exact'")

    centroids = {}
    for n, row in _read_rows(centroids_file, ("region", "lon", "lat")):
        r = row["region"].strip()
        if r in centroids:
            raise ValidationError(f"{Path(centroids_file).name} row {n}: duplicate region {r}")
        centroids[r] = (
            _number(row, "lon", n, centroids_file),
            _number(row, "lat", n, centroids_file),
        )
    regions = sorted(centroids)
    known = set(regions)

    edges = set()
    for n, row in _read_rows(adjacency_file, ("region_a", "region_b")):
        a, b = row["region_a"].strip(), row["region_b"].strip()
        for x in (a, b):
            if x not in known:
                raise ValidationError(
                    f"{Path(adjacency_file).name} row {n}: unknown region {x}"
                )
        if a == b:
            raise ValidationError(f"{Path(adjacency_file).name} row {n}: self-loop on {a}")
        edges.add((a, b) if a < b else (b, a))
    graph = RegionGraph.from_edges(regions, sorted(edges), centroids)

    pop = {}
    for n, row in _read_rows(population_file, ("region", "year", "pop65plus")):
        r = row["region"].strip()
        if r not in known:
            raise ValidationError(f"{Path(population_file).name} row {n}: unknown region {r}")
        year = _number(row, "year", n, population_file, int)
        if (r, year) in pop:
            raise ValidationError(
                f"{Path(population_file).name} row {n}: duplicate ({r}, {year})"
            )
        value = _number(row, "pop65plus", n, population_file)
        if value < 0:
            raise ValidationError(f"{Path(population_file).name} row {n}: negative population")
        pop[(r, year)] = value

    records = {}
    for n, row in _read_rows(deaths_file, ("region", "iso_year", "iso_week", "deaths")):
        r = row["region"].strip()
        if r not in known:
            raise ValidationError(f"{Path(deaths_file).name} row {n}: unknown region {r}")
        year = _number(row, "iso_year", n, deaths_file, int)
        week = _number(row, "iso_week", n, deaths_file, int)
        if not 1 <= week <= weeks_in_iso_year(year):
            raise ValidationError(
                f"{Path(deaths_file).name} row {n}: ISO year {year} has no week {week}"
            )
        d = _number(row, "deaths", n, deaths_file)
        if d < 0 or d != round(d):
            raise ValidationError(
                f"{Path(deaths_file).name} row {n}: deaths must be a non-negative integer"
            )
        key = (r, year, week)
        if key in records:
            raise ValidationError(f"{Path(deaths_file).name} row {n}: duplicate record {key}")
        records[key] = int(d)

    years = sorted({y for _, y, _ in records})
    rows = []
    missing = []
    for r in regions:
        for y in years:
            if (r, y) not in pop:
                raise ValidationError(f"no population for region {r} in year {y}")
            p_next = pop.get((r, y + 1), pop[(r, y)])
            denom = AVG_WEEKS_PER_YEAR if weeks_per_year == "average" else weeks_in_iso_year(y)
            e = weekly_exposure(pop[(r, y)], p_next, denom)
            for w in range(1, weeks_in_iso_year(y) + 1):
                if (r, y, w) not in records:
                    missing.append((r, y, w))
                    continue
                rows.append((r, y, w, records[(r, y, w)], e))
    if missing:
        head = ", ".join(f"{r} {y}-W{w:02d}" for r, y, w in missing[:5])
        raise ValidationError(f"{len(missing)} missing panel cells: {head}")
    panel = WeeklyPanel(pd.DataFrame(rows, columns=list(WeeklyPanel.COLUMNS)))
    panel.check_rectangular(regions)
    return graph, panel
