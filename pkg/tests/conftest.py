import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from mortenv.baseline import design_matrix
from mortenv.panel import RegionGraph, WeeklyPanel, weeks_in_iso_year

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SPANISH_REGIONS = ["ES111", "ES112", "ES113", "ES114", "ES120"]
SPANISH_EDGES = [("ES111", "ES112"), ("ES111", "ES114"), ("ES112", "ES113"),
                 ("ES112", "ES114"), ("ES112", "ES120"), ("ES113", "ES114")]


def spanish_graph():
    cents = {r: (-8.0 + i, 42.0 + 0.1 * i) for i, r in enumerate(SPANISH_REGIONS)}
    return RegionGraph.from_edges(SPANISH_REGIONS, SPANISH_EDGES, cents)


def line_graph(n):
    regions = [f"R{i}" for i in range(n)]
    edges = [(regions[i], regions[i + 1]) for i in range(n - 1)]
    return RegionGraph.from_edges(regions, edges, {r: (float(i), 40.0) for i, r in enumerate(regions)})


def make_panel(graph, years, beta, exposure=4000.0, seed=0, copy_from=None):
    """Poisson panel drawn from the Serfling intensity ``E exp(z' beta_r)``.

    ``copy_from`` maps a region to another whose deaths it duplicates.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for r in graph.regions:
        for y in years:
            for w in range(1, weeks_in_iso_year(y) + 1):
                rows.append((r, y, w))
    df = pd.DataFrame(rows, columns=["region", "iso_year", "iso_week"])
    Z = design_matrix(df["iso_year"] - years[0], df["iso_week"])
    B = np.array([beta[r] for r in df["region"]])
    e = np.full(len(df), float(exposure))
    mu = e * np.exp(np.einsum("ij,ij->i", Z, B))
    df["deaths"] = rng.poisson(mu)
    df["exposure"] = e
    for dst, src in (copy_from or {}).items():
        df.loc[df.region == dst, "deaths"] = df.loc[df.region == src, "deaths"].to_numpy()
    return WeeklyPanel(df)


def random_beta(graph, seed=0, spread=0.1):
    rng = np.random.default_rng(seed)
    centre = np.array([np.log(0.045), -0.01, 0.03, 0.15, -0.01, 0.03])
    scale = np.array([1.0, 0.1, 0.5, 0.5, 0.5, 0.5]) * spread
    return {r: centre + scale * rng.normal(size=6) for r in graph.regions}


@pytest.fixture
def spanish():
    return spanish_graph()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
