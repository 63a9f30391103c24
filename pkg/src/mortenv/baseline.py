"""Spatially smoothed Serfling baseline for weekly death counts.

Each region has a Poisson log-linear model with intercept, year trend and two
Fourier harmonics of the week number.  Coefficients of neighbouring regions
are tied by a quadratic graph penalty ``lambda_p * beta_p' S beta_p`` per
coefficient ``p``; the penalised likelihood is maximised by penalised IRLS and
the six smoothing parameters are chosen by minimising the UBRE score.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import gammaln
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import NumericalError, ValidationError
from .panel import AVG_WEEKS_PER_YEAR, RegionGraph, WeeklyPanel, weeks_in_iso_year

logger = logging.getLogger(__name__)

__all__ = [
    "COEF_NAMES",
    "design_vector",
    "design_matrix",
    "build_penalty_matrix",
    "quadratic_penalty",
    "ubre_score",
    "poisson_deviance_terms",
    "BaselineFit",
    "SpatialSerflingBaseline",
    "fit_penalized_glm",
    "predict_baseline",
]

COEF_NAMES = ("intercept", "year", "sin52", "cos52", "sin26", "cos26")
N_COEF = len(COEF_NAMES)
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-4, 8, 13))


def design_vector(t, w, period=AVG_WEEKS_PER_YEAR):
    """Serfling covariates ``(1, t, sin, cos, sin, cos)`` for year index t, week w."""
    a = 2.0 * np.pi * w / period
    return np.array([1.0, t, np.sin(a), np.cos(a), np.sin(2 * a), np.cos(2 * a)])


def design_matrix(t, w, period=AVG_WEEKS_PER_YEAR):
    """Row-stacked :func:`design_vector` for arrays of ``t`` and ``w``."""
    t = np.asarray(t, dtype=float)
    w = np.asarray(w, dtype=float)
    a = 2.0 * np.pi * w / np.asarray(period, dtype=float)
    return np.column_stack([np.ones_like(t), t, np.sin(a), np.cos(a), np.sin(2 * a), np.cos(2 * a)])


def build_penalty_matrix(graph: RegionGraph) -> np.ndarray:
    """Graph Laplacian: ``|N_i|`` on the diagonal, -1 for neighbours, 0 elsewhere."""
    n = len(graph.regions)
    pos = {r: i for i, r in enumerate(graph.regions)}
    S = np.zeros((n, n), dtype=np.int64)
    for r, i in pos.items():
        S[i, i] = len(graph.neighbors[r])
        for s in graph.neighbors[r]:
            S[i, pos[s]] = -1
    return S


def quadratic_penalty(beta_p, S) -> float:
    """``beta_p' S beta_p``."""
    beta_p = np.asarray(beta_p, dtype=float)
    S = np.asarray(S)
    if S.ndim != 2 or S.shape != (beta_p.size, beta_p.size):
        raise ValidationError(
            f"dimension mismatch: vector of length {beta_p.size}, matrix {S.shape}"
        )
    return float(beta_p @ S @ beta_p)


def ubre_score(deviance, n, edf) -> float:
    """UBRE with Poisson scale fixed at one: ``D/n - 1 + 2 edf/n``."""
    if n <= 0:
        raise ValidationError("n must be positive")
    return deviance / n - 1.0 + 2.0 * edf / n


def poisson_deviance_terms(d, mu):
    """Per-row ``2 (d log(d/mu) - (d - mu))`` with ``0 log 0 = 0``."""
    d = np.asarray(d, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, d * np.log(d / mu), 0.0)
    return 2.0 * (t - (d - mu))


@dataclass
class BaselineFit:
    """Result of a penalised baseline fit at the selected smoothing parameters."""

    regions: tuple
    coef: np.ndarray
    lambdas: np.ndarray
    edf: float
    deviance: float
    ubre: float
    n_obs: int
    first_year: int
    weeks_per_year: str = "average"
    converged: bool = True
    n_iter: int = 0
    objective: float = float("nan")
    deviance_trace: list = field(default_factory=list)
    ubre_trace: list = field(default_factory=list)
    fit_years: tuple = ()

    def coef_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.coef, index=list(self.regions), columns=list(COEF_NAMES))

    def to_dict(self) -> dict:
        return {
            "regions": list(self.regions),
            "coef_names": list(COEF_NAMES),
            "coefficients": {r: [float(x) for x in row] for r, row in zip(self.regions, self.coef)},
            "lambdas": [float(x) for x in self.lambdas],
            "edf": float(self.edf),
            "deviance": float(self.deviance),
            "ubre": float(self.ubre),
            "ubre_formula": "D/n - 1 + 2*edf/n (scale 1)",
            "n_obs": int(self.n_obs),
            "first_year": int(self.first_year),
            "year_covariate": "iso_year - first_year",
            "weeks_per_year": self.weeks_per_year,
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "objective": float(self.objective),
            "deviance_trace": [float(x) for x in self.deviance_trace],
            "ubre_trace": self.ubre_trace,
            "fit_years": [int(y) for y in self.fit_years],
        }

    @classmethod
    def from_dict(cls, d) -> "BaselineFit":
        regions = tuple(d["regions"])
        return cls(
            regions=regions,
            coef=np.array([d["coefficients"][r] for r in regions], dtype=float),
            lambdas=np.array(d["lambdas"], dtype=float),
            edf=d["edf"],
            deviance=d["deviance"],
            ubre=d["ubre"],
            n_obs=d["n_obs"],
            first_year=d["first_year"],
            weeks_per_year=d.get("weeks_per_year", "average"),
            converged=d.get("converged", True),
            n_iter=d.get("n_iter", 0),
            objective=d.get("objective", float("nan")),
            deviance_trace=d.get("deviance_trace", []),
            ubre_trace=d.get("ubre_trace", []),
            fit_years=tuple(d.get("fit_years", ())),
        )

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "BaselineFit":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def linear_predictor(self, region_idx, iso_year, iso_week):
        iso_year = np.asarray(iso_year)
        period = _period(iso_year, self.weeks_per_year)
        Z = design_matrix(iso_year - self.first_year, iso_week, period)
        return np.einsum("ij,ij->i", Z, self.coef[np.asarray(region_idx)])


def _period(iso_year, weeks_per_year):
    if weeks_per_year == "average":
        return AVG_WEEKS_PER_YEAR
    if weeks_per_year == "exact":
        return np.array([weeks_in_iso_year(int(y)) for y in np.atleast_1d(iso_year)], dtype=float)
    raise ValidationError("weeks_per_year must be 'average' or 'exact'")


class _Problem:
    """Arrays of a rectangular panel arranged for penalised IRLS."""

    def __init__(self, panel: WeeklyPanel, graph: RegionGraph, weeks_per_year, first_year=None):
        df = panel.data
        pos = {r: i for i, r in enumerate(graph.regions)}
        unknown = set(df["region"]) - set(pos)
        if unknown:
            raise ValidationError(f"panel regions not in graph: {sorted(unknown)}")
        absent = set(pos) - set(df["region"])
        if absent:
            raise ValidationError(f"graph regions without panel data: {sorted(absent)}")
        if np.any(df["exposure"].to_numpy() <= 0):
            raise ValidationError("zero or negative exposure cell in baseline input")
        self.first_year = int(df["iso_year"].min()) if first_year is None else int(first_year)
        self.region_idx = df["region"].map(pos).to_numpy()
        years = df["iso_year"].to_numpy()
        self.Z = design_matrix(years - self.first_year, df["iso_week"].to_numpy(),
                               _period(years, weeks_per_year))
        self.d = df["deaths"].to_numpy(dtype=float)
        self.log_e = np.log(df["exposure"].to_numpy(dtype=float))
        self.R = len(graph.regions)
        self.S = build_penalty_matrix(graph).astype(float)
        self.n = len(df)
        self.lgd = float(gammaln(self.d + 1.0).sum())
        self.ZZ = np.einsum("ij,ik->ijk", self.Z, self.Z)

    def eta(self, coef):
        return np.einsum("ij,ij->i", self.Z, coef[self.region_idx])

    def objective(self, coef, lambdas):
        """Negative log-likelihood plus penalty, and the unpenalised deviance."""
        eta = self.eta(coef)
        mu = np.exp(self.log_e + eta)
        nll = float(np.sum(mu - self.d * (self.log_e + eta)) + self.lgd)
        pen = float(sum(lam * coef[:, p] @ self.S @ coef[:, p] for p, lam in enumerate(lambdas)))
        dev = float(np.sum(poisson_deviance_terms(self.d, mu)))
        return nll + pen, dev, mu

    def start(self):
        coef = np.zeros((self.R, N_COEF))
        e = np.exp(self.log_e)
        for r in range(self.R):
            m = self.region_idx == r
            coef[r, 0] = math.log(max(self.d[m].sum(), 0.5) / e[m].sum())
        return coef

    def penalty_matrix(self, lambdas):
        return np.kron(self.S, np.diag(np.asarray(lambdas, dtype=float)))

    def blocks(self, mu):
        """Block-diagonal ``X'WX`` assembled as a dense matrix."""
        B = np.zeros((self.R, N_COEF, N_COEF))
        np.add.at(B, self.region_idx, mu[:, None, None] * self.ZZ)
        return linalg.block_diag(*B)

    def score_rhs(self, mu, eta):
        # X'W z with working response z = eta + (d - mu)/mu
        wz = mu * eta + (self.d - mu)
        g = np.zeros((self.R, N_COEF))
        np.add.at(g, self.region_idx, wz[:, None] * self.Z)
        return g.ravel()


def _pirls(prob: _Problem, lambdas, coef0=None, tol=1e-8, max_iter=100):
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValidationError("smoothing parameters must be non-negative")
    P2 = 2.0 * prob.penalty_matrix(lambdas)
    coef = prob.start() if coef0 is None else np.array(coef0, dtype=float)
    obj, dev, mu = prob.objective(coef, lambdas)
    trace = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = prob.eta(coef)
        A = prob.blocks(mu) + P2
        rhs = prob.score_rhs(mu, eta)
        try:
            new = linalg.solve(A, rhs, assume_a="sym").reshape(prob.R, N_COEF)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"penalised IRLS solve failed at iteration {it}: {exc}; deviance log {trace}") from None
        step = new - coef
        new_obj, new_dev, new_mu = prob.objective(new, lambdas)
        halvings = 0
        while not (np.isfinite(new_obj) and new_obj <= obj + 1e-12 * abs(obj)):
            halvings += 1
            if halvings > 30:
                break
            step = step / 2.0
            new = coef + step
            new_obj, new_dev, new_mu = prob.objective(new, lambdas)
        if not np.isfinite(new_obj) or not np.isfinite(new_dev):
            raise NumericalError(f"penalised IRLS diverged at iteration {it}; deviance log {trace}")
        change = abs(new_obj - obj) / (abs(new_obj) + 0.1)
        coef, obj, dev, mu = new, new_obj, new_dev, new_mu
        trace.append(dev)
        if change < tol:
            converged = True
            break
    # effective degrees of freedom: trace of (X'WX + 2 S_lambda)^-1 X'WX
    XtWX = prob.blocks(mu)
    F = linalg.solve(XtWX + P2, XtWX, assume_a="sym")
    edf = float(np.trace(F))
    return {
        "coef": coef,
        "objective": obj,
        "deviance": dev,
        "edf": edf,
        "ubre": ubre_score(dev, prob.n, edf),
        "converged": converged,
        "n_iter": it,
        "trace": trace,
    }


class SpatialSerflingBaseline(BaseEstimator):
    """Penalised Poisson Serfling baseline with UBRE-selected smoothing.

    Parameters
    ----------
    lambdas : sequence of 6 floats, optional
        Fixed smoothing parameters; skips the UBRE search when given.
    lambda_grid : sequence of float, default=10**(-4..8) (13 points)
        Candidate values shared by all six coefficients.
    n_passes : int, default=2
        Coordinate-wise sweeps over the six smoothing parameters.
    weeks_per_year : {"average", "exact"}, default="average"
        Fourier period 52.18 or the exact ISO week count of each year.
    tol : float, default=1e-8
        Relative change of the penalised objective that stops IRLS.
    max_iter : int, default=100

    Attributes
    ----------
    fit_ : BaselineFit
    coef_ : ndarray of shape (n_regions, 6)
    lambdas_ : ndarray of shape (6,)
    """

    def __init__(self, lambdas=None, lambda_grid=DEFAULT_LAMBDA_GRID, n_passes=2,
                 weeks_per_year="average", tol=1e-8, max_iter=100):
        self.lambdas = lambdas
        self.lambda_grid = lambda_grid
        self.n_passes = n_passes
        self.weeks_per_year = weeks_per_year
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, panel: WeeklyPanel, graph: RegionGraph):
        prob = _Problem(panel, graph, self.weeks_per_year)
        ubre_trace = []
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=float)
            if lam.shape != (N_COEF,):
                raise ValidationError("lambdas must have 6 entries")
            best = _pirls(prob, lam, tol=self.tol, max_iter=self.max_iter)
            ubre_trace.append({"pass": 0, "coef": None, "lambdas": lam.tolist(),
                               "ubre": best["ubre"], "deviance": best["deviance"], "edf": best["edf"]})
        else:
            grid = [float(x) for x in self.lambda_grid]
            if not grid:
                raise ValidationError("empty lambda grid")
            cache = {}

            def evaluate(lam, warm):
                key = tuple(lam)
                if key not in cache:
                    cache[key] = _pirls(prob, lam, coef0=warm, tol=self.tol, max_iter=self.max_iter)
                return cache[key]

            lam = np.full(N_COEF, grid[len(grid) // 2])
            best = evaluate(lam, None)
            for sweep in range(1, self.n_passes + 1):
                for p in range(N_COEF):
                    scores = []
                    for cand in grid:
                        trial = lam.copy()
                        trial[p] = cand
                        res = evaluate(trial, best["coef"])
                        scores.append(res["ubre"])
                        ubre_trace.append({"pass": sweep, "coef": COEF_NAMES[p], "lambdas": trial.tolist(),
                                           "ubre": res["ubre"], "deviance": res["deviance"], "edf": res["edf"]})
                    lam[p] = grid[int(np.argmin(scores))]
                    best = evaluate(lam, best["coef"])
            logger.info("selected smoothing parameters %s (UBRE %.6g)", lam, best["ubre"])
        if not best["converged"]:
            logger.warning("penalised IRLS stopped after %d iterations without converging", best["n_iter"])
        self.fit_ = BaselineFit(
            regions=tuple(graph.regions),
            coef=best["coef"],
            lambdas=np.asarray(lam, dtype=float),
            edf=best["edf"],
            deviance=best["deviance"],
            ubre=best["ubre"],
            n_obs=prob.n,
            first_year=prob.first_year,
            weeks_per_year=self.weeks_per_year,
            converged=best["converged"],
            n_iter=best["n_iter"],
            objective=best["objective"],
            deviance_trace=best["trace"],
            ubre_trace=ubre_trace,
            fit_years=tuple(panel.years),
        )
        self.coef_ = self.fit_.coef
        self.lambdas_ = self.fit_.lambdas
        self.regions_ = tuple(graph.regions)
        return self

    def objective(self, coef, panel, graph, lambdas=None):
        """Penalised negative log-likelihood of ``coef`` on ``panel``."""
        check_is_fitted(self, "fit_")
        prob = _Problem(panel, graph, self.weeks_per_year, first_year=self.fit_.first_year)
        lam = self.lambdas_ if lambdas is None else lambdas
        return prob.objective(np.asarray(coef, dtype=float), lam)[0]

    def predict(self, panel: WeeklyPanel) -> np.ndarray:
        """Expected baseline deaths ``E exp(beta' z)`` for every panel row."""
        check_is_fitted(self, "fit_")
        return predict_panel(self.fit_, panel)

    def predict_one(self, region, iso_year, iso_week, exposure):
        check_is_fitted(self, "fit_")
        return predict_baseline(self.fit_, region, iso_year, iso_week, exposure)


def fit_penalized_glm(panel, graph, lambda_grid=DEFAULT_LAMBDA_GRID, **kwargs) -> BaselineFit:
    """Functional form of :class:`SpatialSerflingBaseline`; returns the fit."""
    return SpatialSerflingBaseline(lambda_grid=lambda_grid, **kwargs).fit(panel, graph).fit_


def predict_baseline(fit: BaselineFit, region, iso_year, iso_week, exposure) -> float:
    """Expected baseline deaths for one region-week."""
    if region not in fit.regions:
        raise ValidationError(f"unknown region {region!r}")
    if exposure < 0:
        raise ValidationError("exposure must be non-negative")
    eta = fit.linear_predictor([fit.regions.index(region)], [iso_year], [iso_week])[0]
    return float(exposure * math.exp(eta))


def predict_panel(fit: BaselineFit, panel: WeeklyPanel) -> np.ndarray:
    df = panel.data
    pos = {r: i for i, r in enumerate(fit.regions)}
    unknown = set(df["region"]) - set(pos)
    if unknown:
        raise ValidationError(f"unknown regions {sorted(unknown)}")
    eta = fit.linear_predictor(df["region"].map(pos).to_numpy(), df["iso_year"].to_numpy(),
                               df["iso_week"].to_numpy())
    return df["exposure"].to_numpy(dtype=float) * np.exp(eta)
