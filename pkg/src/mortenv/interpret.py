"""Interpretation of a fitted multiplier model.

Feature importance aggregates split gains.  Accumulated local effects (ALE)
are estimated on the training rows with quantile bins; the bin of a value
``x`` is the smallest ``k >= 1`` with ``x <= z_k``, so the minimum falls in
the first bin.  Curves are step functions on the edges: the effect at
``x`` is the accumulated value of its bin, centred so that the mean over
the data is zero.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "ImportanceReport",
    "AleCurve",
    "AleSurface",
    "BootstrapResult",
    "feature_importance",
    "ale_edges",
    "ale_main",
    "ale_interaction",
    "ale_regional",
    "bootstrap_ci",
]


class ImportanceReport(dict):
    """Mapping feature -> normalized importance (sums to one)."""

    def to_series(self):
        return pd.Series(self, name="importance", dtype=float)

    def top(self, k):
        s = self.to_series()
        return list(s.sort_values(ascending=False, kind="stable").index[:k])


def feature_importance(model) -> ImportanceReport:
    """Normalized total split gain per feature over all trees.

    ``model`` needs ``feature_gains()`` returning a Series of summed gains.
    """
    gains = model.feature_gains()
    total = float(gains.sum())
    if total <= 0:
        warnings.warn("model has no splits; all importances are zero", RuntimeWarning, stacklevel=2)
        return ImportanceReport({k: 0.0 for k in gains.index})
    return ImportanceReport({k: float(v) / total for k, v in gains.items()})


def _predictor(model, log_scale=False):
    if hasattr(model, "decision_function") and hasattr(model, "trees_"):
        if log_scale:
            return model.decision_function
        return model.predict_multiplier
    if callable(model):
        if log_scale:
            return lambda X: np.log(model(X))
        return model
    raise ValidationError("predictor must be a fitted boosting model or a callable")


def _matrix(rows, feature):
    if isinstance(rows, pd.DataFrame):
        if isinstance(feature, str):
            if feature not in rows.columns:
                raise ValidationError(f"unknown feature {feature!r}")
            j = rows.columns.get_loc(feature)
        else:
            j = int(feature)
        return rows.to_numpy(dtype=float), j, list(rows.columns), str(rows.columns[j])
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2:
        raise ValidationError("rows must be two-dimensional")
    j = int(feature)
    if not 0 <= j < X.shape[1]:
        raise ValidationError(f"feature index {j} out of range")
    return X, j, None, f"x{j}"


def _call(predict, X, columns):
    if columns is not None:
        X = pd.DataFrame(X, columns=columns)
    return np.asarray(predict(X), dtype=float)


def ale_edges(values, K):
    """Distinct empirical quantiles ``z_0 < ... < z_K'`` (``K' <= K``).

    Edges are observed values, so a strictly increasing remap of the data
    remaps the edges in the same way.
    """
    if int(K) != K or K < 1:
        raise ValidationError("K must be a positive integer")
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValidationError("no rows")
    # inverse-ECDF order statistics ceil(n k / K) in exact integer arithmetic
    n, K = v.size, int(K)
    idx = np.maximum(-(-n * np.arange(K + 1) // K), 1) - 1
    edges = np.unique(np.sort(v)[idx])
    if edges.size < 2:
        raise ValidationError("feature is constant; no ALE bins")
    return edges


def _bin_index(values, edges):
    """Smallest k >= 1 with value <= z_k, clipped to 1..K."""
    k = np.searchsorted(edges, values, side="left")
    return np.clip(k, 1, len(edges) - 1)


@dataclass
class AleCurve:
    """Centred first-order ALE of one feature.

    Attributes
    ----------
    feature : str
    edges : ndarray of shape (K + 1,)
    effect : ndarray of shape (K + 1,)
        Centred accumulated effect at each edge; ``effect[0]`` is the value
        before any local effect has been accumulated.
    counts : ndarray of shape (K,)
        Rows per bin.
    """

    feature: str
    edges: np.ndarray
    effect: np.ndarray
    counts: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = _bin_index(x, self.edges)
        out = np.where(x < self.edges[0], self.effect[0], self.effect[k])
        return out.item() if out.ndim == 0 else out

    def to_frame(self):
        return pd.DataFrame({
            "feature": self.feature,
            "edge": self.edges,
            "effect": self.effect,
            "count": np.concatenate([[0], self.counts]),
        })


def ale_main(predictor, rows, feature, K=40, log_scale=False) -> AleCurve:
    """First-order ALE of ``feature`` on the rows.

    Parameters
    ----------
    predictor : fitted PoissonBoostRegressor or callable
        Boosting models are evaluated on the multiplier scale unless
        ``log_scale``; callables are used as given.
    rows : DataFrame or ndarray
    feature : str or int
    K : int
        Requested number of quantile bins (duplicates merged).
    """
    predict = _predictor(predictor, log_scale)
    X, j, cols, name = _matrix(rows, feature)
    edges = ale_edges(X[:, j], K)
    k = _bin_index(X[:, j], edges)
    hi, lo = X.copy(), X.copy()
    hi[:, j] = edges[k]
    lo[:, j] = edges[k - 1]
    diff = _call(predict, hi, cols) - _call(predict, lo, cols)
    nbins = len(edges) - 1
    counts = np.bincount(k - 1, minlength=nbins)
    sums = np.bincount(k - 1, weights=diff, minlength=nbins)
    means = np.divide(sums, counts, out=np.zeros(nbins), where=counts > 0)
    acc = np.concatenate([[0.0], np.cumsum(means)])
    c = float((counts * acc[1:]).sum() / counts.sum())
    return AleCurve(name, edges, acc - c, counts)


@dataclass
class AleSurface:
    """Centred second-order ALE of a feature pair on a grid of cells.

    ``effect[a, b]`` belongs to the cell with upper edges
    ``(edges1[a + 1], edges2[b + 1])``; ``missing`` flags cells without rows.
    """

    features: tuple
    edges1: np.ndarray
    edges2: np.ndarray
    effect: np.ndarray
    counts: np.ndarray

    @property
    def missing(self):
        return self.counts == 0

    def masked(self):
        return np.where(self.missing, np.nan, self.effect)

    def to_frame(self):
        a, b = np.meshgrid(np.arange(self.effect.shape[0]), np.arange(self.effect.shape[1]), indexing="ij")
        return pd.DataFrame({
            "f1": self.features[0],
            "f2": self.features[1],
            "e1": self.edges1[a.ravel() + 1],
            "e2": self.edges2[b.ravel() + 1],
            "effect": self.effect.ravel(),
            "missing": self.missing.ravel(),
        })


def ale_interaction(predictor, rows, feature_k, feature_l, K=20, log_scale=False) -> AleSurface:
    """Second-order ALE of a pair of features.

    Cell means of the second-order finite difference are accumulated over
    both axes (empty cells contribute nothing) and centred by the
    data-weighted mean over cells.
    """
    predict = _predictor(predictor, log_scale)
    X, a, cols, name_a = _matrix(rows, feature_k)
    _, b, _, name_b = _matrix(rows, feature_l)
    if a == b:
        raise ValidationError("interaction needs two distinct features")
    ea, eb = ale_edges(X[:, a], K), ale_edges(X[:, b], K)
    ka, kb = _bin_index(X[:, a], ea), _bin_index(X[:, b], eb)

    def at(va, vb):
        Z = X.copy()
        Z[:, a], Z[:, b] = va, vb
        return _call(predict, Z, cols)

    d2 = (at(ea[ka], eb[kb]) - at(ea[ka - 1], eb[kb])
          - at(ea[ka], eb[kb - 1]) + at(ea[ka - 1], eb[kb - 1]))
    na, nb = len(ea) - 1, len(eb) - 1
    cell = (ka - 1) * nb + (kb - 1)
    counts = np.bincount(cell, minlength=na * nb).reshape(na, nb)
    sums = np.bincount(cell, weights=d2, minlength=na * nb).reshape(na, nb)
    means = np.divide(sums, counts, out=np.zeros((na, nb)), where=counts > 0)
    acc = np.cumsum(np.cumsum(means, axis=0), axis=1)
    c = float((counts * acc).sum() / counts.sum())
    return AleSurface((name_a, name_b), ea, eb, acc - c, counts)


def ale_regional(predictor, rows, regions, region, feature, at_value, K=40, log_scale=False):
    """ALE main effect of ``feature`` re-estimated on one region's rows.

    Returns the step-function value at ``at_value``; values below the
    region's minimum get the effect at the first edge.
    """
    regions = np.asarray(regions)
    mask = regions == region
    if not mask.any():
        raise ValidationError(f"region {region!r} has no rows")
    sub = rows[mask] if isinstance(rows, pd.DataFrame) else np.asarray(rows)[mask]
    return float(ale_main(predictor, sub, feature, K, log_scale)(at_value))


@dataclass
class BootstrapResult:
    """Percentile bootstrap interval per output of a statistic."""

    lo: np.ndarray
    hi: np.ndarray
    replicates: np.ndarray
    n_failed: int
    index: list | None = None

    def to_frame(self):
        return pd.DataFrame({"lo": self.lo, "hi": self.hi}, index=self.index)


_REPLICATE_ERRORS = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)


def _replicate(statistic, rows, n, seed, b):
    idx = np.random.default_rng([int(seed), int(b)]).integers(0, n, size=n)
    sample = rows.iloc[idx].reset_index(drop=True) if isinstance(rows, pd.DataFrame) else rows[idx]
    try:
        out = statistic(sample)
    except _REPLICATE_ERRORS as exc:
        logger.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
    if isinstance(out, dict):
        out = pd.Series(out)
    return out


def bootstrap_ci(statistic, rows, B=200, level=0.95, seed=0, n_jobs=1, max_fail=0.10) -> BootstrapResult:
    """Nonparametric percentile bootstrap.

    Rows are resampled with replacement to the original size; replicate
    ``b`` draws from a generator seeded by ``(seed, b)``.

    Parameters
    ----------
    statistic : callable
        Maps a resampled ``rows`` object to a scalar, array, Series or dict.
    rows : DataFrame or ndarray
    B : int
        Replicates (at least 2).
    level : float
        Coverage in (0, 1).
    max_fail : float
        Largest tolerated fraction of failed replicates.
    """
    if int(B) != B or B < 2:
        raise ValidationError("B must be an integer >= 2")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    if isinstance(rows, pd.DataFrame):
        # resamples repeat rows, so duplicate labels must be allowed
        rows = rows.reset_index(drop=True).set_flags(allows_duplicate_labels=True)
    else:
        rows = np.asarray(rows)
    n = len(rows)
    if n == 0:
        raise ValidationError("no rows to resample")
    outs = Parallel(n_jobs=n_jobs)(delayed(_replicate)(statistic, rows, n, seed, b) for b in range(int(B)))
    ok = [o for o in outs if o is not None]
    n_failed = len(outs) - len(ok)
    if n_failed > max_fail * B:
        raise ValidationError(f"{n_failed} of {B} bootstrap replicates failed")
    index = list(ok[0].index) if isinstance(ok[0], pd.Series) else None
    reps = np.array([np.asarray(o, dtype=float).ravel() for o in ok])
    alpha = 1.0 - level
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], axis=0)
    return BootstrapResult(lo, hi, reps, n_failed, index)
