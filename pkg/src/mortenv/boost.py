"""Poisson gradient boosting with a known offset.

Trees are fitted exact-greedily to Newton targets ``-g/h`` with hessian
weights ``h``, where for the Poisson loss with offset ``b``

    g = b * exp(f) - d,    h = b * exp(f).

The ensemble starts from ``f = 0`` (multiplier one on the offset) and adds
``eta * tree`` each round.  Leaves hold ``-sum(g)/sum(h)``; split gain is the
reduction of the hessian-weighted squared error of the targets.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import gammaln
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.model_selection import ParameterGrid
from sklearn.utils.validation import check_is_fitted

from .exceptions import NumericalError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "BoostParams",
    "RegressionTree",
    "PoissonBoostRegressor",
    "poisson_loss",
    "grad_hess",
    "fit_tree",
    "boost_fit",
    "cross_validate",
    "year_folds",
    "TUNED_PARAMS",
    "TUNED_CV_GRID",
]

# relative gain below which a split is treated as no improvement
_GAIN_RTOL = 1e-12


def poisson_loss(d, b, f):
    """Negative Poisson log-likelihood ``b e^f - d (f + log b) + log d!``."""
    d = np.asarray(d, dtype=float)
    b = np.asarray(b, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(b <= 0):
        raise ValidationError("offsets must be positive")
    out = b * np.exp(f) - d * (f + np.log(b)) + gammaln(d + 1.0)
    return out.item() if out.ndim == 0 else out


def grad_hess(d, b, f):
    """First and second derivative of :func:`poisson_loss` in ``f``."""
    mu = np.asarray(b, dtype=float) * np.exp(np.asarray(f, dtype=float))
    g = mu - np.asarray(d, dtype=float)
    if mu.ndim == 0:
        return g.item(), mu.item()
    return g, mu


@dataclass(frozen=True)
class BoostParams:
    """Tuning parameters of the boosting algorithm."""

    nrounds: int = 490
    eta: float = 0.01
    max_depth: int = 7
    subsample: float = 0.75
    colsample_bytree: float = 0.5
    min_child_weight: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if int(self.nrounds) != self.nrounds or self.nrounds < 1:
            raise ValidationError("nrounds must be a positive integer")
        if not 0 <= self.eta <= 1:
            raise ValidationError("eta must lie in [0, 1]")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValidationError("max_depth must be a positive integer")
        for name in ("subsample", "colsample_bytree"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must lie in (0, 1]")
        if self.min_child_weight < 0:
            raise ValidationError("min_child_weight must be non-negative")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


TUNED_PARAMS = BoostParams()
TUNED_CV_GRID = {
    "nrounds": list(range(10, 5001, 10)),
    "eta": [0.01, 0.05, 0.1],
    "min_child_weight": [10, 100, 1000],
    "subsample": [0.5, 0.75],
    "colsample_bytree": [0.5, 0.75],
    "max_depth": [1, 3, 5, 7, 9],
}


class RegressionTree:
    """Binary regression tree stored as flat node arrays.

    Internal node ``i`` sends rows with ``x[feature[i]] < threshold[i]`` to
    ``left[i]``; leaves have ``feature == -1``.  ``gain`` is the loss
    reduction of the split (half the weighted squared-error reduction) and
    ``cover`` the hessian sum of the training rows reaching the node.
    """

    def __init__(self, feature, threshold, left, right, value, gain, cover):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.gain = np.asarray(gain, dtype=float)
        self.cover = np.asarray(cover, dtype=float)

    @classmethod
    def leaf(cls, value, cover=0.0):
        return cls([-1], [np.nan], [-1], [-1], [value], [0.0], [cover])

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def depth(self):
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def split_gains(self, n_features):
        out = np.zeros(n_features)
        internal = self.feature >= 0
        np.add.at(out, self.feature[internal], self.gain[internal])
        return out

    def to_dict(self, i=0):
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i]), "cover": float(self.cover[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "gain": float(self.gain[i]),
            "cover": float(self.cover[i]),
            "value": float(self.value[i]),
            "left": self.to_dict(self.left[i]),
            "right": self.to_dict(self.right[i]),
        }

    @classmethod
    def from_dict(cls, d):
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "gain", "cover")}

        def add(node):
            i = len(cols["feature"])
            for k in cols:
                cols[k].append(None)
            if "leaf" in node:
                cols["feature"][i], cols["threshold"][i] = -1, np.nan
                cols["left"][i] = cols["right"][i] = -1
                cols["value"][i], cols["gain"][i] = node["leaf"], 0.0
                cols["cover"][i] = node.get("cover", 0.0)
                return i
            cols["feature"][i], cols["threshold"][i] = node["feature"], node["threshold"]
            cols["value"][i], cols["gain"][i] = node.get("value", 0.0), node["gain"]
            cols["cover"][i] = node.get("cover", 0.0)
            cols["left"][i] = add(node["left"])
            cols["right"][i] = add(node["right"])
            return i

        add(d)
        return cls(**cols)

    def structure(self):
        """Nested tuples describing splits and leaves, for comparisons."""
        def walk(i):
            if self.feature[i] < 0:
                return ("leaf", float(self.value[i]))
            return (int(self.feature[i]), float(self.threshold[i]), walk(self.left[i]), walk(self.right[i]))
        return walk(0)


def _best_split(Xn, t, w, features, min_child_weight):
    """Best (gain, feature, threshold) over the columns ``features`` of ``Xn``."""
    H = w.sum()
    S = (w * t).sum()
    scale = max(float((w * t * t).sum()), 1e-300)
    parent = S * S / H
    best = (0.0, -1, np.nan)
    V = Xn[:, features]
    order = np.argsort(V, axis=0, kind="stable")
    vs = np.take_along_axis(V, order, axis=0)
    HL = np.cumsum(w[order], axis=0)[:-1]
    SL = np.cumsum((w * t)[order], axis=0)[:-1]
    HR = H - HL
    SR = S - SL
    valid = (vs[1:] > vs[:-1]) & (HL >= min_child_weight) & (HR >= min_child_weight)
    with np.errstate(divide="ignore", invalid="ignore"):
        gains = np.where(valid, SL * SL / HL + SR * SR / HR - parent, -np.inf)
    for j, f in enumerate(features):
        k = int(np.argmax(gains[:, j]))
        g = gains[k, j]
        # ties resolved towards the lower feature index and smaller threshold
        if g > best[0] and g > _GAIN_RTOL * scale:
            lo, hi = vs[k, j], vs[k + 1, j]
            thr = 0.5 * (lo + hi)
            if not lo < thr <= hi:
                thr = hi
            best = (float(g), int(f), float(thr))
    return best


def fit_tree(X, targets, weights, max_depth, min_child_weight=0.0, features=None) -> RegressionTree:
    """Exact-greedy weighted least-squares regression tree.

    Parameters
    ----------
    X : ndarray of shape (n, q)
    targets : ndarray of shape (n,)
        Newton targets ``-g/h``.
    weights : ndarray of shape (n,)
        Hessians ``h`` (positive).
    max_depth : int
    min_child_weight : float
        Minimum hessian sum in each child of a split.
    features : sequence of int, optional
        Columns eligible for splitting (all by default).
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("need a non-empty 2-d feature array")
    if np.any(w <= 0):
        raise ValidationError("weights must be positive")
    features = np.arange(X.shape[1]) if features is None else np.sort(np.asarray(features, dtype=np.int64))

    nodes = {k: [] for k in ("feature", "threshold", "left", "right", "value", "gain", "cover")}

    def new_node():
        for k in nodes:
            nodes[k].append(None)
        return len(nodes["feature"]) - 1

    def grow(idx, depth):
        i = new_node()
        wi, ti = w[idx], t[idx]
        H = wi.sum()
        nodes["value"][i] = float((wi * ti).sum() / H)
        nodes["cover"][i] = float(H)
        split = (0.0, -1, np.nan)
        if depth < max_depth and len(idx) > 1:
            split = _best_split(X[idx], ti, wi, features, min_child_weight)
        gain, f, thr = split
        if f < 0:
            nodes["feature"][i], nodes["threshold"][i] = -1, np.nan
            nodes["left"][i] = nodes["right"][i] = -1
            nodes["gain"][i] = 0.0
            return i
        nodes["feature"][i], nodes["threshold"][i] = f, thr
        nodes["gain"][i] = 0.5 * gain
        mask = X[idx, f] < thr
        nodes["left"][i] = grow(idx[mask], depth + 1)
        nodes["right"][i] = grow(idx[~mask], depth + 1)
        return i

    grow(np.arange(len(X)), 0)
    return RegressionTree(**nodes)


def _as_matrix(X, feature_names=None):
    if isinstance(X, pd.DataFrame):
        if feature_names is not None and list(X.columns) != list(feature_names):
            raise ValidationError("feature columns do not match the model schema")
        return X.to_numpy(dtype=float), list(map(str, X.columns))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if feature_names is not None and X.shape[1] != len(feature_names):
        raise ValidationError(
            f"expected {len(feature_names)} features, got {X.shape[1]}"
        )
    return X, None


def _round_rng(seed, round_):
    return np.random.default_rng([int(seed), int(round_)])


class PoissonBoostRegressor(RegressorMixin, BaseEstimator):
    """Gradient-boosted trees for Poisson counts with a multiplicative offset.

    ``predict`` returns expected counts ``offset * phi(x)`` when an offset is
    given and the multiplier ``phi(x) = exp(eta * sum(trees))`` otherwise.

    Parameters
    ----------
    nrounds, eta, max_depth, subsample, colsample_bytree, min_child_weight
        See :class:`BoostParams`; defaults are the tuned values 490, 0.01, 7,
        0.75, 0.5 and 1000.
    seed : int, default=0
        Row and column subsampling of round ``n`` uses a generator seeded by
        ``(seed, n)``.

    Attributes
    ----------
    trees_ : list of RegressionTree
    loss_trace_ : ndarray of shape (nrounds + 1,)
        Mean training loss before the first and after every round.
    feature_names_in_ : ndarray of str
    """

    def __init__(self, nrounds=490, eta=0.01, max_depth=7, subsample=0.75,
                 colsample_bytree=0.5, min_child_weight=1000.0, seed=0):
        self.nrounds = nrounds
        self.eta = eta
        self.max_depth = max_depth
        self.subsample = subsample
        self.colsample_bytree = colsample_bytree
        self.min_child_weight = min_child_weight
        self.seed = seed

    @property
    def params(self) -> BoostParams:
        return BoostParams(**self.get_params())

    def fit(self, X, y, offset, years=None):
        """Fit on rows ``X`` with counts ``y`` and offsets ``offset``.

        ``years`` (optional, aligned with rows) is recorded as ``fit_years_``.
        """
        params = self.params
        X, names = _as_matrix(X)
        d = np.asarray(y, dtype=float)
        b = np.asarray(offset, dtype=float)
        if not (len(X) == len(d) == len(b)):
            raise ValidationError("X, y and offset must have the same number of rows")
        if np.any(b <= 0) or not np.all(np.isfinite(b)):
            raise ValidationError("offsets must be positive and finite")
        if np.any(d < 0):
            raise ValidationError("counts must be non-negative")
        n, q = X.shape
        n_rows = max(1, int(round(params.subsample * n)))
        n_cols = max(1, int(round(params.colsample_bytree * q)))
        f = np.zeros(n)
        trees = []
        trace = [float(np.mean(poisson_loss(d, b, f)))]
        for rnd in range(1, params.nrounds + 1):
            g, h = grad_hess(d, b, f)
            rng = _round_rng(params.seed, rnd)
            rows = np.arange(n) if n_rows == n else np.sort(rng.choice(n, n_rows, replace=False))
            cols = np.arange(q) if n_cols == q else np.sort(rng.choice(q, n_cols, replace=False))
            tree = fit_tree(X[rows], -g[rows] / h[rows], h[rows], params.max_depth,
                            params.min_child_weight, cols)
            f = f + params.eta * tree.predict(X)
            loss = float(np.mean(poisson_loss(d, b, f)))
            if not np.isfinite(loss):
                raise NumericalError(f"training loss is not finite in boosting round {rnd}")
            trees.append(tree)
            trace.append(loss)
        self.trees_ = trees
        self.loss_trace_ = np.array(trace)
        self.train_log_multiplier_ = f
        self.n_features_in_ = q
        self.fit_years_ = () if years is None else tuple(sorted(set(int(y) for y in np.asarray(years))))
        self.feature_names_in_ = np.array(names if names is not None else [f"x{j}" for j in range(q)], dtype=object)
        return self

    def decision_function(self, X):
        """Log-multiplier ``eta * sum(tree(x))``."""
        check_is_fitted(self, "trees_")
        X, _ = _as_matrix(X, self.feature_names_in_)
        out = np.zeros(len(X))
        for tree in self.trees_:
            out += tree.predict(X)
        return self.eta * out

    def staged_decision_function(self, X, rounds):
        """Log-multipliers after each number of rounds in ``rounds``."""
        check_is_fitted(self, "trees_")
        X, _ = _as_matrix(X, self.feature_names_in_)
        wanted = sorted(set(int(r) for r in rounds))
        if wanted and (wanted[0] < 0 or wanted[-1] > len(self.trees_)):
            raise ValidationError("requested rounds exceed the fitted ensemble")
        out = {}
        acc = np.zeros(len(X))
        if 0 in wanted:
            out[0] = acc.copy()
        for k, tree in enumerate(self.trees_, start=1):
            acc += tree.predict(X)
            if k in wanted:
                out[k] = self.eta * acc
        return out

    def predict_multiplier(self, X):
        return np.exp(self.decision_function(X))

    def predict(self, X, offset=None):
        phi = self.predict_multiplier(X)
        if offset is None:
            return phi
        return np.asarray(offset, dtype=float) * phi

    def score(self, X, y, offset=None, sample_weight=None):
        """Negative mean Poisson loss (higher is better)."""
        if offset is None:
            raise ValidationError("scoring a Poisson offset model needs the offset")
        return -float(np.mean(poisson_loss(y, offset, self.decision_function(X))))

    def feature_gains(self):
        check_is_fitted(self, "trees_")
        total = np.zeros(self.n_features_in_)
        for tree in self.trees_:
            total += tree.split_gains(self.n_features_in_)
        return pd.Series(total, index=list(self.feature_names_in_))

    def to_dict(self):
        check_is_fitted(self, "trees_")
        return {
            "params": self.params.as_dict(),
            "eta": float(self.eta),
            "seed": int(self.seed),
            "schema": [str(x) for x in self.feature_names_in_],
            "loss_trace": [float(x) for x in self.loss_trace_],
            "init_log_prediction": 0.0,
            "trees": [t.to_dict() for t in self.trees_],
            "fit_years": [int(y) for y in getattr(self, "fit_years_", ())],
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d):
        model = cls(**d["params"])
        model.trees_ = [RegressionTree.from_dict(t) for t in d["trees"]]
        model.loss_trace_ = np.array(d["loss_trace"])
        model.feature_names_in_ = np.array(d["schema"], dtype=object)
        model.n_features_in_ = len(d["schema"])
        model.fit_years_ = tuple(d.get("fit_years", ()))
        return model

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def boost_fit(features, offsets, deaths, params: BoostParams = TUNED_PARAMS) -> PoissonBoostRegressor:
    """Fit :class:`PoissonBoostRegressor` with the given parameter set."""
    return PoissonBoostRegressor(**params.as_dict()).fit(features, deaths, offsets)


def year_folds(years):
    """One (train, holdout) index pair per distinct year, holdout = that year."""
    years = np.asarray(years)
    uniq = np.unique(years)
    if len(uniq) < 2:
        raise ValidationError("cross-validation needs at least two years")
    return [(int(y), np.flatnonzero(years != y), np.flatnonzero(years == y)) for y in uniq]


def _cv_task(X, d, b, train, hold, params, rounds):
    m = PoissonBoostRegressor(**params).fit(X[train], d[train], b[train])
    staged = m.staged_decision_function(X[hold], rounds)
    return {r: float(np.mean(poisson_loss(d[hold], b[hold], f))) for r, f in staged.items()}


def cross_validate(features, offsets, deaths, years, param_grid, n_jobs=1, base_params=None):
    """Leave-one-year-out tuning by mean holdout Poisson loss.

    The offsets are held fixed across folds.  Parameter sets that differ only
    in ``nrounds`` share one fit evaluated at every requested round count.

    Parameters
    ----------
    features : DataFrame or ndarray
    offsets, deaths, years : array-like
        Aligned with the rows of ``features``.
    param_grid : dict of lists, or list of such dicts
        Unspecified parameters come from ``base_params`` (tuned defaults).

    Returns
    -------
    best : BoostParams
    results : DataFrame
        One row per parameter combination, per-fold and mean losses, sorted
        in grid order.
    """
    grid = list(ParameterGrid(param_grid))
    if not grid or not param_grid:
        raise ValidationError("empty parameter grid")
    base = (base_params or TUNED_PARAMS).as_dict()
    combos = [BoostParams(**{**base, **p}) for p in grid]
    X, _ = _as_matrix(features)
    d = np.asarray(deaths, dtype=float)
    b = np.asarray(offsets, dtype=float)
    folds = year_folds(years)

    groups = {}
    for c in combos:
        key = tuple(sorted((k, v) for k, v in c.as_dict().items() if k != "nrounds"))
        groups.setdefault(key, set()).add(c.nrounds)

    jobs = []
    for key, rounds in groups.items():
        params = dict(key)
        params["nrounds"] = max(rounds)
        for year, train, hold in folds:
            jobs.append((key, year, train, hold, params, sorted(rounds)))
    outs = Parallel(n_jobs=n_jobs)(
        delayed(_cv_task)(X, d, b, train, hold, params, rounds)
        for _, _, train, hold, params, rounds in jobs
    )
    losses = {}
    for (key, year, *_), out in zip(jobs, outs):
        for r, loss in out.items():
            losses[(key, r, year)] = loss

    rows = []
    for c in combos:
        key = tuple(sorted((k, v) for k, v in c.as_dict().items() if k != "nrounds"))
        row = c.as_dict()
        fold_losses = [losses[(key, c.nrounds, y)] for y, _, _ in folds]
        for (y, _, _), loss in zip(folds, fold_losses):
            row[f"loss_{y}"] = loss
        row["mean_loss"] = float(np.mean(fold_losses))
        rows.append(row)
    results = pd.DataFrame(rows)
    best = combos[int(np.argmin(results["mean_loss"].to_numpy()))]
    logger.info("best parameters %s (mean holdout loss %.6g)", best, results["mean_loss"].min())
    return best, results
