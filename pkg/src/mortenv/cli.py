"""Command-line front end: ``mortenv <subcommand> --config <path>``.

Every subcommand reads a flat configuration file, writes its artifacts into
``paths.output_dir`` together with ``manifest_<subcommand>.json`` (input
hashes, config echo, library versions) and, on failure, ``error.json``.
Exit status is 0 on success, 1 for invalid input and 2 for numerical
failures.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import joblib
import numpy as np
import pandas as pd
import scipy
import sklearn

from . import __version__
from .analysis import backtest, deviance_reduction, harvesting_grid, model_frame, poisson_deviance
from .baseline import BaselineFit, SpatialSerflingBaseline, DEFAULT_LAMBDA_GRID, predict_panel
from .boost import BoostParams, TUNED_CV_GRID, PoissonBoostRegressor, cross_validate
from .config import RunConfig, load_config
from .exceptions import NumericalError, ValidationError
from .features import EnvironmentalFeatureBuilder
from .interpret import ale_interaction, ale_main, ale_regional, bootstrap_ci, feature_importance
from .panel import load_panel
from .spatial import build_population_weights, read_grid_csv, read_mapping, read_pop_grid, regional_daily
from .synth import SyntheticTruth, synth_generate, write_fixture

logger = logging.getLogger("mortenv")

SUBCOMMANDS = ("ingest", "features", "baseline", "boost", "cv", "interpret", "harvest", "backtest", "synth")

INPUT_FILES = {
    "deaths": "deaths.csv",
    "population": "population.csv",
    "adjacency": "adjacency.csv",
    "centroids": "centroids.csv",
    "grid_daily": "grid_daily.csv",
    "grid_hourly": "grid_hourly.csv",
    "pop_grid": "pop_grid.csv",
    "mapping": "mapping.csv",
}
_KEYS = ["region", "iso_year", "iso_week"]
# named sub-streams of the run seed
_STREAM_IDS = {"boost": 11, "bootstrap": 12}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    return {
        "mortenv": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "joblib": joblib.__version__,
    }


def _substream(seed, name):
    return int(np.random.SeedSequence([int(seed), _STREAM_IDS[name]]).generate_state(1)[0])


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Bookkeeping of one subcommand: inputs read, outputs written."""

    def __init__(self, name, cfg: RunConfig, out_dir: Path, jobs=1):
        self.name = name
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.jobs = jobs
        self.inputs = {}
        self.outputs = {}

    def input(self, key, path):
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"missing required file {path.name} ({path})")
        self.inputs[key] = path
        return path

    def artifact(self, filename):
        """Path of an artifact produced by an earlier subcommand."""
        return self.input(filename, self.out_dir / filename)

    def raw(self, key):
        override = self.cfg.get(f"paths.{key}")
        if override is not None:
            return self.input(key, self.cfg.get_path(f"paths.{key}"))
        return self.input(key, _input_dir(self.cfg) / INPUT_FILES[key])

    def track(self, filename):
        p = self.out_dir / filename
        self.outputs[filename] = p
        return p

    def csv(self, frame, filename):
        p = self.track(filename)
        frame.to_csv(p, index=False, lineterminator="\n")
        return p

    def json(self, obj, filename):
        p = self.track(filename)
        _write_json(obj, p)
        return p

    def manifest(self):
        manifest = {
            "subcommand": self.name,
            "inputs": {k: {"file": p.name, "sha256": _sha256(p)} for k, p in sorted(self.inputs.items())},
            "outputs": {k: _sha256(p) for k, p in sorted(self.outputs.items())},
            "config": self.cfg.echo(),
            "versions": _versions(),
        }
        _write_json(manifest, self.out_dir / f"manifest_{self.name}.json")


def _input_dir(cfg):
    return cfg.get_path("paths.input_dir", "inputs")


def _output_dir(cfg):
    return cfg.get_path("paths.output_dir", "outputs")


# ---------------------------------------------------------------- helpers

def _graph_panel(run):
    cfg = run.cfg
    return load_panel(run.raw("deaths"), run.raw("population"), run.raw("adjacency"), run.raw("centroids"),
                      weeks_per_year=cfg.get_str("data.weeks_per_year", "average"))


def _calibration_years(cfg, years):
    chosen = cfg.get_list("data.calibration_years", int)
    if chosen is None:
        return list(years)
    absent = sorted(set(chosen) - set(years))
    if absent:
        raise ValidationError(f"calibration years {absent} not in the panel")
    return sorted(chosen)


def _write_daily(run, daily):
    parts = []
    for key in sorted(daily):
        frame = daily[key]
        long = frame.reset_index().melt(id_vars="date", var_name="region", value_name="value")
        long.insert(0, "series", key)
        parts.append(long)
    out = pd.concat(parts, ignore_index=True)
    out["date"] = pd.DatetimeIndex(out["date"]).strftime("%Y-%m-%d")
    run.csv(out.sort_values(["series", "region", "date"], kind="stable"), "regional_daily.csv")


def _read_daily(path):
    df = pd.read_csv(path, dtype={"region": str})
    out = {}
    for key, g in df.groupby("series", sort=True):
        wide = g.pivot(index="date", columns="region", values="value").sort_index()
        wide.index = pd.DatetimeIndex(pd.to_datetime(wide.index), name="date")
        wide.columns.name = None
        out[key] = wide
    return out


def _builder_params(cfg):
    return {
        "lag": cfg.get_int("features.lag", 1),
        "pollutant_stat": cfg.get_str("features.pollutant_stat", "avg"),
        "zero_baseline": tuple(cfg.get_list("features.zero_baseline", str, ["precip"])),
        "days_per_year": cfg.get_str("features.days_per_year", "average"),
    }


def _read_features(path):
    df = pd.read_csv(path, dtype={"region": str})
    return df.set_index(_KEYS)


def _boost_params(cfg):
    defaults = BoostParams().as_dict()
    kinds = {"nrounds": int, "max_depth": int, "seed": int}
    params = {}
    for k, v in defaults.items():
        if k == "seed":
            continue
        params[k] = cfg.get_int(f"boost.{k}", v) if kinds.get(k) is int else cfg.get_float(f"boost.{k}", v)
    params["seed"] = _substream(cfg.seed, "boost")
    return BoostParams(**params)


def _training_frame(run, graph, panel):
    """Model frame (panel + b_hat + features) restricted to calibration years."""
    feats = _read_features(run.artifact("features.csv"))
    fit = BaselineFit.from_json(run.artifact("baseline_fit.json"))
    frame = model_frame(panel, feats, predict_panel(fit, panel))
    years = _calibration_years(run.cfg, panel.years)
    names = [c for c in feats.columns]
    return frame[frame["iso_year"].isin(years)].reset_index(drop=True), names


# ------------------------------------------------------------ subcommands

def cmd_ingest(run):
    graph, panel = _graph_panel(run)
    fields = {}
    for key in ("grid_daily", "grid_hourly"):
        for name, f in read_grid_csv(run.raw(key)).items():
            if name in fields:
                raise ValidationError(f"factor {name} appears in more than one grid file")
            fields[name] = f
    grids = {tuple(np.round(f.grid, 6).ravel()) for f in fields.values()}
    if len(grids) != 1:
        raise ValidationError("all gridded factors must share one grid")
    grid = next(iter(fields.values())).grid
    weights = build_population_weights(read_pop_grid(run.raw("pop_grid")), grid, read_mapping(run.raw("mapping")),
                                       regions=graph.regions, centroids=graph.centroids)
    run.csv(panel.data, "panel.csv")
    run.csv(weights.to_frame(grid), "population_weights.csv")
    _write_daily(run, regional_daily(fields, weights))


def cmd_features(run):
    cfg = run.cfg
    graph, panel = _graph_panel(run)
    daily = _read_daily(run.artifact("regional_daily.csv"))
    years = _calibration_years(cfg, panel.years)
    builder = EnvironmentalFeatureBuilder(graph=graph, n_jobs=run.jobs, **_builder_params(cfg))
    builder.fit(daily, years=years)
    X = builder.transform(daily)
    run.csv(X.reset_index(), "features.csv")
    run.json({"index": _KEYS, "columns": list(builder.get_feature_names_out()), "lag": builder.lag,
              "fit_years": list(builder.fit_years_)}, "feature_schema.json")
    run.csv(builder.thresholds_.to_frame(), "thresholds.csv")
    run.csv(builder.baselines_frame(), "anomaly_baselines.csv")


def cmd_baseline(run):
    cfg = run.cfg
    graph, panel = _graph_panel(run)
    years = _calibration_years(cfg, panel.years)
    est = SpatialSerflingBaseline(
        lambdas=cfg.get_list("baseline.lambdas", float),
        lambda_grid=cfg.get_list("baseline.lambda_grid", float, list(DEFAULT_LAMBDA_GRID)),
        n_passes=cfg.get_int("baseline.n_passes", 2),
        weeks_per_year=cfg.get_str("data.weeks_per_year", "average"),
    ).fit(panel.restrict_years(years), graph)
    est.fit_.to_json(run.track("baseline_fit.json"))
    out = panel.data[_KEYS + ["exposure"]].copy()
    out["b_hat"] = est.predict(panel)
    run.csv(out, "baseline_predictions.csv")


def _cv_grid(cfg):
    grid = {}
    kinds = {"nrounds": int, "max_depth": int}
    for k, default in TUNED_CV_GRID.items():
        grid[k] = cfg.get_list(f"cv.{k}", kinds.get(k, float), default)
    return grid


def cmd_cv(run):
    graph, panel = _graph_panel(run)
    frame, names = _training_frame(run, graph, panel)
    best, results = cross_validate(frame[names], frame["b_hat"], frame["deaths"], frame["iso_year"],
                                   _cv_grid(run.cfg), n_jobs=run.jobs, base_params=_boost_params(run.cfg))
    run.csv(results, "cv_results.csv")
    run.json({"best": best.as_dict(), "mean_loss": float(results["mean_loss"].min())}, "cv_best.json")


def _final_params(run):
    if run.cfg.get_bool("boost.use_cv", False):
        with open(run.artifact("cv_best.json"), encoding="utf-8") as fh:
            return BoostParams(**json.load(fh)["best"])
    return _boost_params(run.cfg)


def cmd_boost(run):
    graph, panel = _graph_panel(run)
    frame, names = _training_frame(run, graph, panel)
    params = _final_params(run)
    model = PoissonBoostRegressor(**params.as_dict()).fit(frame[names], frame["deaths"], frame["b_hat"],
                                                          years=frame["iso_year"])
    model.to_json(run.track("boost_model.json"))
    phi = model.predict_multiplier(frame[names])
    pred = frame[_KEYS + ["deaths", "b_hat"]].copy()
    pred["phi"] = phi
    pred["d_hat"] = frame["b_hat"].to_numpy() * phi
    run.csv(pred, "predictions.csv")
    db = poisson_deviance(pred["deaths"], pred["b_hat"])
    dm = poisson_deviance(pred["deaths"], pred["d_hat"])
    run.json({"deviance_baseline": db, "deviance_model": dm, "deviance_reduction": deviance_reduction(db, dm),
              "n_rows": int(len(pred))}, "deviance.json")


def _pairs(cfg):
    out = []
    for item in cfg.get_list("interpret.pairs", str, []):
        if ":" not in item:
            raise ValidationError(f"interpret.pairs entry {item!r} must be 'a:b'")
        a, b = item.split(":", 1)
        out.append((a.strip(), b.strip()))
    return out


def cmd_interpret(run):
    cfg = run.cfg
    model = PoissonBoostRegressor.from_json(run.artifact("boost_model.json"))
    graph, panel = _graph_panel(run)
    frame, names = _training_frame(run, graph, panel)
    X = frame[names]
    if list(model.feature_names_in_) != names:
        raise ValidationError("features.csv columns differ from the model schema")
    log_scale = cfg.get_bool("interpret.log_scale", False)
    K = cfg.get_int("interpret.ale_bins", 40)
    K2 = cfg.get_int("interpret.interaction_bins", 20)
    imp = feature_importance(model).to_series()
    chosen = cfg.get_list("interpret.features", str)
    if chosen is None:
        chosen = list(imp.sort_values(ascending=False, kind="stable").index[:cfg.get_int("interpret.top", 5)])
    unknown = [f for f in chosen if f not in names]
    if unknown:
        raise ValidationError(f"unknown interpret features {unknown}")
    curves = {f: ale_main(model, X, f, K, log_scale) for f in chosen}

    B = cfg.get_int("interpret.bootstrap", 0)
    imp_lo = imp_hi = np.full(len(imp), np.nan)
    ale_ci = {f: (np.full(len(c.edges), np.nan),) * 2 for f, c in curves.items()}
    if B > 0:
        params = model.params.as_dict()
        edges = {f: c.edges for f, c in curves.items()}

        def statistic(rows):
            m = PoissonBoostRegressor(**params).fit(rows[names], rows["deaths"], rows["b_hat"])
            parts = [feature_importance(m).to_series().reindex(names).to_numpy()]
            for f in chosen:
                parts.append(ale_main(m, rows[names], f, K, log_scale)(edges[f]))
            return np.concatenate(parts)

        res = bootstrap_ci(statistic, frame, B=B, level=cfg.get_float("interpret.level", 0.95),
                           seed=_substream(cfg.seed, "bootstrap"), n_jobs=run.jobs)
        imp_lo, imp_hi = res.lo[:len(names)], res.hi[:len(names)]
        pos = len(names)
        for f in chosen:
            n = len(edges[f])
            ale_ci[f] = (res.lo[pos:pos + n], res.hi[pos:pos + n])
            pos += n
    imp_frame = pd.DataFrame({"feature": names, "importance": imp.reindex(names).to_numpy(),
                              "lo": imp_lo, "hi": imp_hi})
    run.csv(imp_frame, "importance.csv")
    main = []
    for f, c in curves.items():
        fr = c.to_frame()
        fr["lo"], fr["hi"] = ale_ci[f]
        main.append(fr)
    run.csv(pd.concat(main, ignore_index=True), "ale_main.csv")
    pairs = _pairs(cfg)
    surf = [ale_interaction(model, X, a, b, K2, log_scale).to_frame() for a, b in pairs]
    cols = ["f1", "f2", "e1", "e2", "effect", "missing"]
    run.csv(pd.concat(surf, ignore_index=True) if surf else pd.DataFrame(columns=cols), "ale_interaction.csv")
    reg_feature = cfg.get("interpret.regional_feature")
    if reg_feature is not None:
        value = cfg.get_float("interpret.regional_value")
        rows = [{"region": r, "feature": reg_feature, "value": value,
                 "effect": ale_regional(model, X, frame["region"].to_numpy(), r, reg_feature, value, K, log_scale)}
                for r in graph.regions]
        run.csv(pd.DataFrame(rows), "ale_regional.csv")


def cmd_harvest(run):
    cfg = run.cfg
    pred = pd.read_csv(run.artifact("predictions.csv"), dtype={"region": str})
    feats = _read_features(run.artifact("features.csv")).reset_index()
    frame = pred.merge(feats, on=_KEYS, how="inner", validate="one_to_one")
    B = cfg.get_int("harvest.bins", 4)
    grids = []
    for f in cfg.get_list("harvest.features", str, ["i_hot"]):
        g = harvesting_grid(frame, frame["deaths"], frame["b_hat"], frame["d_hat"], f, B=B)
        grids.append(g.to_frame())
    run.csv(pd.concat(grids, ignore_index=True), "edp_grid.csv")


def cmd_backtest(run):
    cfg = run.cfg
    graph, panel = _graph_panel(run)
    daily = _read_daily(run.artifact("regional_daily.csv"))
    holdout = cfg.get_int("backtest.holdout_year", max(panel.years))
    params = _boost_params(cfg)
    res = backtest(panel, graph, daily, holdout, lambdas=cfg.get_list("backtest.lambdas", float),
                   boost_params=params,
                   nrounds_grid=cfg.get_list("backtest.nrounds", int),
                   max_depth_grid=cfg.get_list("backtest.max_depth", int),
                   builder_params=_builder_params(cfg), n_jobs=run.jobs)
    run.csv(res.per_region, "backtest.csv")
    run.csv(res.series, "backtest_series.csv")
    run.csv(res.cv_results, "backtest_cv.csv")
    run.json({"holdout_year": holdout, "fit_years": {k: list(v) for k, v in res.provenance.items()},
              "best": res.best_params.as_dict()}, "backtest_provenance.json")


def _planted(cfg):
    out = {}
    for item in cfg.get_list("synth.planted", str, ["i_hot:0.3"]):
        if ":" not in item:
            raise ValidationError(f"synth.planted entry {item!r} must be 'feature:coef'")
        k, v = item.split(":", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ValidationError(f"synth.planted entry {item!r} has a non-numeric coefficient") from None
    return out


def cmd_synth(run):
    cfg = run.cfg
    truth = SyntheticTruth(
        n_rows=cfg.get_int("synth.rows", 2),
        n_cols=cfg.get_int("synth.cols", 3),
        first_year=cfg.get_int("synth.first_year", 2015),
        n_years=cfg.get_int("synth.n_years", 4),
        planted=_planted(cfg),
        seed=cfg.seed,
        points_per_region=cfg.get_int("synth.points_per_region", 2),
        pop_per_point=cfg.get_int("synth.pop_per_point", 4),
    )
    paths = write_fixture(synth_generate(truth), run.out_dir)
    for p in paths.values():
        run.outputs[p.name] = p


COMMANDS = {
    "ingest": cmd_ingest,
    "features": cmd_features,
    "baseline": cmd_baseline,
    "boost": cmd_boost,
    "cv": cmd_cv,
    "interpret": cmd_interpret,
    "harvest": cmd_harvest,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
}


def _exit_code(exc):
    if isinstance(exc, NumericalError | FloatingPointError | np.linalg.LinAlgError):
        return 2
    return 1


def build_parser():
    p = argparse.ArgumentParser(prog="mortenv", description="Weekly mortality baseline and environmental multiplier model.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="flat section.key = value configuration file")
    p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = None
    try:
        if args.jobs < 1:
            raise ValidationError("--jobs must be at least 1")
        cfg = load_config(args.config, seed=args.seed)
        out_dir = _input_dir(cfg) if args.subcommand == "synth" else _output_dir(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = Run(args.subcommand, cfg, out_dir, jobs=args.jobs)
        COMMANDS[args.subcommand](run)
        run.manifest()
        stale = out_dir / "error.json"
        if stale.exists():
            stale.unlink()
        return 0
    except (ValidationError, NumericalError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code = _exit_code(exc)
        payload = {"subcommand": args.subcommand, "error": type(exc).__name__, "message": str(exc),
                   "exit_code": code}
        target = out_dir if out_dir is not None else Path(args.config).resolve().parent
        try:
            target.mkdir(parents=True, exist_ok=True)
            _write_json(payload, target / "error.json")
        except OSError:
            pass
        print(f"mortenv {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
