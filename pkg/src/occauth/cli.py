"""``occauth`` command line: synth, ingest, run, grid and stats.

Every subcommand reads an optional YAML config (``--config``); flags given
on the command line override it. Results are plot-ready UTF-8 CSVs under
``--out`` plus a ``manifest.json`` recording the resolved config.

Config layout (all keys optional)::

    seed: 0
    out: results
    data:
      source: benchmark        # benchmark | features | csv
      path: null               # features / csv sources
      benchmark: {n_users: 10, dim: 10, latent_dim: 3, separation: 10.0,
                  n_train: 50, n_test: 50, noise: 0.1}
      synthetic: {preset: unimodal, n_genuine: 500, outlier_fraction: 0.0,
                  separation: 12.0, modes: null}
      window: {length_s: 10.0, step_s: 5.0}
      schema: {user: user_id, session: session, timestamp: timestamp_s, channels: null}
      train_session: null
      test_session: null
    classifiers:
      classifiers: [sv1c, ee, if, lof]
      sv1c: {nu: 0.1, epsilon: 0.001, gamma: auto, max_iter: 100000}
      ee: {support_fraction: 0.75, contamination: 0.1, n_restarts: 50}
      iforest: {n_trees: 100, subsample_size: null, contamination: 0.1}
      lof: {k_neighbors: null, contamination: 0.1}
      pca_keep: 0.3
    fusion: {members: none, level: score, stacker: false}
    protocol: {impostors_per_user: null, threshold_quantile: 0.05, norm: logistic,
               det_points: 101, calibration_folds: 5, threads: null}
    grid: {resolution: 100, bounds: null, margin: 0.25}
    stats: {reports: null, pairs: null}
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import datetime as _dt
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .classifiers import (
    ClassifierConfig,
    EeParams,
    IfParams,
    LofParams,
    OccKind,
    Sv1cParams,
    decision_grid,
    fit_pipeline,
)
from .classifiers.base import ALL_KINDS
from .core import OccAuthError, ParameterError, UserDataset
from .datastream import (
    CsvSchema,
    Mode,
    SynthSpec,
    WindowSpec,
    bimodal_spec,
    build_user_datasets,
    generate_synthetic,
    load_csv,
    make_user_benchmark,
    read_feature_csv,
    series_to_features,
    write_feature_csv,
    write_points_csv,
)
from .evaluation import (
    EvalReport,
    MethodSpec,
    ProtocolConfig,
    ProtocolError,
    read_report_csv,
    run_protocols,
)
from .fusion import METHODS, calibrate_beta, enumerate_fusions, normalize, score_correlation
from .stats import pairwise_battery, write_battery_csv

log = logging.getLogger("occauth")

EXIT_ERROR = 2
EXIT_IO = 3


class ConfigError(ParameterError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "results",
    "data": {
        "source": "benchmark",
        "path": None,
        "benchmark": {"n_users": 10, "dim": 10, "latent_dim": 3, "separation": 10.0,
                      "n_train": 50, "n_test": 50, "noise": 0.1},
        "synthetic": {"preset": "unimodal", "n_genuine": 500, "outlier_fraction": 0.0,
                      "separation": 12.0, "modes": None},
        "window": {"length_s": 10.0, "step_s": 5.0},
        "schema": {"user": "user_id", "session": "session", "timestamp": "timestamp_s",
                   "channels": None},
        "train_session": None,
        "test_session": None,
    },
    "classifiers": {
        "classifiers": ["sv1c", "ee", "if", "lof"],
        "sv1c": {"nu": 0.1, "epsilon": 1e-3, "gamma": "auto", "max_iter": 100_000},
        "ee": {"support_fraction": 0.75, "contamination": 0.1, "n_restarts": 50},
        "iforest": {"n_trees": 100, "subsample_size": None, "contamination": 0.1},
        "lof": {"k_neighbors": None, "contamination": 0.1},
        "pca_keep": 0.3,
    },
    "fusion": {"members": "none", "level": "score", "stacker": False},
    "protocol": {"impostors_per_user": None, "threshold_quantile": 0.05, "norm": "logistic",
                 "det_points": 101, "calibration_folds": 5, "threads": None},
    "grid": {"resolution": 100, "bounds": None, "margin": 0.25},
    "stats": {"reports": None, "pairs": None},
}

# sections whose children are free-form (not checked against DEFAULTS)
_OPAQUE = {("data", "synthetic", "modes"), ("data", "schema", "channels"),
           ("classifiers", "classifiers"), ("grid", "bounds"), ("stats", "reports"),
           ("stats", "pairs"), ("fusion", "members")}


def merge_config(base: dict, override: dict, path: tuple = ()) -> dict:
    """Recursively overlay ``override`` on ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(map(str, here))!r}")
        if isinstance(base[key], dict) and here not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be a mapping")
            out[key] = merge_config(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping at top level")
    return merge_config(DEFAULTS, raw)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment settings; ``raw`` is the serializable config tree."""

    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def kinds(self) -> tuple[OccKind, ...]:
        ks = self.raw["classifiers"]["classifiers"]
        if isinstance(ks, str):
            ks = [k for k in ks.split(",") if k.strip()]
        kinds = tuple(OccKind.parse(k.strip()) for k in ks)
        if not kinds:
            raise ConfigError("no classifiers selected")
        return tuple(k for k in ALL_KINDS if k in kinds)

    def classifier_config(self, pca_keep=...) -> ClassifierConfig:
        c = self.raw["classifiers"]
        try:
            return ClassifierConfig(
                sv1c=Sv1cParams(**c["sv1c"]),
                ee=EeParams(**c["ee"], seed=self.seed),
                iforest=IfParams(**c["iforest"], seed=self.seed),
                lof=LofParams(**c["lof"]),
                pca_keep=c["pca_keep"] if pca_keep is ... else pca_keep,
            )
        except TypeError as exc:
            raise ConfigError(f"classifier parameters: {exc}") from None

    def protocol_config(self) -> ProtocolConfig:
        try:
            return ProtocolConfig(seed=self.seed, **self.raw["protocol"])
        except TypeError as exc:
            raise ConfigError(f"protocol parameters: {exc}") from None

    def fusion_members(self) -> list[tuple[OccKind, ...]]:
        spec = self.raw["fusion"]["members"]
        if spec is None or spec is False or spec == "none":
            return []
        if spec == "all":
            return enumerate_fusions(ALL_KINDS)
        items = spec.split(",") if isinstance(spec, str) else list(spec)
        out = []
        for item in items:
            parts = item.split("+") if isinstance(item, str) else list(item)
            members = tuple(OccKind.parse(p.strip()) for p in parts)
            if len(members) < 2 or len(set(members)) != len(members):
                raise ConfigError(f"fusion {item!r} needs two or more distinct classifiers")
            out.append(tuple(k for k in ALL_KINDS if k in members))
        return out

    def methods(self) -> list[MethodSpec]:
        f = self.raw["fusion"]
        levels = f["level"] if isinstance(f["level"], (list, tuple)) else [f["level"]]
        methods = [MethodSpec.single(k) for k in self.kinds()]
        for level in levels:
            if level not in ("score", "decision"):
                raise ConfigError(f"fusion level must be score or decision, got {level!r}")
            methods += [MethodSpec(m, level) for m in self.fusion_members()]
        if f["stacker"]:
            methods.append(MethodSpec(ALL_KINDS, "stack"))
        return methods

    def synth_spec(self) -> SynthSpec:
        s = self.raw["data"]["synthetic"]
        preset = s.get("preset", "unimodal")
        if s.get("modes"):
            modes = tuple(Mode(np.asarray(m["mean"], float), np.asarray(m["cov"], float),
                               float(m.get("weight", 1.0))) for m in s["modes"])
            mode = "unimodal" if len(modes) == 1 else "multimodal"
            return SynthSpec(mode, int(s["n_genuine"]), modes, float(s["outlier_fraction"]), self.seed)
        if preset == "bimodal":
            b = bimodal_spec(int(s["n_genuine"]), float(s["separation"]), self.seed)
            return dataclasses.replace(b, outlier_fraction=float(s["outlier_fraction"]))
        if preset == "unimodal":
            return SynthSpec("unimodal", int(s["n_genuine"]), (),
                             float(s["outlier_fraction"]), self.seed)
        raise ConfigError(f"unknown synthetic preset {preset!r}")

    def datasets(self) -> list[UserDataset]:
        d = self.raw["data"]
        source = d["source"]
        if source == "benchmark":
            return make_user_benchmark(**d["benchmark"], seed=self.seed)
        if source in ("features", "csv"):
            if not d["path"]:
                raise ConfigError(f"data.source {source} needs data.path")
            if source == "features":
                feats = read_feature_csv(d["path"])
            else:
                feats = series_to_features(self.load_series(), WindowSpec(**d["window"]))
            return build_user_datasets(feats, d["train_session"], d["test_session"])
        raise ConfigError(f"data.source must be benchmark, features or csv for run, got {source!r}")

    def load_series(self):
        d = self.raw["data"]
        sch = dict(d["schema"])
        if sch.get("channels") is not None:
            sch["channels"] = tuple(sch["channels"])
        return load_csv(d["path"], CsvSchema(**sch))


def _set(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    _set(cfg, "seed", getattr(args, "seed", None))
    _set(cfg, "out", getattr(args, "out", None))
    _set(cfg, "data.path", getattr(args, "data", None))
    _set(cfg, "data.source", getattr(args, "source", None))
    _set(cfg, "classifiers.classifiers", getattr(args, "classifier", None))
    _set(cfg, "fusion.members", getattr(args, "fusion", None))
    _set(cfg, "fusion.level", getattr(args, "fusion_level", None))
    if getattr(args, "stacker", False):
        cfg["fusion"]["stacker"] = True
    _set(cfg, "protocol.norm", getattr(args, "norm", None))
    _set(cfg, "protocol.threshold_quantile", getattr(args, "threshold_quantile", None))
    _set(cfg, "protocol.impostors_per_user", getattr(args, "impostors_per_user", None))
    _set(cfg, "grid.resolution", getattr(args, "resolution", None))
    _set(cfg, "data.synthetic.preset", getattr(args, "preset", None))
    _set(cfg, "stats.reports", getattr(args, "reports", None))
    return cfg


# output helpers --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, files: Sequence[Path], **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": cfg["seed"],
        "config": cfg,
        "files": {p.name: _sha256(p) for p in files},
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def method_slug(name: str) -> str:
    return name.replace("[", "_").replace("]", "")


def write_summary_csv(path: Path, reports: dict[str, EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "far", "frr", "hter", "auc", "auc_100_minus_hter", "n_users"])
        for name, rep in reports.items():
            a = rep.aggregate
            w.writerow([name, *[repr(float(v)) for v in (a.far, a.frr, a.hter, a.auc, a.auc_from_hter)],
                        len(rep.per_user)])


def correlation_of(scored, kinds, norm: str):
    """Pearson matrix of per-user normalized member scores, pooled over users."""
    cols = {k: [] for k in kinds}
    for us in scored:
        for k in kinds:
            ms = us.members[k]
            cfg = calibrate_beta(ms.train, norm)
            cols[k].append(normalize(np.concatenate([ms.genuine, ms.impostor]), cfg))
    table = np.column_stack([np.concatenate(cols[k]) for k in kinds])
    return score_correlation(table, [k.name for k in kinds])


def battery_pairs(reports: dict[str, EvalReport], singles: Sequence[str]) -> list[tuple[str, str]]:
    """All pairs of single classifiers, then each other method against the best single."""
    pairs = list(itertools.combinations(singles, 2))
    if singles:
        best = min(singles, key=lambda n: (reports[n].aggregate.hter, n))
        pairs += [(best, n) for n in reports if n not in singles]
    return pairs


# commands --------------------------------------------------------------------

def cmd_synth(exp: ExperimentConfig) -> list[Path]:
    spec = exp.synth_spec()
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    genuine, outliers = generate_synthetic(spec)
    cols = [f"x{i + 1}" for i in range(spec.dim)]
    files = [out / "genuine.csv", out / "outliers.csv"]
    write_points_csv(files[0], genuine, cols)
    write_points_csv(files[1], outliers, cols)
    modes = [{"mean": np.asarray(m.mean).tolist(), "cov": np.asarray(m.cov).tolist(),
              "weight": m.weight} for m in spec.modes]
    write_manifest(out, "synth", exp.raw, files, mode=spec.mode, n_modes=len(spec.modes),
                   modes=modes, n_genuine=int(genuine.shape[0]), n_outliers=int(outliers.shape[0]))
    return files


def cmd_ingest(exp: ExperimentConfig) -> list[Path]:
    d = exp.raw["data"]
    if not d["path"]:
        raise ConfigError("ingest needs data.path (or --data)")
    feats = series_to_features(exp.load_series(), WindowSpec(**d["window"]))
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / "features.csv"
    write_feature_csv(path, feats)
    write_manifest(out, "ingest", exp.raw, [path],
                   windows={f"{u}/{s}": int(X.shape[0]) for (u, s), X in sorted(feats.items())})
    return [path]


def cmd_run(exp: ExperimentConfig) -> list[Path]:
    datasets = exp.datasets()
    methods = exp.methods()
    pc = exp.protocol_config()
    reports, scored = run_protocols(datasets, methods, exp.classifier_config(), pc)
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, rep in reports.items():
        slug = method_slug(name)
        rep.write_csv(out / f"report_{slug}.csv")
        rep.write_det_csv(out / f"det_{slug}.csv")
        files += [out / f"report_{slug}.csv", out / f"det_{slug}.csv"]
    write_summary_csv(out / "summary.csv", reports)
    files.append(out / "summary.csv")
    kinds = [k for k in ALL_KINDS if scored and k in scored[0].members]
    if len(kinds) >= 2:
        correlation_of(scored, kinds, pc.norm).to_csv(out / "correlation.csv")
        files.append(out / "correlation.csv")
    singles = [m.name for m in methods if m.level == "single"]
    pairs = battery_pairs(reports, singles)
    if pairs:
        write_battery_csv(out / "stats.csv", pairwise_battery(reports, pairs))
        files.append(out / "stats.csv")
    write_manifest(out, "run", exp.raw, files, methods=[m.name for m in methods],
                   users=[str(d.user_id) for d in datasets])
    return files


def _grid_bounds(X: np.ndarray, margin: float):
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-9)
    return ((float(lo[0] - pad[0]), float(hi[0] + pad[0])), (float(lo[1] - pad[1]), float(hi[1] + pad[1])))


def cmd_grid(exp: ExperimentConfig) -> list[Path]:
    """Decision values ``score - threshold`` of each classifier over a 2-D box.

    Models are fitted on the synthetic genuine samples; the zero contour of
    the ``score`` column is the decision boundary.
    """
    spec = exp.synth_spec()
    genuine, _ = generate_synthetic(spec)
    g = exp.raw["grid"]
    bounds = g["bounds"] or _grid_bounds(genuine, float(g["margin"]))
    # no projection: a 2-D grid is only meaningful in the input plane
    config = exp.classifier_config(pca_keep=None)
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for kind in exp.kinds():
        try:
            pipe = fit_pipeline(kind, genuine, config, seed=exp.seed)
            grid = decision_grid(pipe, bounds, int(g["resolution"]))
        except OccAuthError as exc:
            raise ProtocolError("synthetic", f"classifiers/{kind.name}", exc) from exc
        path = out / f"grid_{kind.value}.csv"
        write_points_csv(path, np.array(list(grid.rows())).reshape(-1, 3), ["x", "y", "score"])
        files.append(path)
    write_manifest(out, "grid", exp.raw, files, bounds=[list(b) for b in bounds])
    return files


def cmd_stats(exp: ExperimentConfig) -> list[Path]:
    paths = exp.raw["stats"]["reports"]
    if not paths:
        raise ConfigError("stats needs report CSVs (--reports)")
    if isinstance(paths, str):
        paths = [paths]
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(p.glob("report_*.csv")) if p.is_dir() else [p]
    reports = {}
    for f in files:
        rep = read_report_csv(f, f.stem.removeprefix("report_"))
        reports[rep.method] = rep
    pairs = exp.raw["stats"]["pairs"]
    if pairs:
        pairs = [tuple(p.split(":")) if isinstance(p, str) else tuple(p) for p in pairs]
    else:
        pairs = list(itertools.combinations(reports, 2))
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / "stats.csv"
    write_battery_csv(path, pairwise_battery(reports, pairs))
    return [path]


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "run": cmd_run, "grid": cmd_grid, "stats": cmd_stats}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occauth", description="One-class continuous authentication experiments.")
    p.add_argument("--version", action="version", version=f"occauth {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--seed", type=int, help="base RNG seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic 2-D dataset")
    common(s)
    s.add_argument("--preset", choices=["unimodal", "bimodal"])

    s = sub.add_parser("ingest", help="window a raw sensor CSV into features")
    common(s)
    s.add_argument("--data", help="raw sensor CSV")

    s = sub.add_parser("run", help="train, evaluate, fuse and test")
    common(s)
    s.add_argument("--source", choices=["benchmark", "features", "csv"])
    s.add_argument("--data", help="feature CSV or raw sensor CSV")
    s.add_argument("--classifier", help="comma separated subset of sv1c,ee,if,lof")
    s.add_argument("--fusion", help="none, all, or comma separated member lists like sv1c+ee")
    s.add_argument("--fusion-level", choices=["score", "decision"])
    s.add_argument("--stacker", action="store_true", help="also evaluate the stacked SV1C")
    s.add_argument("--norm", choices=list(METHODS))
    s.add_argument("--threshold-quantile", type=float)
    s.add_argument("--impostors-per-user", type=int)

    s = sub.add_parser("grid", help="decision-value grids on synthetic 2-D data")
    common(s)
    s.add_argument("--classifier", help="comma separated subset of sv1c,ee,if,lof")
    s.add_argument("--preset", choices=["unimodal", "bimodal"])
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("stats", help="significance battery over report CSVs")
    common(s)
    s.add_argument("--reports", nargs="+", help="report CSVs or directories holding them")
    return p


def _module_of(exc: BaseException) -> str:
    mod = type(exc).__module__
    return mod.removeprefix("occauth.") if mod.startswith("occauth") else mod


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = ExperimentConfig(apply_flags(load_config(args.config), args))
        files = COMMANDS[args.command](exp)
    except ProtocolError as exc:
        print(f"occauth: error in {exc.module} for user {exc.user!r}: "
              f"{type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_ERROR
    except (OccAuthError, yaml.YAMLError) as exc:
        print(f"occauth: error in {_module_of(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"occauth: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        log.info("wrote %s", f)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
