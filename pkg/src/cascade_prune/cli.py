"""``cascade-prune`` command line: build, run, ablate, plot.

Every command reads a JSON run configuration (``--config``; defaults below),
works inside one output directory guarded by a lock file, and writes only
deterministic content so that reruns are byte-identical.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
With ``--json`` errors go to stderr as one JSON object and successful
commands print a JSON summary on stdout.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import html
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .aggregate import SUBSET_MODES
from .cascade import (CascadeConfig, Evaluator, MetricsRow, SweepPoint, metrics_csv,
                      metrics_jsonl)
from .engine import ModelSpec, load_model, save_model
from .errors import CascadePruneError, ConfigError
from .exit_gate import CRITERIA
from .pruner import RANKING_SOURCES, kept_count
from .synth import (PlantedRecipe, build_planted_pair, dataset_for, default_specs,
                    heatmap_matrix, load_dataset, planted_heads, save_dataset)

SEED_ENV = "CASCADE_PRUNE_SEED"
SMALL_FILE, LARGE_FILE, DATASET_FILE, MANIFEST_FILE = (
    "small.cprm", "large.cprm", "dataset.jsonl", "manifest.json")
LOCK_FILE = ".cascade-prune.lock"
BASELINE_ID = "large_unpruned"
NEVER_EXIT = 2.0

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "cascade_out",
    "model": {"small_layers": 4, "large_layers": 48, "num_heads": 4, "head_dim": 16,
              "max_seq_len": 96},
    "recipe": {"grid": [8, 8], "planted_cells": None, "relevance_layers": None,
               "small_relevance_layers": None, "concentration": 0.9,
               "answer_fidelity": "faithful", "n_symbols": 8, "n_fillers": 4,
               "answer_sharpness": 6.0, "shortcut_weight": 8.0, "noise_scale": 0.02},
    "dataset": {"n_instances": 200, "difficulty": [0, 32], "prompt_len": 3},
    "cascade": {"exit_criterion": "combined", "threshold": 0.9, "max_new_tokens": 4,
                "consistency_layer": 2, "consistency_fraction": 0.05,
                "ranking_source": "aggregated", "fastv_layer": None},
    "sweep": [{"k": 19, "R": 0.40}, {"k": 9, "R": 0.20}, {"k": 2, "R": 0.05}],
    "ablate": {"k": 2, "R": 0.05, "layer_fractions": [0.1, 0.3, 0.5, 0.7, 1.0],
               "exit_ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]},
    "plot": {"heatmap_instances": 4, "heatmap_retain_fraction": 0.05},
}
SWEEP_KEYS = {"k", "R", "threshold", "target_exit_ratio", "criterion", "ranking_source"}
NULLABLE = {("recipe", "planted_cells"), ("recipe", "relevance_layers"),
            ("recipe", "small_relevance_layers"), ("cascade", "fastv_layer")}


class UsageError(CascadePruneError):
    pass


# --- configuration -----------------------------------------------------------

def _check_type(path: tuple, value, default) -> None:
    name = ".".join(path)
    if value is None:
        if path in NULLABLE:
            return
        raise ConfigError(f"{name} must not be null")
    if default is None:
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list of integers or null")
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, (list, int)) if path == ("dataset", "difficulty") else isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{name} has the wrong type ({type(value).__name__})")


def _merge(defaults: dict, given: dict, path: tuple = ()) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        here = path + (key,)
        if key == "sweep":
            out[key] = _sweep(value)
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, here)
        else:
            _check_type(here, value, defaults[key])
            out[key] = value
    return out


def _sweep(points) -> list[dict]:
    if not isinstance(points, list):
        raise ConfigError("sweep must be a list of points")
    for i, p in enumerate(points):
        if not isinstance(p, dict):
            raise ConfigError(f"sweep[{i}] must be an object")
        unknown = set(p) - SWEEP_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in sweep[{i}]")
        if "k" not in p or "R" not in p:
            raise ConfigError(f"sweep[{i}] needs both k and R")
        if "threshold" in p and "target_exit_ratio" in p:
            raise ConfigError(f"sweep[{i}] sets both threshold and target_exit_ratio")
        if p.get("criterion", "combined") not in CRITERIA:
            raise ConfigError(f"sweep[{i}] has unknown criterion {p['criterion']!r}")
        if p.get("ranking_source", "aggregated") not in RANKING_SOURCES:
            raise ConfigError(f"sweep[{i}] has unknown ranking source {p['ranking_source']!r}")
    return copy.deepcopy(points)


def load_config(path: str | None, seed: int | None = None, out: str | None = None,
                environ: dict | None = None) -> dict:
    """Defaults, then the JSON file, then $CASCADE_PRUNE_SEED, then flags."""
    given = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                given = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    cfg = _merge(DEFAULT_CONFIG, given)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    c = cfg["cascade"]
    if c["exit_criterion"] not in CRITERIA:
        raise ConfigError(f"cascade.exit_criterion must be one of {CRITERIA}")
    if c["ranking_source"] not in RANKING_SOURCES:
        raise ConfigError(f"cascade.ranking_source must be one of {RANKING_SOURCES}")
    if cfg["dataset"]["n_instances"] < 1:
        raise ConfigError("dataset.n_instances must be at least 1")
    recipe = _recipe(cfg)
    small_spec, large_spec = _specs(cfg, recipe)
    if large_spec.num_layers <= small_spec.num_layers:
        raise ConfigError("model.large_layers must exceed model.small_layers")
    try:
        planted_heads(small_spec, recipe, "small")
        planted_heads(large_spec, recipe, "large")
    except ValueError as exc:
        raise ConfigError(f"infeasible recipe: {exc}") from None
    _difficulty(cfg)


def _recipe(cfg: dict) -> PlantedRecipe:
    r = dict(cfg["recipe"])
    r["grid"] = tuple(r["grid"])
    for key in ("planted_cells", "relevance_layers", "small_relevance_layers"):
        if r[key] is not None:
            r[key] = tuple(r[key])
    try:
        return PlantedRecipe(**r)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid recipe: {exc}") from None


def _specs(cfg: dict, recipe: PlantedRecipe) -> tuple[ModelSpec, ModelSpec]:
    m = cfg["model"]
    try:
        return default_specs(recipe, m["small_layers"], m["large_layers"], m["num_heads"],
                             m["head_dim"], m["max_seq_len"])
    except ValueError as exc:
        raise ConfigError(f"invalid model section: {exc}") from None


def _difficulty(cfg: dict):
    d = cfg["dataset"]["difficulty"]
    if isinstance(d, list):
        if len(d) != 2:
            raise ConfigError("dataset.difficulty must be an integer or a [lo, hi] pair")
        return (int(d[0]), int(d[1]))
    return int(d)


# --- files -------------------------------------------------------------------

class DirLock:
    """Single-entrant guard for an output directory."""

    def __init__(self, directory: Path) -> None:
        self.path = directory / LOCK_FILE

    def __enter__(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.path.parent} is in use by another command "
                               f"(remove {self.path} if that command died)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_built(out: Path):
    missing = [name for name in (SMALL_FILE, LARGE_FILE, DATASET_FILE, MANIFEST_FILE)
               if not (out / name).exists()]
    if missing:
        raise FileNotFoundError(f"missing {', '.join(missing)} in {out}; "
                                f"run `cascade-prune build --out {out}` first")
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    for name, digest in manifest["files"].items():
        if sha256_file(out / name) != digest:
            raise RuntimeError(f"{out / name} does not match its manifest hash; rebuild")
    return (load_model(out / SMALL_FILE), load_model(out / LARGE_FILE),
            load_dataset(out / DATASET_FILE), manifest)


def _cascade_config(cfg: dict, small, large, **overrides) -> CascadeConfig:
    c = cfg["cascade"]
    kwargs = dict(exit_criterion=c["exit_criterion"], threshold=float(c["threshold"]),
                  max_new_tokens=c["max_new_tokens"], consistency_layer=c["consistency_layer"],
                  consistency_fraction=c["consistency_fraction"],
                  ranking_source=c["ranking_source"], fastv_layer=c["fastv_layer"],
                  seed=cfg["seed"])
    kwargs.update(overrides)
    return CascadeConfig(small, large, **kwargs)


# --- commands ----------------------------------------------------------------

def cmd_build(cfg: dict) -> dict:
    out = Path(cfg["out"])
    recipe = _recipe(cfg)
    small_spec, large_spec = _specs(cfg, recipe)
    small, large = build_planted_pair(small_spec, large_spec, recipe, cfg["seed"])
    d = cfg["dataset"]
    dataset = dataset_for(recipe, d["n_instances"], cfg["seed"] + 2, _difficulty(cfg),
                          d["prompt_len"])
    save_model(small, out / SMALL_FILE)
    save_model(large, out / LARGE_FILE)
    save_dataset(dataset, out / DATASET_FILE)
    manifest = {
        "seed": cfg["seed"],
        "recipe": recipe.to_dict(),
        "answer_fidelity": recipe.answer_fidelity,
        "small_spec": dataclasses.asdict(small_spec),
        "large_spec": dataclasses.asdict(large_spec),
        "dataset": dict(d),
        "files": {name: sha256_file(out / name) for name in (SMALL_FILE, LARGE_FILE, DATASET_FILE)},
    }
    _write_text(out / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"command": "build", "out": str(out), "files": manifest["files"]}


def _sweep_points(cfg: dict, num_layers: int) -> list[SweepPoint]:
    c = cfg["cascade"]
    points = []
    for i, p in enumerate(cfg["sweep"]):
        if not 1 <= p["k"] <= num_layers or not 0 < p["R"] <= 1:
            raise ConfigError(f"sweep[{i}] needs 1 <= k <= {num_layers} and 0 < R <= 1")
        threshold = p.get("threshold")
        if threshold is None and "target_exit_ratio" not in p:
            threshold = c["threshold"]
        points.append(SweepPoint(k=int(p["k"]), R=float(p["R"]), threshold=threshold,
                                 target_exit_ratio=p.get("target_exit_ratio"),
                                 criterion=p.get("criterion"),
                                 ranking_source=p.get("ranking_source")))
    return points


def _baseline(ev: Evaluator) -> MetricsRow:
    L = ev.config.large_model.spec.num_layers
    row = ev.point(SweepPoint(k=L, R=1.0, threshold=NEVER_EXIT))
    row.config_id = BASELINE_ID
    return row


def _ratio(acc: float, base: float) -> float:
    return acc / base if base > 0 else float("nan")


def _traces_jsonl(ev: Evaluator) -> str:
    lines = []
    for i, (inst, stage) in enumerate(zip(ev.dataset, ev.small)):
        lines.append(json.dumps({"instance": i, "grid": list(inst.grid),
                                 "planted_cells": list(inst.planted_cells),
                                 "importance": stage.importance.tolist(),
                                 "trace": stage.trace.to_dict()}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def cmd_run(cfg: dict, parallel: int = 1) -> dict:
    out = Path(cfg["out"])
    small, large, dataset, _ = _load_built(out)
    ev = Evaluator(dataset, _cascade_config(cfg, small, large), parallel)
    base = _baseline(ev)
    rows = [ev.point(p) for p in _sweep_points(cfg, large.spec.num_layers)] + [base]
    extra = [{"score_ratio": _ratio(r.accuracy, base.accuracy)} for r in rows]
    _write_text(out / "results.csv", metrics_csv(rows, ("score_ratio",), extra))
    per_instance = []
    for row in rows:
        for rec in row.per_instance:
            per_instance.append(json.dumps({"config_id": row.config_id, **rec}, sort_keys=True))
    _write_text(out / "results.jsonl", "".join(line + "\n" for line in per_instance))
    _write_text(out / "summary.jsonl", metrics_jsonl(rows))
    _write_text(out / "traces.jsonl", _traces_jsonl(ev))
    return {"command": "run", "out": str(out), "rows": len(rows),
            "accuracy": {r.config_id: r.accuracy for r in rows}}


ABLATIONS = ("layers", "tokens", "criteria")
ABLATE_HEADER = ("ablation", "setting", "k", "R", "threshold", "accuracy", "score_ratio",
                 "exit_ratio", "mean_flops")


def _ablate_rows(ablation: str, entries, base_acc: float) -> list[list]:
    return [[ablation, setting, r.k, repr(r.R), repr(r.threshold), repr(r.accuracy),
             repr(_ratio(r.accuracy, base_acc)), repr(r.exit_ratio), repr(r.mean_flops)]
            for setting, r in entries]


def curve_area(exit_ratios, accuracies, reference: float) -> float:
    """Trapezoid area between an accuracy-vs-exit-ratio curve and ``reference``."""
    x = np.asarray(exit_ratios, dtype=np.float64)
    y = np.asarray(accuracies, dtype=np.float64) - reference
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def cmd_ablate(cfg: dict, which: str, parallel: int = 1) -> dict:
    if which not in ABLATIONS:
        raise UsageError(f"unknown ablation {which!r}; choose from {ABLATIONS}")
    out = Path(cfg["out"])
    small, large, dataset, _ = _load_built(out)
    a = cfg["ablate"]
    k, R = int(a["k"]), float(a["R"])
    never = SweepPoint(k, R, threshold=NEVER_EXIT)
    base = _baseline(Evaluator(dataset, _cascade_config(cfg, small, large), parallel,
                               with_consistency=False))
    buf_rows: list[list] = []
    summary: dict = {"command": "ablate", "which": which}
    if which == "layers":
        entries = []
        for frac in a["layer_fractions"]:
            ev = Evaluator(dataset, _cascade_config(cfg, small, large, layer_fraction=float(frac)),
                           parallel, with_consistency=False)
            entries.append((f"layer_fraction={frac:g}", ev.point(never)))
        ev = Evaluator(dataset, _cascade_config(cfg, small, large), parallel, with_consistency=False)
        entries.append(("oracle_large", ev.point(replace_source(never, "oracle_large"))))
        buf_rows = _ablate_rows("layers", entries, base.accuracy)
    elif which == "tokens":
        entries = []
        for mode in SUBSET_MODES:
            ev = Evaluator(dataset, _cascade_config(cfg, small, large, token_subset=mode),
                           parallel, with_consistency=False)
            entries.append((mode, ev.point(never)))
        buf_rows = _ablate_rows("tokens", entries, base.accuracy)
    else:
        ev = Evaluator(dataset, _cascade_config(cfg, small, large), parallel)
        small_only = ev.point(SweepPoint(k, R, threshold=0.0))
        areas = {}
        for criterion in CRITERIA:
            curve = [ev.point(SweepPoint(k, R, target_exit_ratio=float(e), criterion=criterion))
                     for e in a["exit_ratios"]]
            buf_rows += _ablate_rows("criteria", [(f"{criterion}@{e:g}", r)
                                                  for e, r in zip(a["exit_ratios"], curve)],
                                     base.accuracy)
            areas[criterion] = curve_area([r.exit_ratio for r in curve],
                                          [r.accuracy for r in curve], small_only.accuracy)
        lines = ["criterion,area\n"] + [f"{c},{areas[c]!r}\n" for c in CRITERIA]
        _write_text(out / "ablate_criteria_area.csv", "".join(lines))
        summary["areas"] = areas
    buf = []
    for row in [list(ABLATE_HEADER)] + buf_rows:
        buf.append(",".join(str(v) for v in row) + "\n")
    _write_text(out / f"ablate_{which}.csv", "".join(buf))
    summary["rows"] = len(buf_rows)
    return summary


def replace_source(point: SweepPoint, source: str) -> SweepPoint:
    return SweepPoint(point.k, point.R, point.threshold, point.target_exit_ratio,
                      point.criterion, source)


# --- SVG ---------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")


def curve_svg(series: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str,
              width: int = 480, height: int = 320) -> str:
    """Minimal line chart; one polyline per series, vertices in the given order."""
    pad = 48
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">{html.escape(xlabel)}</text>',
             f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" text-anchor="middle">{html.escape(ylabel)}</text>']
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts += [f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>' for x, y in pts]
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{html.escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(matrix: np.ndarray, highlighted: set[tuple[int, int]], cell: int = 24) -> str:
    rows, cols = matrix.shape
    lo, hi = float(matrix.min()), float(matrix.max())
    span = hi - lo if hi > lo else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}">']
    for r in range(rows):
        for c in range(cols):
            shade = int(255 - 255 * (matrix[r, c] - lo) / span)
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb(255,{shade},{shade})"/>')
    for r, c in sorted(highlighted):
        parts.append(f'<rect class="kept" x="{c * cell + 1}" y="{r * cell + 1}" width="{cell - 2}" '
                     f'height="{cell - 2}" fill="none" stroke="black" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
                raise ValueError(f"{path} is malformed: header lacks {sorted(required)}")
            rows = list(reader)
        for row in rows:
            for key in required:
                if key not in ("config_id", "criterion", "ablation", "setting"):
                    float(row[key])
    except (csv.Error, TypeError) as exc:
        raise ValueError(f"{path} is malformed: {exc}") from None
    return rows


def cmd_plot(cfg: dict) -> dict:
    out = Path(cfg["out"])
    results = out / "results.csv"
    if not results.exists():
        raise FileNotFoundError(f"{results} not found; run `cascade-prune run --out {out}` first")
    rows = _read_csv(results, ("config_id", "accuracy", "mean_flops", "criterion"))
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    written = []
    families: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        if row["config_id"] == BASELINE_ID:
            continue
        family = f"{row['config_id'].split('|')[0]}|{row['criterion']}"
        families.setdefault(family, []).append((float(row["mean_flops"]), float(row["accuracy"])))
    if not families:
        warnings.warn("results contain no sweep points; no curves written", stacklevel=2)
    for family, pts in sorted(families.items()):
        pts.sort()
        name = "curve_" + family.replace("|", "_") + ".svg"
        _write_text(plots / name, curve_svg({family: pts}, "mean FLOPs", "accuracy"))
        written.append(name)
    area_file = out / "ablate_criteria.csv"
    if area_file.exists():
        curves: dict[str, list[tuple[float, float]]] = {}
        for row in _read_csv(area_file, ("setting", "exit_ratio", "accuracy")):
            curves.setdefault(row["setting"].split("@")[0], []).append(
                (float(row["exit_ratio"]), float(row["accuracy"])))
        if curves:
            _write_text(plots / "criteria.svg", curve_svg(curves, "exit ratio", "accuracy"))
            written.append("criteria.svg")
    traces = out / "traces.jsonl"
    if traces.exists():
        p = cfg["plot"]
        with open(traces, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        for rec in records[:p["heatmap_instances"]]:
            grid = tuple(rec["grid"])
            importance = np.asarray(rec["importance"])
            m = heatmap_matrix(importance, grid)
            n_keep = kept_count(importance.size, p["heatmap_retain_fraction"])
            kept = np.argsort(-importance, kind="stable")[:n_keep]
            cells = {divmod(int(i), grid[1]) for i in kept}
            name = f"heatmap_{rec['instance']:04d}.svg"
            _write_text(plots / name, heatmap_svg(m, cells))
            written.append(name)
    return {"command": "plot", "out": str(out), "files": written}


# --- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="global seed (beats $%s)" % SEED_ENV)
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="instance-level worker threads")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    parser = _Parser(prog="cascade-prune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("build", parents=[common], help="build the model pair and dataset")
    sub.add_parser("run", parents=[common], help="evaluate the configured sweep")
    ab = sub.add_parser("ablate", parents=[common], help="ranking and exit-criterion ablations")
    ab.add_argument("which", choices=ABLATIONS)
    sub.add_parser("plot", parents=[common], help="render SVG curves and heatmaps")
    return parser


def _emit_error(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"cascade-prune: error: {exc}\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        if args.parallel < 1:
            raise UsageError("--parallel must be at least 1")
        cfg = load_config(args.config, args.seed, args.out)
    except (UsageError, ConfigError) as exc:
        return _emit_error(exc, 1, as_json)
    try:
        with DirLock(Path(cfg["out"])):
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                if args.command == "build":
                    summary = cmd_build(cfg)
                elif args.command == "run":
                    summary = cmd_run(cfg, args.parallel)
                elif args.command == "ablate":
                    summary = cmd_ablate(cfg, args.which, args.parallel)
                else:
                    summary = cmd_plot(cfg)
            for w in caught:
                sys.stderr.write(f"cascade-prune: warning: {w.message}\n")
            summary["warnings"] = [str(w.message) for w in caught]
    except (UsageError, ConfigError) as exc:
        return _emit_error(exc, 1, as_json)
    except (CascadePruneError, OSError, RuntimeError, ValueError, KeyError) as exc:
        return _emit_error(exc, 2, as_json)
    if as_json:
        sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    else:
        sys.stdout.write(f"{summary['command']}: done ({cfg['out']})\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
