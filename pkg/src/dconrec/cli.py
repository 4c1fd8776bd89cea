"""Command-line pipeline: split, augment, condense, train-eval and sweep.

Every stage reads and writes plain files so stages can be rerun, resumed
and mixed across methods. Each output directory gets a ``config.json``
holding the fully resolved configuration.

Configuration files hold flat ``key = value`` lines. Training keys
(``embedding_dim``, ``learning_rate``, ...) apply to the proxy, backbone
and test models alike; prefix them with ``proxy.``, ``backbone.`` or
``test.`` to target one. Condensation and baseline keys use their field
names (``ratio_r``, ``outer_lr``, ``gm_lr``, ...).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from dconrec.augment import DataPool, build_data_pool, load_pool, save_pool, train_proxy
from dconrec.baselines import METHODS as BASELINE_METHODS
from dconrec.baselines import BaselineConfig, gradmatch_condense, run_baseline
from dconrec.condense import (
    CondenseConfig,
    ConvergenceMonitor,
    ProbabilityMask,
    condense,
    finalize_dataset,
    save_mask,
)
from dconrec.data import (
    DatasetSplit,
    group_users,
    load_interactions,
    read_pairs,
    save_id_map,
    save_interactions,
    split_dataset,
)
from dconrec.metrics import evaluate, export_embeddings
from dconrec.model import TrainConfig, init_model, save_model, train

logger = logging.getLogger("dconrec")

METHODS = ("dconrec",) + BASELINE_METHODS
TRAIN_ROLES = ("proxy", "backbone", "test")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


class StageError(Exception):
    """Runtime failure inside a named pipeline stage (exit code 1)."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    proxy: TrainConfig = field(default_factory=TrainConfig)
    backbone: TrainConfig = field(default_factory=TrainConfig)
    test: TrainConfig = field(default_factory=TrainConfig)
    condense: CondenseConfig = field(default_factory=CondenseConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    method: str = "dconrec"
    r_ps: float = 0.5
    seed: int = 0
    ks: tuple = (5, 10)
    groups: tuple = (10, 100)
    finalize_mode: str = "topk"
    fractions: tuple = (0.8, 0.1, 0.1)
    split_mode: str = "per-user"
    sweep_axis: str = "ratio_r"
    sweep_values: tuple = ()
    seeds: tuple = ()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_RUN_KEYS = {"method", "r_ps", "seed", "ks", "groups", "finalize_mode", "fractions", "split_mode",
             "sweep_axis", "sweep_values", "seeds"}


def _coerce(raw: str, default):
    """Parse ``raw`` into the type of ``default``."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        return tuple(float(p) if any(c in p for c in ".eE") else int(p) for p in parts)
    return raw


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` pairs; ``#`` comments and blank lines are ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"), comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[run]\n" + path.read_text(), source=str(path))
    return dict(parser["run"])


def resolve_config(values: dict[str, str], overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from string values plus typed overrides.

    The global ``seed`` seeds every component unless a prefixed key says otherwise.
    """
    values = dict(values)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = str(val)
    train_fields = {f.name: f.default for f in fields(TrainConfig)}
    condense_fields = {f.name: f.default for f in fields(CondenseConfig)}
    baseline_fields = {f.name: f.default for f in fields(BaselineConfig)}
    run_defaults = RunConfig()
    run_kw, shared, per_role, cond_kw, base_kw = {}, {}, {r: {} for r in TRAIN_ROLES}, {}, {}
    try:
        for key, raw in values.items():
            role, _, name = key.rpartition(".")
            if role:
                if role not in TRAIN_ROLES or name not in train_fields:
                    raise UsageError(f"unknown config key {key!r}")
                per_role[role][name] = _coerce(raw, train_fields[name])
                continue
            matched = False
            if key in _RUN_KEYS:
                run_kw[key] = _coerce(raw, getattr(run_defaults, key))
                matched = True
            if key in train_fields and key != "seed":
                shared[key] = _coerce(raw, train_fields[key])
                matched = True
            if key in condense_fields and key != "seed":
                cond_kw[key] = _coerce(raw, condense_fields[key])
                matched = True
            if key in baseline_fields and key not in ("seed", "method"):
                base_kw[key] = _coerce(raw, baseline_fields[key])
                matched = True
            if not matched:
                raise UsageError(f"unknown config key {key!r}")
        seed = run_kw.get("seed", 0)
        method = run_kw.get("method", "dconrec")
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        roles = {r: TrainConfig(**{"seed": seed, **shared, **per_role[r]}) for r in TRAIN_ROLES}
        cond = CondenseConfig(**{"seed": seed, **cond_kw})
        base = BaselineConfig(**{
            "seed": seed,
            "method": method if method in BASELINE_METHODS else "random",
            "ratio_r": cond.ratio_r,
            **base_kw,
        })
        return RunConfig(condense=cond, baseline=base, **roles, **run_kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# -- file helpers -----------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


_SPLIT_FILES = (("train", "train"), ("val", "validation"), ("test", "test"))


def load_split(split_dir) -> DatasetSplit:
    split_dir = Path(split_dir)
    meta = json.loads(_require(split_dir / "dataset.json").read_text())
    n_users, n_items = meta["n_users"], meta["n_items"]
    parts = {attr: read_pairs(_require(split_dir / f"{name}.tsv"), n_users, n_items)
             for name, attr in _SPLIT_FILES}
    return DatasetSplit(**parts)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (UsageError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


# -- commands ---------------------------------------------------------------

def run_split(run: RunConfig, input_path, out_dir, fmt: str = "tsv") -> DatasetSplit:
    out = Path(out_dir)
    data = _stage("load", load_interactions, _require(Path(input_path)), fmt)
    split = _stage("split", split_dataset, data, run.fractions, run.seed, run.split_mode)
    out.mkdir(parents=True, exist_ok=True)
    for name, attr in _SPLIT_FILES:
        save_interactions(getattr(split, attr), out / f"{name}.tsv")
    save_id_map(data, out / "id_map.tsv")
    _write_json(out / "dataset.json", {
        "n_users": data.n_users,
        "n_items": data.n_items,
        "n_interactions": len(data),
        "counts": {name: len(getattr(split, attr)) for name, attr in _SPLIT_FILES},
    })
    _write_json(out / "config.json", run.to_dict())
    return split


def run_augment(run: RunConfig, split: DatasetSplit, out_dir) -> DataPool:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    proxy = _stage("proxy", train_proxy, split.train, split.validation, run.proxy.architecture, run.proxy)
    pool = _stage("augment", build_data_pool, split.train, proxy, run.r_ps, run.seed)
    save_pool(pool, out / "pool.tsv")
    save_model(proxy, out / "proxy.npz")
    _write_json(out / "config.json", run.to_dict())
    return pool


def _indicator_mask(train, selected, budget) -> ProbabilityMask:
    probs = selected.contains_many(train.users, train.items).astype(float)
    return ProbabilityMask(train.users, train.items, probs, float(budget), train.n_users, train.n_items)


def run_condense(run: RunConfig, split: DatasetSplit, out_dir, pool_path=None) -> dict:
    """Produce ``condensed.tsv``, ``mask.tsv``, ``monitor.csv`` and ``report.json`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = split.train
    needs_pool = run.method == "dconrec" or (run.method == "gradmatch" and run.baseline.gm_use_pool)
    pool = None
    if pool_path is not None:
        pool = _stage("load pool", load_pool, _require(Path(pool_path)), train_set.n_users, train_set.n_items, run.r_ps)
    elif needs_pool:
        pool = run_augment(run, split, out)
    monitor = ConvergenceMonitor()
    if run.method == "dconrec":
        mask, monitor = _stage("condense", condense, pool, train_set, split.validation, run.backbone, run.condense)
        condensed = finalize_dataset(mask, run.finalize_mode, np.random.default_rng([run.seed, 5]))
    elif run.method == "gradmatch":
        base = replace(run.baseline, finalize_mode=run.finalize_mode)
        condensed, mask, monitor = _stage(
            "gradmatch", gradmatch_condense, pool or DataPool.from_parts(train_set), train_set,
            base.ratio_r, run.backbone, base, return_mask=True,
        )
    else:
        condensed = _stage("select", run_baseline, run.method, train_set, split.validation, pool, run.proxy, run.baseline)
        mask = _indicator_mask(train_set, condensed, run.condense.ratio_r * len(train_set))
    save_interactions(condensed, out / "condensed.tsv")
    save_mask(mask, out / "mask.tsv")
    monitor.write_csv(out / "monitor.csv")
    meta = {
        "seed": run.seed,
        "method": run.method,
        "r": run.condense.ratio_r,
        "r_ps": run.r_ps,
        "n_train": len(train_set),
        "n_condensed": len(condensed),
        "budget": mask.budget,
        "max_sum_s": max(monitor.sum_s) if monitor.sum_s else float(mask.probs.sum()),
    }
    if len(monitor) >= 2:
        meta["grad_mapping_halves"] = list(monitor.half_means())
    _write_json(out / "report.json", {"meta": meta})
    _write_json(out / "config.json", run.to_dict())
    # wall-clock is machine dependent; kept apart from the reproducible outputs
    _write_json(out / "timing.json", {"op_seconds": monitor.op_seconds, "inner_seconds": monitor.inner_seconds})
    return meta


def run_train_eval(run: RunConfig, split: DatasetSplit, train_file, out_dir, export: bool = False) -> dict:
    """Train the test model on ``train_file`` and evaluate against the split's test part.

    Ranking always excludes the original training items of each user.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path = _require(Path(train_file))
    fit_set = _stage("load", read_pairs, train_path, split.train.n_users, split.train.n_items)
    if len(fit_set) == 0:
        raise StageError("train", ValueError(f"{train_path} holds no interactions"))
    config = run.test
    graph = fit_set if config.architecture == "lightgcn" else None
    model = init_model(fit_set.n_users, fit_set.n_items, config, graph)
    model = _stage("train", train, model, fit_set, split.validation, config)
    groups = group_users(split.train, *run.groups) if run.groups else None
    report = _stage("evaluate", evaluate, model, split, run.ks, groups)
    meta = {"seed": run.seed, "model": config.architecture, "train_file": train_path.name,
            "n_fit": len(fit_set)}
    upstream = train_path.parent / "report.json"
    if upstream.exists():
        meta.update({k: v for k, v in json.loads(upstream.read_text()).get("meta", {}).items()
                     if k in ("method", "r", "r_ps")})
    report.write_json(out / "report.json", meta)
    _write_json(out / "config.json", run.to_dict())
    save_model(model, out / "model.npz")
    if export:
        export_embeddings(model, out / "embeddings.tsv")
    return report.flat()


def run_sweep(run: RunConfig, split_dir, out_dir) -> int:
    """Run condense plus train-eval per (value, seed) cell and gather ``sweep.csv``.

    Cells whose evaluation report already exists are read back instead of rerun.
    Returns the number of failed cells.
    """
    axis = run.sweep_axis
    if axis not in ("ratio_r", "r_ps"):
        raise UsageError(f"sweep axis must be ratio_r or r_ps, got {axis!r}")
    if not run.sweep_values:
        raise UsageError("sweep needs at least one value (sweep_values or --values)")
    seeds = run.seeds or (run.seed,)
    split = load_split(split_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    metric_keys = [f"{m}@{k}" for m in ("recall", "ndcg") for k in run.ks]
    for value in run.sweep_values:
        for seed in seeds:
            cell = out / f"{axis}={value:g}" / f"seed={seed}"
            overrides = {"seed": str(seed), axis: repr(float(value))}
            row = {"axis": axis, "value": value, "seed": seed}
            try:
                cell_run = resolve_config(_flatten_run(run), overrides)
                report_path = cell / "eval" / "report.json"
                if report_path.exists():
                    flat = json.loads(report_path.read_text())
                else:
                    run_condense(cell_run, split, cell / "condense")
                    run_train_eval(cell_run, split, cell / "condense" / "condensed.tsv", cell / "eval")
                    flat = json.loads(report_path.read_text())
                row["status"] = "ok"
                row.update({k: flat.get(k, "") for k in metric_keys})
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                failed += 1
                row["status"] = f"failed: {exc}"
                logger.error("cell %s=%g seed=%d failed: %s", axis, value, seed, exc)
            rows.append(row)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "seed", "status"] + metric_keys)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "config.json", run.to_dict())
    return failed


def _flatten_run(run: RunConfig) -> dict[str, str]:
    """String key/values that :func:`resolve_config` maps back to ``run``."""
    flat = {}
    for role in TRAIN_ROLES:
        for key, val in asdict(getattr(run, role)).items():
            if key != "seed":
                flat[f"{role}.{key}"] = _render(val)
    for key, val in asdict(run.condense).items():
        if key != "seed":
            flat[key] = _render(val)
    for key, val in asdict(run.baseline).items():
        if key not in ("seed", "method", "ratio_r"):
            flat[key] = _render(val)
    for key in _RUN_KEYS:
        flat[key] = _render(getattr(run, key))
    return flat


def _render(val) -> str:
    if isinstance(val, (tuple, list)):
        return ",".join(repr(v) for v in val)
    return repr(val) if isinstance(val, float) else str(val)


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra configuration override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dconrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="split an interaction file 80/10/10")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")

    p = sub.add_parser("augment", parents=[common], help="train a proxy and build the data pool")
    p.add_argument("--split", required=True, help="directory written by `split`")
    p.add_argument("--r-ps", type=float, dest="r_ps")

    p = sub.add_parser("condense", parents=[common], help="condense or select a small training set")
    p.add_argument("--split", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--ratio", type=float)
    p.add_argument("--r-ps", type=float, dest="r_ps")
    p.add_argument("--pool", help="pool.tsv from `augment` (skips proxy training)")

    p = sub.add_parser("train-eval", parents=[common], help="train the test model and evaluate it")
    p.add_argument("--split", required=True)
    p.add_argument("--train-file", help="training interactions (default: the split's train.tsv)")
    p.add_argument("--model", choices=("mf", "lightgcn"))
    p.add_argument("--groups", help="lower,upper degree thresholds for head/torso/tail")
    p.add_argument("--ks", help="comma separated cutoffs")
    p.add_argument("--export-embeddings", action="store_true")

    p = sub.add_parser("sweep", parents=[common], help="grid of condense + train-eval runs")
    p.add_argument("--split", required=True)
    p.add_argument("--axis", choices=("ratio_r", "r_ps"))
    p.add_argument("--values", help="comma separated values of the swept key")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--method", choices=METHODS)
    return parser


def _config_from_args(args) -> RunConfig:
    values = read_config_file(_require(Path(args.config))) if args.config else {}
    overrides = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    flag_map = {"seed": "seed", "method": "method", "ratio": "ratio_r", "r_ps": "r_ps",
                "groups": "groups", "ks": "ks", "axis": "sweep_axis", "values": "sweep_values",
                "seeds": "seeds"}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = str(val)
    if getattr(args, "model", None):
        overrides["test.architecture"] = args.model
    return resolve_config(values, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _config_from_args(args)
        if args.command == "split":
            run_split(run, args.input, args.out, args.format)
        elif args.command == "augment":
            run_augment(run, load_split(args.split), args.out)
        elif args.command == "condense":
            run_condense(run, load_split(args.split), args.out, args.pool)
        elif args.command == "train-eval":
            split = load_split(args.split)
            train_file = args.train_file or Path(args.split) / "train.tsv"
            run_train_eval(run, split, train_file, args.out, args.export_embeddings)
        elif args.command == "sweep":
            failed = run_sweep(run, args.split, args.out)
            if failed:
                print(f"dconrec: {failed} sweep cell(s) failed; see sweep.csv", file=sys.stderr)
                return 1
    except UsageError as exc:
        print(f"dconrec: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"dconrec: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dconrec: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
