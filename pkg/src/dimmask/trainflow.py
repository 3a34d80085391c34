"""Run orchestration: config parsing, the training loop, trimming, sweeps.

A run reads one data file (synthetic id csv or hashed CTR csv), trains the
tower with per-table dimension masks, and leaves four artifacts in the output
directory: spec.json + params.bin (the checkpoint), dims.csv (the per-step
effective-dimension trajectory), and metrics.csv (eval rows).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dml, nn
from .data import (Dataset, FeatureSpec, default_avazu_features, ingest_avazu,
                   load_synthetic, split_tail, batches)
from .errors import InputError
from .metrics import EvalReport, evaluate
from .nn import AdamConfig, Model, ModelSpec

log = logging.getLogger(__name__)

# plateau reporting: trailing window length in steps and the x2 band within it
PLATEAU_WINDOW = 500
PLATEAU_BAND = 0.25

_FEATURE_KEYS = {f.name for f in dataclasses.fields(FeatureSpec)}


@dataclass
class RunConfig:
    """Flat run description; the JSON config file mirrors these field names."""

    data: str
    out: Optional[str] = None
    seed: int = 1
    epochs: int = 1
    batch_size: int = 1024
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    hidden: Sequence[int] = (128, 64)
    base_dim: int = 16
    use_dml: bool = True
    slope: float = 2.0
    alpha: float = 5.0
    regularizer: str = "l1"
    weight: Optional[float] = None  # None: 0 for expand runs, 1e-3 for shrink runs
    init_strategy: str = "expand"
    initial_effective_dim: Optional[float] = None  # None: 3 for expand, base_dim for shrink
    features: Optional[List[dict]] = None  # per-feature overrides by name
    row_cap: Optional[int] = None
    test_fraction: float = 0.1
    dims_log_every: int = 10
    eval_every_epochs: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise InputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.base_dim < 1:
            raise InputError(f"base_dim must be >= 1, got {self.base_dim}")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise InputError(f"hidden widths must be positive, got {self.hidden}")
        if self.init_strategy not in ("expand", "shrink"):
            raise InputError(f"init_strategy must be 'expand' or 'shrink', got {self.init_strategy!r}")
        if self.regularizer not in ("l1", "l2"):
            raise InputError(f"regularizer must be 'l1' or 'l2', got {self.regularizer!r}")
        if self.weight is not None and self.weight < 0:
            raise InputError(f"weight must be >= 0, got {self.weight}")
        if self.row_cap is not None and self.row_cap < 1:
            raise InputError(f"row_cap must be >= 1, got {self.row_cap}")
        if not 0.0 < self.test_fraction < 1.0:
            raise InputError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.dims_log_every < 1:
            raise InputError(f"dims_log_every must be >= 1, got {self.dims_log_every}")
        if self.eval_every_epochs < 1:
            raise InputError(f"eval_every_epochs must be >= 1, got {self.eval_every_epochs}")

    @property
    def resolved_weight(self) -> float:
        if self.weight is not None:
            return self.weight
        return 0.0 if self.init_strategy == "expand" else 1e-3

    def resolved_initial_dim(self, base_dim: int) -> float:
        if self.initial_effective_dim is not None:
            return self.initial_effective_dim
        if self.init_strategy == "expand":
            return min(3.0, float(base_dim))
        return float(base_dim)


def config_from_dict(raw: dict) -> RunConfig:
    """Strict construction: any key not named by RunConfig is an error."""
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    if "data" not in raw:
        raise InputError("config is missing required key 'data'")
    if raw.get("features") is not None:
        for entry in raw["features"]:
            if not isinstance(entry, dict) or "name" not in entry:
                raise InputError("each features[] entry must be an object with a 'name'")
            bad = sorted(set(entry) - _FEATURE_KEYS)
            if bad:
                raise InputError(f"unknown feature key(s): {', '.join(bad)}")
    try:
        return RunConfig(**raw)
    except TypeError as e:
        raise InputError(f"bad config: {e}")


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise InputError(f"config is not valid JSON: {e}")
    return config_from_dict(raw)


@dataclass
class DimTrajectory:
    """Per-step effective-dimension log for every masked feature."""

    rows: List[Tuple[int, str, float, int]] = field(default_factory=list)

    def record(self, step: int, feature: str, effective_dim: float, ceil_dim: int):
        self.rows.append((step, feature, effective_dim, ceil_dim))

    def write(self, path):
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "feature", "x2", "ceil_dim"])
            for step, name, x2, ceil_dim in self.rows:
                w.writerow([step, name, f"{x2:.6f}", ceil_dim])

    def feature_steps(self, feature: str) -> List[Tuple[int, float]]:
        return [(s, x) for s, n, x, _ in self.rows if n == feature]

    def plateaued(self, feature: str, window: int = PLATEAU_WINDOW,
                  band: float = PLATEAU_BAND) -> bool:
        pts = self.feature_steps(feature)
        if not pts:
            return False
        last = pts[-1][0]
        if last < window:
            return False
        tail = [x for s, x in pts if s >= last - window]
        return max(tail) - min(tail) < band


def read_dims_csv(path) -> DimTrajectory:
    traj = DimTrajectory()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            traj.record(int(row["step"]), row["feature"], float(row["x2"]),
                        int(row["ceil_dim"]))
    return traj


def _detect_format(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
    except FileNotFoundError:
        raise InputError(f"data file not found: {path}")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    if first.startswith("#DMLSYN"):
        return "synthetic"
    if "click" in [c.strip() for c in first.strip().split(",")]:
        return "avazu"
    raise InputError(f"{path}: unrecognized data format (expected a synthetic header or a 'click' column)")


def _feature_overrides(config: RunConfig) -> Dict[str, dict]:
    if not config.features:
        return {}
    return {entry["name"]: entry for entry in config.features}


def _make_feature(config: RunConfig, name: str, buckets: Optional[int],
                  overrides: Dict[str, dict]) -> FeatureSpec:
    o = dict(overrides.get(name, {}))
    o.pop("name", None)
    if buckets is None and "buckets" not in o:
        raise InputError(f"feature {name!r} needs an explicit bucket count for this data source")
    base_dim = int(o.pop("base_dim", config.base_dim))
    use_dml = bool(o.pop("use_dml", config.use_dml))
    init = o.pop("initial_effective_dim", None)
    if init is None:
        init = config.resolved_initial_dim(base_dim) if use_dml else 0.0
    return FeatureSpec(
        name=name,
        buckets=int(o.pop("buckets", buckets)),
        base_dim=base_dim,
        use_dml=use_dml,
        initial_effective_dim=float(init),
        slope=float(o.pop("slope", config.slope)),
        alpha=float(o.pop("alpha", config.alpha)),
        reg_kind=str(o.pop("reg_kind", config.regularizer)),
        reg_weight=float(o.pop("reg_weight", config.resolved_weight)),
    )


def load_run_data(config: RunConfig) -> Tuple[Dataset, Dataset, List[FeatureSpec], str]:
    """Resolve (train split, test split, feature specs, format) for a config."""
    kind = _detect_format(config.data)
    overrides = _feature_overrides(config)
    if kind == "synthetic":
        ds, _ = load_synthetic(config.data)
        if config.row_cap is not None and config.row_cap < len(ds):
            ds = Dataset(ds.ids[:config.row_cap], ds.labels[:config.row_cap],
                         ds.feature_names, ds.buckets, ds.planted, ds.skipped)
        unknown = sorted(set(overrides) - set(ds.feature_names))
        if unknown:
            raise InputError(f"config features not present in data: {', '.join(unknown)}")
        specs = [
            _make_feature(config, name, ds.buckets[i], overrides)
            for i, name in enumerate(ds.feature_names)
        ]
        train_ds, test_ds = split_tail(ds, config.test_fraction)
        return train_ds, test_ds, specs, kind
    if config.features:
        specs = [_make_feature(config, e["name"], None, overrides) for e in config.features]
    else:
        specs = default_avazu_features(
            config.base_dim,
            use_dml=config.use_dml,
            initial_effective_dim=config.resolved_initial_dim(config.base_dim)
            if config.use_dml else 0.0,
            slope=config.slope,
            alpha=config.alpha,
            reg_kind=config.regularizer,
            reg_weight=config.resolved_weight,
        )
    train_ds, test_ds = ingest_avazu(config.data, specs, config.row_cap, config.seed)
    return train_ds, test_ds, specs, kind


def _predict_logits(model: Model, ds: Dataset, batch: int = 8192) -> np.ndarray:
    out = np.empty(len(ds))
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        r = nn.model_forward_backward(model, ds.ids[sl], ds.labels[sl], "eval",
                                      want_grads=False)
        out[sl] = r.logits
    return out


def _metrics_row(step: int, split: str, report: EvalReport) -> list:
    auc_text = "" if report.auc is None else f"{report.auc:.6f}"
    return [step, split, f"{report.logloss:.6f}", auc_text, f"{report.rce:.6f}"]


@dataclass
class TrainResult:
    out_dir: str
    meta: dict
    report: Optional[EvalReport]
    trajectory: DimTrajectory
    model: Model


def train(config: RunConfig) -> TrainResult:
    """Train per the config and write the four run artifacts to config.out."""
    if not config.out:
        raise InputError("an output directory is required (config 'out' or --out)")
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, specs, data_kind = load_run_data(config)
    if len(train_ds) == 0:
        raise InputError("training split is empty")
    rate = float(np.mean(train_ds.labels))
    if not 0.0 < rate < 1.0:
        raise InputError(f"training labels are single-class (positive rate {rate})")
    spec = ModelSpec(specs, tuple(int(h) for h in config.hidden))
    model = nn.build_model(spec, config.seed)
    adam = AdamConfig(config.learning_rate, config.adam_beta1, config.adam_beta2,
                      config.adam_epsilon)
    trajectory = DimTrajectory()
    metrics_rows: List[list] = []
    masked = [(f, s) for f, s in enumerate(model.masks) if s is not None]

    def log_dims(step):
        for f, state in masked:
            eff = max(0.0, state.scaled_dim * state.original_dim)
            trajectory.record(step, specs[f].name, eff, dml.finalize_dim(state))

    step = 0
    total_steps = config.epochs * math.ceil(len(train_ds) / config.batch_size)
    for epoch in range(config.epochs):
        for bids, blab in batches(train_ds, config.batch_size, config.seed, epoch):
            step += 1
            nn.zero_grads(model)
            result = nn.model_forward_backward(model, bids, blab, "train")
            if not np.isfinite(result.total_loss):
                raise RuntimeError(
                    f"non-finite loss at step {step} (data {result.data_loss}, "
                    f"reg {result.reg_loss})"
                )
            nn.model_adam_step(model, adam, step)
            log.debug("step=%d loss=%.6f data=%.6f reg=%.6f", step,
                      result.total_loss, result.data_loss, result.reg_loss)
            if step == 1 or step % config.dims_log_every == 0 or step == total_steps:
                log_dims(step)
        if (epoch + 1) % config.eval_every_epochs == 0 or epoch == config.epochs - 1:
            if len(test_ds):
                report = evaluate(_predict_logits(model, test_ds), test_ds.labels, rate)
                metrics_rows.append(_metrics_row(step, "test", report))
                log.info("epoch %d/%d step %d: test logloss=%.6f rce=%.6f",
                         epoch + 1, config.epochs, step, report.logloss, report.rce)
    final_report = None
    if len(test_ds):
        final_report = evaluate(_predict_logits(model, test_ds), test_ds.labels, rate)

    finalized = {
        specs[f].name: dml.finalize_dim(state) for f, state in masked
    }
    final_eff = {
        specs[f].name: max(0.0, state.scaled_dim * state.original_dim)
        for f, state in masked
    }
    plateaued = {specs[f].name: trajectory.plateaued(specs[f].name) for f, _ in masked}
    meta = {
        "version": nn.CHECKPOINT_VERSION,
        "kind": "dml-train",
        "seed": config.seed,
        "hidden": list(spec.hidden),
        "features": [dataclasses.asdict(fs) for fs in specs],
        "hyperparameters": {
            "learning_rate": config.learning_rate,
            "adam_beta1": config.adam_beta1,
            "adam_beta2": config.adam_beta2,
            "adam_epsilon": config.adam_epsilon,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "init_strategy": config.init_strategy,
            "initial_effective_dim": config.resolved_initial_dim(config.base_dim),
            "slope": config.slope,
            "alpha": config.alpha,
            "regularizer": config.regularizer,
            "weight": config.resolved_weight,
        },
        "data": {
            "path": str(config.data),
            "format": data_kind,
            "train_rows": len(train_ds),
            "test_rows": len(test_ds),
            "skipped_rows": train_ds.skipped,
            "row_cap": config.row_cap,
            "test_fraction": config.test_fraction,
        },
        "train_positive_rate": rate,
        "final_step": step,
        "finalized_dims": finalized,
        "final_effective_dims": final_eff,
        "plateaued": plateaued,
        "test_report": None if final_report is None else dataclasses.asdict(final_report),
    }
    nn.save_checkpoint(out_dir, model, meta)
    trajectory.write(out_dir / "dims.csv")
    _write_metrics(out_dir / "metrics.csv", metrics_rows)
    return TrainResult(str(out_dir), meta, final_report, trajectory, model)


def _write_metrics(path, rows: List[list]):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "split", "logloss", "auc", "rce"])
        w.writerows(rows)


def _append_metrics(path, row: list):
    exists = Path(path).exists()
    with open(path, "a", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(["step", "split", "logloss", "auc", "rce"])
        w.writerow(row)


def eval_checkpoint(model_dir, data_path) -> EvalReport:
    """Evaluate a saved model on every row of a data file; append to metrics.csv."""
    model, meta = nn.load_checkpoint(model_dir)
    kind = _detect_format(data_path)
    if kind == "synthetic":
        ds, _ = load_synthetic(data_path)
        if ds.ids.shape[1] != len(model.tables):
            raise InputError(
                f"{data_path}: {ds.ids.shape[1]} features, model has {len(model.tables)}"
            )
        for f, table in enumerate(model.tables):
            if len(ds) and int(ds.ids[:, f].max()) >= table.vocab:
                raise InputError(
                    f"{data_path}: feature {ds.feature_names[f]} has ids beyond "
                    f"the model's {table.vocab} buckets"
                )
    else:
        specs = [FeatureSpec(**f) for f in meta["features"]]
        train_part, test_part = ingest_avazu(data_path, specs)
        ds = Dataset(
            np.concatenate([train_part.ids, test_part.ids]),
            np.concatenate([train_part.labels, test_part.labels]),
            train_part.feature_names, train_part.buckets, None,
            train_part.skipped,
        )
    if len(ds) == 0:
        raise InputError(f"{data_path}: no rows to evaluate")
    report = evaluate(_predict_logits(model, ds), ds.labels,
                      float(meta["train_positive_rate"]))
    _append_metrics(Path(model_dir) / "metrics.csv",
                    _metrics_row(int(meta.get("final_step", 0)), "eval", report))
    return report


def trim(model_dir, out_dir) -> dict:
    """Cut each masked table to its discovered width and drop the masks.

    Retained columns are rescaled by the expected gate of their final mask
    value, so eval-mode predictions are approximately preserved; the rows of
    the first dense layer that correspond to dropped columns are deleted.
    """
    model, meta = nn.load_checkpoint(model_dir)
    if not any(s is not None for s in model.masks):
        raise InputError(f"{model_dir}: model has no dimension masks to trim")
    old_specs = [FeatureSpec(**f) for f in meta["features"]]
    new_specs: List[FeatureSpec] = []
    new_tables: List[np.ndarray] = []
    keep_cols: List[np.ndarray] = []
    offset = 0
    for f, table in enumerate(model.tables):
        state = model.masks[f]
        fs = old_specs[f]
        if state is None:
            width = table.dim
            new_tables.append(table.weights.copy())
            keep_cols.append(np.arange(offset, offset + width))
            new_specs.append(dataclasses.replace(fs))
        else:
            width = dml.finalize_dim(state)
            mask, _, _ = dml.compute_mask(state)
            gate = dml.expected_gate(mask, state.alpha)
            new_tables.append(table.weights[:, :width] * gate[:width])
            keep_cols.append(np.arange(offset, offset + width))
            new_specs.append(dataclasses.replace(
                fs, base_dim=width, use_dml=False, initial_effective_dim=0.0))
        offset += table.dim
    keep = np.concatenate(keep_cols).astype(np.int64)
    new_spec = ModelSpec(new_specs, tuple(meta["hidden"]))
    new_model = nn.build_model(new_spec, int(meta["seed"]))
    for table, w in zip(new_model.tables, new_tables):
        table.weights[:] = w
    first = model.layers[0]
    new_model.layers[0].weights[:] = first.weights[keep]
    new_model.layers[0].bias[:] = first.bias
    for old, new in zip(model.layers[1:], new_model.layers[1:]):
        new.weights[:] = old.weights
        new.bias[:] = old.bias
    new_meta = dict(meta)
    new_meta["kind"] = "dml-trimmed"
    new_meta["trimmed_from"] = str(model_dir)
    new_meta["features"] = [dataclasses.asdict(fs) for fs in new_specs]
    nn.save_checkpoint(out_dir, new_model, new_meta)
    return new_meta


SWEEP_WEIGHTS = (1e-2, 1e-3, 1e-4, 1e-5)


def _sweep_worker(config_dict: dict) -> dict:
    config = RunConfig(**config_dict)
    result = train(config)
    return result.meta


def _run_summary(run_id: str, reg: str, weight: Optional[float], meta: dict) -> dict:
    features = meta["features"]
    finalized = meta.get("finalized_dims") or {}
    total = 0
    zero = 0
    for fs in features:
        width = finalized.get(fs["name"], fs["base_dim"])
        total += int(width)
        zero += int(width) == 0
    report = meta.get("test_report") or {}
    return {
        "run": run_id,
        "regularizer": reg,
        "weight": weight,
        "total_dims": total,
        "test_rce": report.get("rce"),
        "test_auc": report.get("auc"),
        "zero_dim_features": zero,
    }


def sweep(config: RunConfig, out_dir, regularizers: Sequence[str] = ("l1", "l2"),
          weights: Sequence[float] = SWEEP_WEIGHTS, jobs: int = 1) -> List[dict]:
    """Grid of regularizer x weight runs plus one no-mask baseline.

    Each run gets its own derived seed and subdirectory; individual failures
    are recorded and do not stop the sweep.  Writes frontier.csv and returns
    its rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for reg in regularizers:
        if reg not in ("l1", "l2"):
            raise InputError(f"unknown regularizer {reg!r}")
    plan: List[Tuple[str, Optional[str], Optional[float]]] = []
    for reg in regularizers:
        for w in weights:
            plan.append((f"{reg}_{w:g}", reg, float(w)))
    plan.append(("baseline", None, None))
    configs = []
    for i, (run_id, reg, w) in enumerate(plan):
        sub = dataclasses.replace(
            config,
            out=str(out / run_id),
            seed=config.seed + 1000 * (i + 1),
            regularizer=reg if reg else config.regularizer,
            weight=w if w is not None else config.weight,
            use_dml=reg is not None,
        )
        configs.append(dataclasses.asdict(sub))
    results: List[Optional[dict]] = [None] * len(plan)
    failures: List[Tuple[str, str]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_worker, c) for c in configs]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except Exception as e:  # record, keep sweeping
                    failures.append((plan[i][0], str(e)))
    else:
        for i, c in enumerate(configs):
            try:
                results[i] = _sweep_worker(c)
            except Exception as e:
                failures.append((plan[i][0], str(e)))
    rows = []
    for (run_id, reg, w), meta in zip(plan, results):
        if meta is None:
            continue
        rows.append(_run_summary(run_id, reg or "", w, meta))
    for run_id, err in failures:
        log.error("sweep run %s failed: %s", run_id, err)
    if failures:
        (out / "failures.txt").write_text(
            "".join(f"{run_id}: {err}\n" for run_id, err in failures), encoding="utf-8")
    write_frontier(out / "frontier.csv", rows)
    return rows


def write_frontier(path, rows: List[dict]):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "regularizer", "weight", "total_dims", "test_rce",
                    "test_auc", "zero_dim_features"])
        for r in rows:
            w.writerow([
                r["run"],
                r["regularizer"],
                "" if r["weight"] is None else f"{r['weight']:g}",
                r["total_dims"],
                "" if r["test_rce"] is None else f"{r['test_rce']:.6f}",
                "" if r["test_auc"] is None else f"{r['test_auc']:.6f}",
                r["zero_dim_features"],
            ])


def read_frontier(path) -> List[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            rows.append({
                "run": raw["run"],
                "regularizer": raw["regularizer"],
                "weight": float(raw["weight"]) if raw["weight"] else None,
                "total_dims": int(raw["total_dims"]),
                "test_rce": float(raw["test_rce"]) if raw["test_rce"] else None,
                "test_auc": float(raw["test_auc"]) if raw["test_auc"] else None,
                "zero_dim_features": int(raw["zero_dim_features"]),
            })
    return rows
