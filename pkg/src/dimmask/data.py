"""Datasets: hashed CSV ingestion, a planted-dimension synthetic generator,
and shuffled batching.

Both sources produce the same columnar layout: an (N, F) int64 id matrix plus
a float64 0/1 label vector.  Bucketization is stateless (FNV-1a of
"feature:value" mod bucket count), so ingestion order can never change a
row's ids.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .numerics import RngStream, sigmoid

log = logging.getLogger(__name__)

# stream-key namespaces for data generation and shuffling
KEY_LATENT = 4 << 32
KEY_MIXING = 5 << 32
KEY_IDS = 6 << 32
KEY_NOISE = 7 << 32
KEY_LABELS = 8 << 32
KEY_TEACHER = 11 << 32

TEACHER_UNITS = 8
KEY_SHUFFLE = 9 << 32
KEY_RESERVOIR = 10 << 32

SYNTH_MAGIC = "#DMLSYN v1"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# default bucket counts for the public CTR layout: the five high-cardinality
# id-like columns get 2^18 buckets, every other categorical 256, hour-of-day 24
HIGH_CARD_COLUMNS = ("site_id", "app_id", "device_id", "device_ip", "device_model")
LOW_CARD_COLUMNS = (
    "C1", "banner_pos", "site_domain", "site_category", "app_domain",
    "app_category", "device_type", "device_conn_type",
    "C14", "C15", "C16", "C17", "C18", "C19", "C20", "C21",
)


@dataclass
class FeatureSpec:
    """One categorical feature: its hashing width plus its model settings."""

    name: str
    buckets: int
    base_dim: int = 16
    use_dml: bool = True
    initial_effective_dim: float = 3.0
    slope: float = 2.0
    alpha: float = 5.0
    reg_kind: str = "l1"
    reg_weight: float = 0.001

    def __post_init__(self):
        if self.buckets < 1:
            raise InputError(f"{self.name}: buckets must be >= 1, got {self.buckets}")
        if self.base_dim < 0:
            raise InputError(f"{self.name}: base_dim must be >= 0, got {self.base_dim}")
        if not 0.0 <= self.initial_effective_dim <= self.base_dim:
            raise InputError(
                f"{self.name}: initial_effective_dim must lie in [0, base_dim], "
                f"got {self.initial_effective_dim} with base_dim {self.base_dim}"
            )


@dataclass
class Dataset:
    ids: np.ndarray  # (N, F) int64 bucket indices
    labels: np.ndarray  # (N,) float64 in {0, 1}
    feature_names: List[str]
    buckets: List[int]
    planted: Optional[List[int]] = None  # synthetic ground truth; 0 = irrelevant
    skipped: int = 0  # malformed rows dropped during ingestion

    def __len__(self):
        return self.ids.shape[0]


def fnv1a64(text: str) -> int:
    """FNV-1a over the UTF-8 bytes, 64-bit."""
    h = FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def bucketize(feature: str, value: str, buckets: int) -> int:
    return fnv1a64(f"{feature}:{value}") % buckets


def default_avazu_features(base_dim: int = 16, **overrides) -> List[FeatureSpec]:
    """The standard public-CTR feature set; keyword overrides apply to every feature."""
    specs = [FeatureSpec("hour", 24, base_dim, **overrides)]
    for name in HIGH_CARD_COLUMNS:
        specs.append(FeatureSpec(name, 1 << 18, base_dim, **overrides))
    for name in LOW_CARD_COLUMNS:
        specs.append(FeatureSpec(name, 256, base_dim, **overrides))
    return specs


def ingest_avazu(path, features: Sequence[FeatureSpec], row_cap: Optional[int] = None,
                 seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Read a CTR csv (header with `click`, `hour`, and the feature columns),
    hash values to buckets, and time-split: rows from the last calendar day in
    the file become the test set.

    `hour` values look like YYMMDDHH; the feature named "hour" maps directly to
    hour-of-day (24 buckets, no hashing).  Malformed rows are counted and
    skipped.  `row_cap` keeps a seeded reservoir sample of that many rows.
    """
    names = [f.name for f in features]
    rows: List[Tuple[List[int], float, str]] = []  # (ids, label, day)
    skipped = 0
    seen = 0
    reservoir = RngStream(seed, KEY_RESERVOIR)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file")
        col = {name: i for i, name in enumerate(header)}
        for required in ["click", "hour"] + [n for n in names if n != "hour"]:
            if required not in col:
                raise InputError(f"{path}: missing column {required!r}")
        for raw in reader:
            if len(raw) != len(header):
                skipped += 1
                continue
            hour_str = raw[col["hour"]]
            click_str = raw[col["click"]]
            if not re.fullmatch(r"\d{8}", hour_str) or click_str not in ("0", "1"):
                skipped += 1
                continue
            hh = int(hour_str[6:8])
            if hh > 23:
                skipped += 1
                continue
            ids = []
            for f in features:
                if f.name == "hour":
                    ids.append(hh % f.buckets)
                else:
                    ids.append(bucketize(f.name, raw[col[f.name]], f.buckets))
            row = (ids, float(click_str), hour_str[:6])
            if row_cap is None or len(rows) < row_cap:
                rows.append(row)
            else:
                # reservoir sampling keeps each row with probability cap/seen
                j = int(reservoir.uniform(1)[0] * (seen + 1))
                if j < row_cap:
                    rows[j] = row
            seen += 1
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    if not rows:
        raise InputError(f"{path}: no usable rows")
    days = sorted({r[2] for r in rows})
    test_day = days[-1]
    buckets = [f.buckets for f in features]

    def build(selected):
        if selected:
            ids = np.array([r[0] for r in selected], dtype=np.int64)
            labels = np.array([r[1] for r in selected], dtype=np.float64)
        else:
            ids = np.zeros((0, len(features)), dtype=np.int64)
            labels = np.zeros(0, dtype=np.float64)
        return Dataset(ids, labels, list(names), list(buckets), None, skipped)

    train = build([r for r in rows if r[2] != test_day])
    test = build([r for r in rows if r[2] == test_day])
    return train, test


def _unit_variance(x: np.ndarray) -> np.ndarray:
    """Center and rescale to unit sample variance (no-op for constant input)."""
    sd = float(np.std(x))
    if sd == 0.0:
        return x - np.mean(x)
    return (x - np.mean(x)) / sd


def gen_synthetic(vocab: int, planted: Sequence[int], rows: int, noise: float,
                  seed: int, rate: float = 0.2, main_gain: float = 2.0,
                  cross_gain: float = 2.0) -> Dataset:
    """Labels driven by per-feature latent vectors of known rank.

    Feature f assigns each id a k_f-dimensional latent vector of unit
    normals.  The label logit mixes a main effect (a fixed projection of
    each latent, rank 1 on its own) with the output of a small fixed
    random ReLU layer that reads every relevant feature's full latent
    through dense weights.  The ReLU part couples features, so the best
    predictor has to carry all k_f coordinates per id into the shared
    layers: k_f is the intrinsic embedding dimension of feature f.  A
    planted value of 0 marks an irrelevant feature: its mixing weights
    are zero, so its latents never enter the logit.  Both signal parts
    are normalized to unit sample variance, making main_gain/cross_gain
    directly comparable with `noise`; the bias is solved so the mean
    label probability is ~`rate`.
    """
    if vocab < 2:
        raise InputError(f"vocab must be >= 2, got {vocab}")
    if rows < 1:
        raise InputError(f"rows must be >= 1, got {rows}")
    if not 0.0 < rate < 1.0:
        raise InputError(f"rate must be in (0, 1), got {rate}")
    if any(k < 0 for k in planted):
        raise InputError("planted dims must be >= 0 (0 marks an irrelevant feature)")
    n_features = len(planted)
    ids = np.empty((rows, n_features), dtype=np.int64)
    row_latents: dict[int, np.ndarray] = {}
    main = np.zeros(rows)
    pre = None
    for f, k in enumerate(planted):
        draws = RngStream(seed, KEY_IDS | f).uniform(rows)
        ids[:, f] = np.minimum((draws * vocab).astype(np.int64), vocab - 1)
        if k == 0:
            continue
        latent = RngStream(seed, KEY_LATENT | f).normal((vocab, int(k)))
        mixing = RngStream(seed, KEY_MIXING | f)
        direction = mixing.normal(int(k))
        direction /= np.linalg.norm(direction)
        row_latents[f] = latent[ids[:, f]]
        main += row_latents[f] @ direction
        taps = mixing.normal((TEACHER_UNITS, int(k))) / np.sqrt(int(k))
        contrib = row_latents[f] @ taps.T
        pre = contrib if pre is None else pre + contrib
    score = np.zeros(rows)
    if row_latents:
        n_rel = len(row_latents)
        score += main_gain * _unit_variance(main / np.sqrt(n_rel))
        teacher = RngStream(seed, KEY_TEACHER)
        offsets = teacher.normal(TEACHER_UNITS)
        readout = teacher.normal(TEACHER_UNITS)
        hidden = np.maximum(0.0, pre / np.sqrt(n_rel) + offsets)
        score += cross_gain * _unit_variance(hidden @ readout)
    score += noise * RngStream(seed, KEY_NOISE).normal(rows)
    lo, hi = -30.0, 30.0
    for _ in range(80):  # bisect the bias so mean probability hits `rate`
        mid = 0.5 * (lo + hi)
        if float(np.mean(sigmoid(score + mid))) < rate:
            lo = mid
        else:
            hi = mid
    bias = 0.5 * (lo + hi)
    probs = sigmoid(score + bias)
    labels = (RngStream(seed, KEY_LABELS).uniform(rows) < probs).astype(np.float64)
    names = [f"f{f}" for f in range(n_features)]
    return Dataset(ids, labels, names, [vocab] * n_features, list(planted))


def save_synthetic(ds: Dataset, path, seed: int):
    """Persist as `#DMLSYN v1 seed=... planted=...` + a plain id csv."""
    planted = ds.planted if ds.planted is not None else [0] * len(ds.feature_names)
    lines = [
        f"{SYNTH_MAGIC} seed={seed} planted={','.join(str(k) for k in planted)}",
        ",".join(ds.feature_names + ["label"]),
    ]
    body = np.column_stack([ds.ids, ds.labels.astype(np.int64)])
    lines.extend(",".join(str(v) for v in row) for row in body.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_synthetic(path) -> Tuple[Dataset, int]:
    """Inverse of save_synthetic; bucket counts are inferred as max id + 1."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SYNTH_MAGIC):
        raise InputError(f"{path}: not a synthetic dataset (missing {SYNTH_MAGIC} header)")
    m = re.fullmatch(rf"{re.escape(SYNTH_MAGIC)} seed=(-?\d+) planted=([\d,]+)", lines[0])
    if not m:
        raise InputError(f"{path}: malformed synthetic header: {lines[0]!r}")
    seed = int(m.group(1))
    planted = [int(k) for k in m.group(2).split(",")]
    header = lines[1].split(",")
    if header[-1] != "label" or len(header) != len(planted) + 1:
        raise InputError(f"{path}: malformed synthetic column header")
    try:
        body = np.array(
            [[int(v) for v in line.split(",")] for line in lines[2:] if line],
            dtype=np.int64,
        )
    except ValueError as e:
        raise InputError(f"{path}: bad row in synthetic data: {e}")
    if body.ndim != 2 or body.shape[1] != len(header):
        raise InputError(f"{path}: ragged synthetic data")
    ids = body[:, :-1]
    labels = body[:, -1].astype(np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise InputError(f"{path}: labels must be 0/1")
    buckets = [int(ids[:, f].max()) + 1 if len(ids) else 1 for f in range(ids.shape[1])]
    return Dataset(ids, labels, header[:-1], buckets, planted), seed


def split_tail(ds: Dataset, test_fraction: float) -> Tuple[Dataset, Dataset]:
    """Deterministic holdout: the last `test_fraction` of rows become the test set."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = max(1, int(round(len(ds) * test_fraction)))
    cut = len(ds) - n_test
    if cut < 1:
        raise InputError("test_fraction leaves no training rows")

    def piece(sl):
        return Dataset(ds.ids[sl], ds.labels[sl], ds.feature_names, ds.buckets,
                       ds.planted, ds.skipped)

    return piece(slice(0, cut)), piece(slice(cut, None))


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int = 0
            ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled minibatches; the final short batch is emitted.

    The permutation depends only on (seed, epoch), never on consumption order.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    perm = RngStream(seed, KEY_SHUFFLE | epoch).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        take = perm[start:start + batch_size]
        yield ds.ids[take], ds.labels[take]
