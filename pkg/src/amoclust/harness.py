"""Evaluation protocol: run clustering methods over dataset suites on two
tracks (true K given vs. K inferred) and aggregate scores.

Feature handling follows the training conventions: the amortized model
sees z-normalized label-encoded columns, classical baselines see
z-normalized numerics with categoricals expanded to one-hot indicators.
"""

import csv
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from . import priors as pr
from .cin import (fingerprint_from_partitions, cin_forward, ordinal_predict_k,
                  partition_sweep)
from .metrics import hard_ari, hard_nmi, k_mae, k_mae_median, median_rank
from .pin import forward_partition
from .priors import Dataset
from .training import ModelParams

TRACKS = ("known_k", "inferred_k")

PER_DATASET_COLUMNS = ("method", "dataset", "track", "k_true", "k_pred",
                       "ari", "nmi", "wall_ms")
AGGREGATE_COLUMNS = ("method", "track", "median_ari", "iqr_ari",
                     "median_nmi", "iqr_nmi", "median_rank_ari",
                     "k_mae_median")


# ---------------------------------------------------------------------------
# feature encodings
# ---------------------------------------------------------------------------

def baseline_features(ds: Dataset) -> np.ndarray:
    """Numeric columns z-normalized (population std, constants to zero);
    categorical columns expanded into one-hot indicator blocks."""
    cols = []
    for j, kind in enumerate(ds.col_kind):
        v = np.asarray(ds.x[:, j], dtype=np.float64)
        if kind == "categorical":
            values = np.unique(v)
            for val in values:
                cols.append((v == val).astype(np.float64))
        else:
            std = v.std()
            cols.append((v - v.mean()) / std if std > 1e-12 else np.zeros_like(v))
    return np.stack(cols, axis=1)


def model_features(ds: Dataset) -> Dataset:
    if ds.provenance.get("preprocessed"):
        return ds
    return pr.preprocess(ds, permute_features=False)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

@dataclass
class Method:
    """A clustering method the harness can drive on both tracks.

    `cluster(ds, k, rng)` returns hard labels at a given cluster count;
    `infer_k(ds, k_range, rng)` also chooses the count itself.
    """
    name: str
    cluster: Callable[[Dataset, int, np.random.Generator], np.ndarray]
    infer_k: Callable[[Dataset, Sequence[int], np.random.Generator],
                      Tuple[int, np.ndarray]]


def _baseline_method(name: str, fit: Callable[[np.ndarray, int, np.random.Generator],
                                              np.ndarray]) -> Method:
    def cluster(ds, k, rng):
        return fit(baseline_features(ds), k, rng)

    def infer_k(ds, k_range, rng):
        sel = bl.silhouette_select_k(baseline_features(ds), fit, k_range, rng)
        return sel.k_hat, sel.labels

    return Method(name=name, cluster=cluster, infer_k=infer_k)


def kmeans_method(restarts: int = bl.DEFAULT_RESTARTS) -> Method:
    return _baseline_method(
        "kmeans", lambda x, k, rng: bl.kmeans(x, k, restarts, rng))


def gmm_method(covariance: str = "full",
               restarts: int = bl.DEFAULT_RESTARTS) -> Method:
    tag = "gmm_full" if covariance == "full" else "gmm_spherical"
    return _baseline_method(
        tag, lambda x, k, rng: bl.gmm_em(x, k, covariance, restarts, rng).labels)


def model_method(model: ModelParams, name: str = "amortized") -> Method:
    """The trained model: decode at the requested K, or sweep all
    candidates and let the cardinality head pick one.  The candidate range
    is the model's own (the `k_range` argument only caps it)."""
    def cluster(ds, k, rng):
        pre = model_features(ds)
        with ad.no_grad():
            part = forward_partition(pre, k, model.pin, model.hyper)
        return part.hard_labels()

    def infer_k(ds, k_range, rng):
        pre = model_features(ds)
        with ad.no_grad():
            parts = partition_sweep(pre, model.pin, model.hyper)
            fp = fingerprint_from_partitions(parts)
            if model.cin.ordinal is not None:
                k_hat = ordinal_predict_k(fp, model.cin)
            else:
                post = cin_forward(fp, model.cin)
                k_hat = 2 + int(np.argmax(post.data))
        cap = max(k_range) if len(k_range) else model.hyper.k_max
        k_hat = min(k_hat, cap)
        return k_hat, parts[k_hat - 2].probs.data.argmax(axis=1)

    return Method(name=name, cluster=cluster, infer_k=infer_k)


def oracle_method() -> Method:
    """Ground-truth labels echoed back; the upper bound for sanity checks."""
    def cluster(ds, k, rng):
        return ds.labels.copy()

    def infer_k(ds, k_range, rng):
        return ds.k_true, ds.labels.copy()

    return Method(name="oracle", cluster=cluster, infer_k=infer_k)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MethodResult:
    method_name: str
    track: str
    dataset_names: List[str]
    ari: List[float]
    nmi: List[float]
    predicted_k: List[int]
    k_true: List[int]
    wall_ms: List[float]
    median_ari: float = 0.0
    iqr_ari: float = 0.0
    median_nmi: float = 0.0
    iqr_nmi: float = 0.0
    k_mae: Optional[float] = None
    k_mae_median: Optional[float] = None


def _iqr(values) -> float:
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), [25.0, 75.0])
    return float(hi - lo)


def evaluate_method(method: Method, datasets: Sequence[Dataset], track: str,
                    k_range: Optional[Sequence[int]] = None,
                    names: Optional[Sequence[str]] = None,
                    seed: int = 0) -> MethodResult:
    """Score one method over a suite.  `known_k` hands the method the true
    count; `inferred_k` lets it choose within `k_range` (default 2..10) and
    additionally reports the count error.  Per-dataset RNG substreams keep
    the result independent of suite order."""
    if track not in TRACKS:
        raise ValueError(f"unknown track {track!r}")
    for ds in datasets:
        if ds.labels is None:
            raise ValueError("evaluation datasets need ground-truth labels")
    if names is None:
        names = [f"task{i:04d}" for i in range(len(datasets))]
    aris, nmis, preds, trues, walls = [], [], [], [], []
    for i, ds in enumerate(datasets):
        rng = np.random.default_rng(pr.derive_seed(seed, i))
        rng_range = k_range if k_range is not None else range(2, 11)
        t0 = time.perf_counter()
        if track == "known_k":
            labels = method.cluster(ds, ds.k_true, rng)
            k_pred = ds.k_true
        else:
            k_pred, labels = method.infer_k(ds, rng_range, rng)
        walls.append((time.perf_counter() - t0) * 1000.0)
        if k_pred < 2:
            raise ValueError(f"method {method.name} predicted k={k_pred}")
        aris.append(hard_ari(labels, ds.labels))
        nmis.append(hard_nmi(labels, ds.labels))
        preds.append(int(k_pred))
        trues.append(int(ds.k_true))
    result = MethodResult(
        method_name=method.name, track=track, dataset_names=list(names),
        ari=aris, nmi=nmis, predicted_k=preds, k_true=trues, wall_ms=walls,
        median_ari=float(np.median(aris)), iqr_ari=_iqr(aris),
        median_nmi=float(np.median(nmis)), iqr_nmi=_iqr(nmis))
    if track == "inferred_k":
        result.k_mae = k_mae(preds, trues)
        result.k_mae_median = k_mae_median(preds, trues)
    return result


# ---------------------------------------------------------------------------
# benchmark driver
# ---------------------------------------------------------------------------

def load_dataset_dir(data_dir) -> Tuple[List[str], List[Dataset], List[str]]:
    """All saved datasets under `data_dir` (pairs of <base>.csv and
    <base>.meta.json), sorted by name.  Unreadable entries are returned
    separately so callers can emit warning rows."""
    data_dir = Path(data_dir)
    bases = sorted(p.name[:-len(".meta.json")]
                   for p in data_dir.glob("*.meta.json"))
    names, datasets, failed = [], [], []
    for base in bases:
        try:
            datasets.append(pr.load_dataset(data_dir / base))
            names.append(base)
        except Exception as exc:               # noqa: BLE001 - warn and move on
            print(f"warning: skipping {base}: {exc}", file=sys.stderr)
            failed.append(base)
    return names, datasets, failed


def benchmark_run(methods: Sequence[Method], data_dir, out_dir,
                  tracks: Sequence[str] = TRACKS,
                  k_range: Optional[Sequence[int]] = None,
                  seed: int = 0) -> Dict[str, List[MethodResult]]:
    """Full grid: every method on every dataset and track.  Writes
    `results_per_dataset.csv` and `results_aggregate.csv` under `out_dir`
    and returns the MethodResult objects grouped by track."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names, datasets, failed = load_dataset_dir(data_dir)

    by_track: Dict[str, List[MethodResult]] = {}
    for track in tracks:
        if track not in TRACKS:
            raise ValueError(f"unknown track {track!r}")
        by_track[track] = [
            evaluate_method(m, datasets, track, k_range=k_range, names=names,
                            seed=seed)
            for m in methods]

    with open(out_dir / "results_per_dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_DATASET_COLUMNS)
        for base in failed:
            writer.writerow(["warning", base, "skipped", "", "", "", "", ""])
        for track in tracks:
            for res in by_track[track]:
                for i, name in enumerate(res.dataset_names):
                    writer.writerow([
                        res.method_name, name, track, res.k_true[i],
                        res.predicted_k[i], repr(res.ari[i]),
                        repr(res.nmi[i]), f"{res.wall_ms[i]:.3f}"])

    with open(out_dir / "results_aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for track in tracks:
            results = by_track[track]
            score_matrix = [res.ari for res in results]
            ranks = median_rank(score_matrix, higher_better=True)
            for res, rank in zip(results, ranks):
                writer.writerow([
                    res.method_name, track,
                    repr(res.median_ari), repr(res.iqr_ari),
                    repr(res.median_nmi), repr(res.iqr_nmi),
                    repr(rank.median_rank), "" if res.k_mae_median is None
                    else repr(res.k_mae_median)])
    return by_track
