"""Classical clustering baselines owned by this package: k-means with
k-means++ seeding, EM for Gaussian mixtures (full and shared-spherical
covariances), and silhouette-based K selection.

Everything is plain numpy on dense arrays.  Inputs are expected to be
fully numeric; the evaluation harness handles categorical encoding
before calling in here.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

KMEANS_TOL = 1e-6
KMEANS_MAX_ITERS = 300
EM_TOL = 1e-5
EM_MAX_ITERS = 300
EM_REG = 1e-6
DEFAULT_RESTARTS = 10
COVARIANCE_MODES = ("full", "spherical_shared")

_SINGULAR_RETRIES = 5


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, N x K, clipped at zero against roundoff."""
    d2 = (x * x).sum(1)[:, None] + (centers * centers).sum(1)[None, :] \
        - 2.0 * (x @ centers.T)
    return np.maximum(d2, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, each next drawn with
    probability proportional to the squared distance to the nearest chosen
    center.  When every remaining point coincides with a center the draw
    falls back to uniform."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    idx = int(rng.integers(n))
    centers[0] = x[idx]
    d2 = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray
           ) -> Tuple[np.ndarray, np.ndarray, float, List[float]]:
    """Lloyd iterations from the given centers until the largest centroid
    shift drops below KMEANS_TOL.  An empty cluster is re-seeded at the
    point farthest from its nearest centroid.  Returns labels, centers,
    final inertia, and the inertia after each assignment (for the
    monotonicity contract)."""
    k = centers.shape[0]
    centers = centers.copy()
    history: List[float] = []
    labels = np.zeros(x.shape[0], dtype=np.intp)
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        nearest = d2[np.arange(x.shape[0]), labels]
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(nearest))
                centers[j] = x[far]
                labels[far] = j
                nearest[far] = 0.0
        history.append(float(nearest.sum()))
        new_centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < KMEANS_TOL:
            break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return labels, centers, inertia, history


def kmeans(x: np.ndarray, k: int, restarts: int = DEFAULT_RESTARTS,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Best-of-`restarts` k-means labels (by inertia)."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > x.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {x.shape[0]}]")
    if rng is None:
        rng = np.random.default_rng()
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, _, inertia, _ = _lloyd(x, kmeans_pp_init(x, k, rng))
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


# ---------------------------------------------------------------------------
# Gaussian mixture EM
# ---------------------------------------------------------------------------

@dataclass
class GmmEmResult:
    labels: np.ndarray
    loglik: float
    loglik_history: List[float]
    means: np.ndarray
    weights: np.ndarray


def _log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)     # LinAlgError propagates to the caller
    diff = x - mean
    y = np.linalg.solve(chol, diff.T)
    maha = (y * y).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * math.log(2.0 * math.pi) + logdet + maha)


def _em_once(x: np.ndarray, k: int, covariance: str,
             rng: np.random.Generator) -> GmmEmResult:
    n, d = x.shape
    means = kmeans_pp_init(x, k, rng)
    weights = np.full(k, 1.0 / k)
    if covariance == "full":
        base = np.cov(x.T).reshape(d, d) + EM_REG * np.eye(d)
        covs = np.stack([base.copy() for _ in range(k)])
    else:
        sigma2 = float(x.var(axis=0).mean()) + EM_REG
        covs = np.stack([sigma2 * np.eye(d) for _ in range(k)])

    history: List[float] = []
    prev = -np.inf
    resp = np.full((n, k), 1.0 / k)
    for _ in range(EM_MAX_ITERS):
        # E-step in the log domain
        log_p = np.stack([_log_gaussian(x, means[j], covs[j]) for j in range(k)],
                         axis=1)
        log_p = log_p + np.log(weights)[None, :]
        m = log_p.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_p - m).sum(axis=1))
        loglik = float(log_norm.sum())
        resp = np.exp(log_p - log_norm[:, None])
        history.append(loglik)
        if loglik - prev < EM_TOL and np.isfinite(prev):
            break
        prev = loglik
        # M-step
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        if covariance == "full":
            for j in range(k):
                diff = x - means[j]
                cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
                covs[j] = cov + EM_REG * np.eye(d)
        else:
            total = 0.0
            for j in range(k):
                diff = x - means[j]
                total += float((resp[:, j] * (diff * diff).sum(axis=1)).sum())
            sigma2 = total / (n * d) + EM_REG
            covs = np.stack([sigma2 * np.eye(d) for _ in range(k)])

    labels = resp.argmax(axis=1).astype(np.intp)
    return GmmEmResult(labels=labels, loglik=history[-1],
                       loglik_history=history, means=means, weights=weights)


def gmm_em(x: np.ndarray, k: int, covariance: str = "full",
           restarts: int = DEFAULT_RESTARTS,
           rng: Optional[np.random.Generator] = None) -> GmmEmResult:
    """EM fit, best of `restarts` by final log-likelihood.  A start whose
    covariance turns singular despite regularization is retried with a
    fresh initialization."""
    x = np.asarray(x, dtype=np.float64)
    if covariance not in COVARIANCE_MODES:
        raise ValueError(f"unknown covariance mode {covariance!r}")
    if k < 1 or k > x.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {x.shape[0]}]")
    if rng is None:
        rng = np.random.default_rng()
    best: Optional[GmmEmResult] = None
    for _ in range(restarts):
        for attempt in range(_SINGULAR_RETRIES):
            try:
                result = _em_once(x, k, covariance, rng)
                break
            except np.linalg.LinAlgError:
                if attempt == _SINGULAR_RETRIES - 1:
                    raise
        if best is None or result.loglik > best.loglik:
            best = result
    return best


# ---------------------------------------------------------------------------
# silhouette selection
# ---------------------------------------------------------------------------

def silhouette_score_mean(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances.  Points in
    singleton clusters score 0 (the usual convention); if every cluster is
    a singleton the coefficient is undefined and the score is -1."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        return -1.0
    if counts.max() == 1:
        return -1.0
    d2 = _sq_dists(x, x)
    dist = np.sqrt(d2)
    n = x.shape[0]
    sums = np.stack([dist[:, labels == c].sum(axis=1) for c in uniq], axis=1)
    count_of = {c: int(cnt) for c, cnt in zip(uniq, counts)}
    s = np.zeros(n)
    for i in range(n):
        li = int(np.searchsorted(uniq, labels[i]))
        own = count_of[labels[i]]
        if own == 1:
            continue
        a = sums[i, li] / (own - 1)
        b = np.inf
        for j, c in enumerate(uniq):
            if j == li:
                continue
            b = min(b, sums[i, j] / count_of[c])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(s.mean())


@dataclass
class SilhouetteSelection:
    k_hat: int
    labels: np.ndarray
    scores: dict


def silhouette_select_k(x: np.ndarray,
                        method: Callable[[np.ndarray, int, np.random.Generator], np.ndarray],
                        k_range: Sequence[int],
                        rng: Optional[np.random.Generator] = None
                        ) -> SilhouetteSelection:
    """Run `method(x, k, rng)` for every k in `k_range` and keep the K with
    the highest mean silhouette.  Ties go to the smaller K (candidates are
    visited in ascending order and only a strictly better score wins)."""
    x = np.asarray(x, dtype=np.float64)
    ks = sorted(int(k) for k in k_range)
    if not ks:
        raise ValueError("empty k_range")
    if ks[0] < 2:
        raise ValueError("k_range must start at 2 or above")
    if ks[-1] > x.shape[0]:
        raise ValueError("k_range exceeds the number of points")
    if rng is None:
        rng = np.random.default_rng()
    best_k, best_labels, best_score = None, None, -np.inf
    scores = {}
    for k in ks:
        labels = method(x, k, rng)
        score = silhouette_score_mean(x, labels)
        scores[k] = score
        if score > best_score:
            best_k, best_labels, best_score = k, labels, score
    return SilhouetteSelection(k_hat=best_k, labels=best_labels, scores=scores)
