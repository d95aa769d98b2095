"""Partition-agreement metrics, hard and differentiable, plus matching
algorithms and cardinality-error metrics.

Differentiable metrics operate on `SoftPartition` objects whose `probs` live
in the autodiff graph; hard metrics operate on plain integer label arrays.
The generalized binomial C(x,2) = x(x-1)/2 is applied to real-valued soft
counts throughout (it may dip slightly below zero for x in (0,1); that is the
intended relaxation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERATE_EPS = 1e-8       # |denominator| below this -> degenerate, return 0
SINKHORN_SHIFT = 1e-8       # epsilon added inside the log
SINKHORN_TEMPERATURE = 0.05
SINKHORN_ITERS = 50


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class SoftPartition:
    """Row-stochastic soft assignment of N points to K clusters."""
    logits: Optional[Tensor]
    probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "SoftPartition":
        return cls(logits=logits, probs=ad.softmax(logits))

    @classmethod
    def from_probs(cls, probs) -> "SoftPartition":
        return cls(logits=None, probs=probs if isinstance(probs, Tensor) else Tensor(probs))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=1)

    def detach(self) -> "SoftPartition":
        return SoftPartition(
            logits=self.logits.detach() if self.logits is not None else None,
            probs=self.probs.detach(),
        )


@dataclass
class ConfusionMatrix:
    """Soft confusion m[k, l] = sum_i P_ik Z_il with its marginals."""
    m: Tensor                 # K_pred x K_true, differentiable w.r.t. probs
    row_sums: Tensor          # n_{k.}, differentiable
    col_sums: np.ndarray      # n_{.l}, integer counts of the hard labels
    n: float


@dataclass
class MatchResult:
    permutation: np.ndarray   # permutation[k] = true cluster matched to pred k
    score: float


@dataclass
class RankSummary:
    median_rank: float
    iqr: float


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def one_hot(z: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    z = np.asarray(z, dtype=np.intp)
    out = np.zeros((z.size, k), dtype=dtype)
    out[np.arange(z.size), z] = 1.0
    return out


def _check_labels(z, k_true: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.intp)
    if z.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {z.shape}")
    if z.size and (z.min() < 0 or z.max() >= k_true):
        raise ValueError(f"label out of range: values span [{z.min()}, {z.max()}] "
                         f"but k_true={k_true}")
    return z


def _c2(x: Tensor) -> Tensor:
    """Generalized binomial coefficient C(x, 2) = x(x-1)/2 on real inputs."""
    return ad.scale(ad.mul(x, ad.sub(x, 1.0)), 0.5)


def _c2_np(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (x - 1.0)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax composed from primitive ops (stable)."""
    mx = Tensor(x.data.max(axis=-1, keepdims=True))      # constant shift
    e = ad.exp(ad.sub(x, mx))
    lse = ad.add(ad.log(ad.rsum(e, axis=-1, keepdims=True)), mx)
    return ad.sub(x, lse)


def _logsumexp_rows(x: Tensor) -> Tensor:
    mx = Tensor(x.data.max(axis=-1, keepdims=True))
    e = ad.exp(ad.sub(x, mx))
    return ad.add(ad.log(ad.rsum(e, axis=-1, keepdims=True)), mx)


# ---------------------------------------------------------------------------
# confusion
# ---------------------------------------------------------------------------

def soft_confusion(p: SoftPartition, z, k_true: int) -> ConfusionMatrix:
    """m = P^T Z for one-hot Z built from the integer labels."""
    z = _check_labels(z, k_true)
    n = p.probs.shape[0]
    if z.size != n:
        raise ValueError(f"labels have length {z.size} but P has {n} rows")
    zmat = Tensor(one_hot(z, k_true, dtype=p.probs.dtype))
    m = ad.matmul(ad.transpose(p.probs), zmat)
    row_sums = ad.rsum(m, axis=1)
    col_sums = np.bincount(z, minlength=k_true).astype(np.float64)
    return ConfusionMatrix(m=m, row_sums=row_sums, col_sums=col_sums, n=float(n))


def _hard_contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ka = int(a.max()) + 1
    kb = int(b.max()) + 1
    c = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(c, (a, b), 1)
    return c


# ---------------------------------------------------------------------------
# hard metrics
# ---------------------------------------------------------------------------

def hard_ari(a, b) -> float:
    """Adjusted Rand index between two hard labelings.

    Degenerate case (adjusted denominator 0, e.g. both partitions trivial):
    returns 1.0, following the established convention — the numerator is
    provably 0 there as well.
    """
    a = np.asarray(a, dtype=np.intp)
    b = np.asarray(b, dtype=np.intp)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"label arrays must be 1-D with equal length, got {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 points")
    c = _hard_contingency(a, b)
    sidx = _c2_np(c).sum()
    sa = _c2_np(c.sum(axis=1)).sum()
    sb = _c2_np(c.sum(axis=0)).sum()
    c2n = _c2_np(np.array(a.size)).item()
    expected = sa * sb / c2n
    den = 0.5 * (sa + sb) - expected
    if den == 0.0:
        return 1.0
    return float((sidx - expected) / den)


def hard_nmi(a, b) -> float:
    """NMI with arithmetic-mean normalization 2I/(H_a+H_b); 0 when H_a+H_b=0."""
    a = np.asarray(a, dtype=np.intp)
    b = np.asarray(b, dtype=np.intp)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"label arrays must be 1-D with equal length, got {a.shape} vs {b.shape}")
    c = _hard_contingency(a, b).astype(np.float64) / a.size
    pa = c.sum(axis=1)
    pb = c.sum(axis=0)
    nz = c > 0
    outer = np.outer(pa, pb)
    info = float((c[nz] * np.log(c[nz] / outer[nz])).sum())
    ha = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    hb = float(-(pb[pb > 0] * np.log(pb[pb > 0])).sum())
    if ha + hb == 0.0:
        return 0.0
    return 2.0 * info / (ha + hb)


# ---------------------------------------------------------------------------
# differentiable metrics
# ---------------------------------------------------------------------------

def soft_ari(p: SoftPartition, z) -> Tensor:
    """Differentiable ARI from soft co-assignment counts.

    When the adjusted denominator is degenerate (|den| < 1e-8, both partitions
    effectively a single cluster) the value and its gradient are defined as 0,
    returned as a graph constant.
    """
    z = np.asarray(z, dtype=np.intp)
    k_true = int(z.max()) + 1 if z.size else 1
    cm = soft_confusion(p, z, k_true)
    sum_cells = ad.rsum(_c2(cm.m))
    sum_a = ad.rsum(_c2(cm.row_sums))
    sum_b = float(_c2_np(cm.col_sums).sum())
    c2n = _c2_np(np.array(cm.n)).item()
    expected = ad.scale(sum_a, sum_b / c2n)
    num = ad.sub(sum_cells, expected)
    den = ad.sub(ad.add(ad.scale(sum_a, 0.5), 0.5 * sum_b), expected)
    if abs(den.item()) < DEGENERATE_EPS:
        return Tensor(np.asarray(0.0, dtype=p.probs.dtype))
    return ad.div(num, den)


def soft_nmi(p: SoftPartition, z) -> Tensor:
    """Differentiable NMI, arithmetic-mean normalization, eps-floored logs."""
    z = np.asarray(z, dtype=np.intp)
    k_true = int(z.max()) + 1 if z.size else 1
    cm = soft_confusion(p, z, k_true)
    joint = ad.scale(cm.m, 1.0 / cm.n)                       # p̂_{kj}
    pk = ad.rsum(joint, axis=1)                              # soft marginal
    pj = cm.col_sums / cm.n                                  # hard marginal, constant
    log_joint = ad.log(joint)
    log_pk = ad.reshape(ad.log(pk), (pk.shape[0], 1))
    log_pj = Tensor(np.log(np.maximum(pj, ad.LOG_EPS))[None, :])
    info = ad.rsum(ad.mul(joint, ad.sub(ad.sub(log_joint, log_pk), log_pj)))
    h_k = ad.neg(ad.rsum(ad.mul(pk, ad.log(pk))))
    h_j = float(-(pj * np.log(np.maximum(pj, ad.LOG_EPS))).sum())
    den = ad.add(h_k, h_j)
    if abs(den.item()) < DEGENERATE_EPS:
        return Tensor(np.asarray(0.0, dtype=p.probs.dtype))
    return ad.div(ad.scale(info, 2.0), den)


# ---------------------------------------------------------------------------
# assignment problems
# ---------------------------------------------------------------------------

def _min_cost_assignment(cost: np.ndarray):
    """Exact square min-cost assignment via shortest augmenting paths, O(K^3).

    Returns (col_of_row, u, v) where u, v are the final dual potentials
    (0-indexed), feasible for the whole matrix: cost[i,j] - u[i] - v[j] >= 0
    with equality on matched edges. Classic potentials formulation.
    """
    n = cost.shape[0]
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)       # p[j]: row matched to column j (1-indexed)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, np.array(u[1:]), np.array(v[1:])


def _perm_score(m: np.ndarray, perm: np.ndarray) -> float:
    return float(m[np.arange(m.shape[0]), perm].sum())


def hungarian(m) -> MatchResult:
    """Exact maximum-score assignment on a square score matrix.

    Among equal-score optima the lexicographically smallest assignment is
    returned (row 0 gets the smallest feasible column, then row 1, ...); the
    refinement only engages when an exact tie is possible.
    """
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"hungarian expects a square matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("hungarian requires finite entries")
    k = m.shape[0]
    if k == 1:
        return MatchResult(permutation=np.zeros(1, dtype=np.intp), score=float(m[0, 0]))

    perm, u, v = _min_cost_assignment(-m)
    best = _perm_score(m, perm)
    tol = 1e-9 * max(1.0, abs(best))
    # reduced costs of the minimization problem; an edge with rc > 0 cannot
    # appear in any equal-score optimum, so ties are screened in O(1)
    rc = (-m) - u[:, None] - v[None, :]

    # lexicographic tie refinement: per row, force the smallest feasible
    # column for which an equal-score completion exists
    fixed_cols: set[int] = set()
    for row in range(k - 1):
        current = int(perm[row])
        for cand in range(k):
            if cand in fixed_cols:
                continue
            if cand == current:
                break                       # current choice already minimal
            if rc[row, cand] > k * tol:
                continue                    # provably worse, skip
            rest_rows = list(range(row + 1, k))
            rest_cols = [c for c in range(k) if c not in fixed_cols and c != cand]
            prefix = float(m[np.arange(row), perm[:row]].sum())
            sub = m[np.ix_(rest_rows, rest_cols)]
            sub_perm, _, _ = _min_cost_assignment(-sub)
            total = prefix + float(m[row, cand]) + _perm_score(sub, sub_perm)
            if total >= best - tol:
                perm = perm.copy()
                perm[row] = cand
                for rr, cc in zip(rest_rows, sub_perm):
                    perm[rr] = rest_cols[cc]
                break
        fixed_cols.add(int(perm[row]))
    return MatchResult(permutation=perm, score=_perm_score(m, perm))


def _pad_square_tensor(m: Tensor) -> Tensor:
    k1, k2 = m.shape
    s = max(k1, k2)
    if k1 < s:
        m = ad.concat([m, Tensor(np.zeros((s - k1, k2), dtype=m.dtype))], axis=0)
    if k2 < s:
        m = ad.concat([m, Tensor(np.zeros((s, s - k2), dtype=m.dtype))], axis=1)
    return m


def matching_ce_loss(p: SoftPartition, z) -> Tensor:
    """Hungarian-matched cross-entropy.

    The matching runs on the stop-gradient soft confusion (zero-padded to
    square when K_pred != K_true); gradients flow only through the CE term.
    With K_pred < K_true, samples whose label aligns to a padded prediction
    column have no target logit and are excluded from the mean.
    """
    if p.logits is None:
        raise ValueError("matching_ce_loss needs logits on the SoftPartition")
    z = np.asarray(z, dtype=np.intp)
    k_true = int(z.max()) + 1
    k_pred = p.k
    cm = soft_confusion(p, z, k_true)
    padded = _pad_square_tensor(cm.m).data          # stop-gradient copy
    match = hungarian(padded)
    inv = np.empty(padded.shape[0], dtype=np.intp)
    inv[match.permutation] = np.arange(padded.shape[0])
    targets = inv[z]
    keep = targets < k_pred
    if not keep.any():
        raise ValueError("no label maps to a real prediction column after matching")
    lsm = log_softmax(p.logits)
    sel = one_hot(targets[keep], k_pred, dtype=p.logits.dtype)
    if keep.all():
        picked = ad.rsum(ad.mul(lsm, Tensor(sel)), axis=1)
    else:
        rows = np.flatnonzero(keep)
        gather = np.zeros((rows.size, z.size), dtype=p.logits.dtype)
        gather[np.arange(rows.size), rows] = 1.0
        picked = ad.rsum(ad.mul(ad.matmul(Tensor(gather), lsm), Tensor(sel)), axis=1)
    return ad.neg(ad.rmean(picked))


def sinkhorn(m, temperature: float = SINKHORN_TEMPERATURE,
             iters: int = SINKHORN_ITERS) -> Tensor:
    """Log-domain Sinkhorn-Knopp normalization of exp(log(m + eps)/T).

    Alternates row and column normalization; stops early once the output
    matrix changes by less than 1e-6 in L-infinity norm. Differentiable.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mt = m if isinstance(m, Tensor) else Tensor(m)
    vals = mt.data
    if vals.ndim != 2:
        raise ValueError(f"sinkhorn expects a matrix, got shape {vals.shape}")
    if (vals < 0).any():
        raise ValueError("sinkhorn requires nonnegative entries")
    if not vals.any():
        raise ValueError("sinkhorn on an all-zero matrix")

    a = ad.scale(ad.log(ad.add(mt, SINKHORN_SHIFT)), 1.0 / temperature)
    prev = None
    for _ in range(iters):
        a = ad.sub(a, _logsumexp_rows(a))                                  # rows
        a = ad.transpose(ad.sub(ad.transpose(a), _logsumexp_rows(ad.transpose(a))))  # cols
        cur = np.exp(a.data)
        if prev is not None and np.abs(cur - prev).max() < 1e-6:
            break
        prev = cur
    return ad.exp(a)


def matching_softacc_loss(p: SoftPartition, z,
                          temperature: float = SINKHORN_TEMPERATURE) -> Tensor:
    """1 - SoftAcc with a Sinkhorn soft permutation; fully differentiable
    (gradient flows through both the transport plan and the confusion)."""
    z = np.asarray(z, dtype=np.intp)
    k_true = int(z.max()) + 1
    cm = soft_confusion(p, z, k_true)
    m_sq = _pad_square_tensor(cm.m)
    plan = sinkhorn(m_sq, temperature=temperature)
    softacc = ad.scale(ad.rsum(ad.mul(plan, m_sq)), 1.0 / cm.n)
    return ad.sub(1.0, softacc)


# ---------------------------------------------------------------------------
# cardinality + ranking metrics
# ---------------------------------------------------------------------------

def k_mae(pred_k: Sequence[int], true_k: Sequence[int]) -> float:
    pred = np.asarray(pred_k, dtype=np.float64)
    true = np.asarray(true_k, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("k_mae on empty input")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    return float(np.abs(pred - true).mean())


def k_mae_median(pred_k: Sequence[int], true_k: Sequence[int]) -> float:
    pred = np.asarray(pred_k, dtype=np.float64)
    true = np.asarray(true_k, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("k_mae_median on empty input")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    return float(np.median(np.abs(pred - true)))


def _rank_average(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n for ascending values; exact ties share the average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def median_rank(scores, higher_better: bool) -> list[RankSummary]:
    """Per-method median rank and IQR over the dataset axis of a
    methods x datasets score matrix (rank 1 = best, ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D (methods x datasets), got {scores.shape}")
    if np.isnan(scores).any():
        raise ValueError("NaN scores are not rankable")
    ranks = np.empty_like(scores)
    for d in range(scores.shape[1]):
        col = -scores[:, d] if higher_better else scores[:, d]
        ranks[:, d] = _rank_average(col)
    out = []
    for row in ranks:
        q1, q3 = np.percentile(row, [25, 75])
        out.append(RankSummary(median_rank=float(np.median(row)), iqr=float(q3 - q1)))
    return out
