"""Cardinality inference from soft-partition fingerprints.

For each candidate K the normalized Gram matrix G = (1/N) P^T P summarizes
co-assignment mass. Its sorted diagonal plus sorted strict upper triangle is
a canonical vector that no row or column relabeling of P can change;
concatenating these vectors over K = 2..K_max gives a fixed-length input for
a small MLP posterior over K.

Exactness note: every Gram entry is accumulated over the N per-row products
in sorted value order. Plain matmul would leave the sum at the mercy of row
order (float addition does not commute bitwise), and the canonicalization
here is supposed to be exact, not merely close. Sorting happens on detached
values; gradients ride through gathers whose routing the sort fixed, which
is all the decoupled training scheme needs.

An order-aware head for the same fingerprints lives here too: a scalar score
cut by monotonic thresholds (cumulative softplus), predicting K by counting
thresholds exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import pin as pin_mod
from .autodiff import Tensor
from .metrics import SoftPartition
from .pin import INIT_STD, PinHyper, PinParams, _trunc_normal
from .priors import Dataset

CIN_HIDDEN = 256


def expected_fingerprint_length(k_max: int) -> int:
    """Sum of K(K+1)/2 over K = 2..k_max (219 at k_max=10)."""
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    return sum(k * (k + 1) // 2 for k in range(2, k_max + 1))


# ---------------------------------------------------------------------------
# fingerprints
# ---------------------------------------------------------------------------

@dataclass
class Fingerprint:
    """Per-candidate canonical Gram vectors and their concatenation."""
    per_k: List[Tensor]
    concat: Tensor


def gram_fingerprint(p: SoftPartition) -> Tensor:
    """Canonical vector of the normalized Gram matrix of one partition.

    Products P_ik P_il are summed in ascending value order so the result is
    bitwise independent of row order; entries land as [sorted diagonal
    descending; sorted strict upper triangle descending], which kills column
    order too. Length K(K+1)/2.
    """
    probs = p.probs
    n, k = probs.shape
    prod = ad.mul(ad.reshape(probs, (n, k, 1)), ad.reshape(probs, (n, 1, k)))
    order = np.argsort(prod.data, axis=0, kind="stable")    # (n, k, k) row picks
    flat = order.reshape(n, k * k) * (k * k) + np.arange(k * k)
    ranked = ad.reshape(ad.take_flat(prod, flat), (n, k, k))
    g = ad.scale(ad.rsum(ranked, axis=0), 1.0 / n)

    gd = g.data.reshape(-1)
    diag_pos = np.arange(k) * (k + 1)
    iu, ju = np.triu_indices(k, 1)
    upper_pos = iu * k + ju
    diag_sorted = diag_pos[np.argsort(-gd[diag_pos], kind="stable")]
    upper_sorted = upper_pos[np.argsort(-gd[upper_pos], kind="stable")]
    return ad.take_flat(g, np.concatenate([diag_sorted, upper_sorted]))


def fingerprint_from_partitions(parts: Sequence[SoftPartition]) -> Fingerprint:
    """Fingerprint a K sweep. `parts[i]` must have exactly 2+i columns."""
    if not parts:
        raise ValueError("empty partition sweep")
    for i, p in enumerate(parts):
        if p.k != 2 + i:
            raise ValueError(f"sweep entry {i} has {p.k} columns, expected {2 + i}")
    per_k = [gram_fingerprint(p) for p in parts]
    return Fingerprint(per_k=per_k, concat=ad.concat(per_k, axis=0))


def partition_sweep(ds: Dataset, params: PinParams, hyper: PinHyper) -> List[SoftPartition]:
    """Partitions for every K in 2..k_max, sharing one encode pass.

    The plain self-attention decoder emits k_max columns with zero mass past
    k; those are sliced off so each sweep entry carries exactly K columns.
    """
    r0 = pin_mod.encode(ds, params, hyper)
    parts = []
    for k in range(2, hyper.k_max + 1):
        p = pin_mod.decode_partition(r0, k, params, hyper)
        if p.k != k:
            p = SoftPartition.from_probs(ad.narrow(p.probs, 1, 0, k))
        parts.append(p)
    return parts


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class OrdinalHeadParams:
    """Scalar-score MLP, threshold increments, and a positive scale
    (stored as its log)."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    deltas: Tensor
    log_s: Tensor

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)


@dataclass
class CinParams:
    """Posterior MLP (two hidden layers of width 256) plus the optional
    order-aware head."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    k_max: int
    ordinal: Optional[OrdinalHeadParams] = None

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        out = [("cin_w1", self.w1), ("cin_b1", self.b1),
               ("cin_w2", self.w2), ("cin_b2", self.b2),
               ("cin_w3", self.w3), ("cin_b3", self.b3)]
        if self.ordinal is not None:
            out.extend(self.ordinal.named("ord"))
        return out


def init_cin_params(k_max: int, rng: np.random.Generator, with_ordinal: bool = False,
                    dtype=np.float64) -> CinParams:
    width = expected_fingerprint_length(k_max)

    def w(*shape):
        return Tensor(_trunc_normal(rng, shape, INIT_STD).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params = CinParams(
        w1=w(width, CIN_HIDDEN), b1=zeros(CIN_HIDDEN),
        w2=w(CIN_HIDDEN, CIN_HIDDEN), b2=zeros(CIN_HIDDEN),
        w3=w(CIN_HIDDEN, k_max - 1), b3=zeros(k_max - 1),
        k_max=k_max,
    )
    if with_ordinal:
        params.ordinal = OrdinalHeadParams(
            w1=w(width, CIN_HIDDEN), b1=zeros(CIN_HIDDEN),
            w2=w(CIN_HIDDEN, CIN_HIDDEN), b2=zeros(CIN_HIDDEN),
            w3=w(CIN_HIDDEN, 1), b3=zeros(1),
            deltas=zeros(k_max - 2),
            log_s=Tensor(np.asarray(0.0, dtype=dtype), requires_grad=True),
        )
    return params


# ---------------------------------------------------------------------------
# posterior head
# ---------------------------------------------------------------------------

def _check_width(fp: Fingerprint, w1: Tensor):
    got, want = fp.concat.shape[0], w1.shape[0]
    if got != want:
        raise ValueError(f"fingerprint width {got} does not match head input {want}")


def _mlp3(x: Tensor, w1, b1, w2, b2, w3, b3) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
    h = ad.gelu(ad.add(ad.matmul(h, w2), b2))
    return ad.add(ad.matmul(h, w3), b3)


def cin_logits(fp: Fingerprint, params: CinParams) -> Tensor:
    """Unnormalized scores over K = 2..k_max, length k_max-1."""
    _check_width(fp, params.w1)
    x = ad.reshape(fp.concat, (1, fp.concat.shape[0]))
    out = _mlp3(x, params.w1, params.b1, params.w2, params.b2, params.w3, params.b3)
    return ad.reshape(out, (params.k_max - 1,))


def cin_forward(fp: Fingerprint, params: CinParams) -> Tensor:
    """Posterior over candidate cluster counts K = 2..k_max."""
    return ad.softmax(cin_logits(fp, params))


def predict_k(ds: Dataset, pin_params: PinParams, hyper: PinHyper,
              cin_params: CinParams) -> int:
    """Sweep K, fingerprint, take the posterior argmax (lowest K on ties)."""
    with ad.no_grad():
        fp = fingerprint_from_partitions(partition_sweep(ds, pin_params, hyper))
        post = cin_forward(fp, cin_params)
    return 2 + int(np.argmax(post.data))


# ---------------------------------------------------------------------------
# order-aware head
# ---------------------------------------------------------------------------

def ordinal_score(fp: Fingerprint, params: CinParams) -> Tensor:
    """Scalar score of the order-aware head, shape (1, 1)."""
    if params.ordinal is None:
        raise ValueError("parameters carry no ordinal head")
    o = params.ordinal
    _check_width(fp, o.w1)
    x = ad.reshape(fp.concat, (1, fp.concat.shape[0]))
    return _mlp3(x, o.w1, o.b1, o.w2, o.b2, o.w3, o.b3)


def ordinal_thresholds(params: CinParams) -> Tensor:
    """b_K for K = 2..k_max-1: cumulative softplus of the increments, hence
    non-decreasing by construction."""
    if params.ordinal is None:
        raise ValueError("parameters carry no ordinal head")
    o = params.ordinal
    m = o.deltas.shape[0]
    sp = ad.reshape(ad.softplus(o.deltas), (1, m))
    prefix = np.triu(np.ones((m, m), dtype=o.deltas.data.dtype))
    return ad.reshape(ad.matmul(sp, prefix), (m,))


def ordinal_forward(fp: Fingerprint, params: CinParams) -> Tensor:
    """Logits eta_K = s (score - b_K) for K = 2..k_max-1; eta_K is the logit
    of the event "true K exceeds this candidate"."""
    score = ordinal_score(fp, params)
    b = ordinal_thresholds(params)
    m = b.shape[0]
    eta = ad.mul(ad.sub(ad.reshape(score, (1,)), b), ad.exp(params.ordinal.log_s))
    return ad.reshape(eta, (m,))


def ordinal_predict_k(fp: Fingerprint, params: CinParams) -> int:
    """2 plus the number of thresholds the score clears."""
    with ad.no_grad():
        eta = ordinal_forward(fp, params)
    return 2 + int(np.count_nonzero(eta.data >= 0.0))
