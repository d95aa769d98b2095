"""Meta-training loop: fresh synthetic tasks every step, two losses, one
AdamW update.

The assignment network is graded at the true cluster count only.  The
cardinality head reads Gram fingerprints of the full candidate sweep; in
the default decoupled regime that sweep runs without gradient recording,
so the cardinality loss cannot move assignment-network weights.  The
additive regime (an ablation) keeps the sweep on the tape and
backpropagates one summed loss into everything.

Dataset streams are replayable: task ``j`` of step ``s`` draws its config
from a generator seeded with ``derive_seed(cfg.seed, 1 + s*batch + j)``
(index 0 is reserved for parameter init), so any run can be reproduced or
any single task regenerated in isolation.
"""

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import priors as pr
from .autodiff import Tensor
from .cin import (CinParams, fingerprint_from_partitions, init_cin_params,
                  cin_forward, ordinal_forward)
from .metrics import (SoftPartition, matching_ce_loss, matching_softacc_loss,
                      soft_ari, soft_nmi)
from .pin import PinHyper, PinParams, decode_partition, encode, init_pin_params
from .priors import Dataset, PriorRanges

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_NORM = 1.0

PIN_LOSS_KINDS = ("softari", "softnmi", "match_ce", "match_softacc")
CIN_LOSS_KINDS = ("ce", "ordinal")
COUPLINGS = ("decoupled", "additive")

LOG_COLUMNS = ("step", "lr", "pin_loss", "cin_loss",
               "grad_norm_pin", "grad_norm_cin", "wall_ms")


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_tasks: int = 8
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    ranges: PriorRanges = field(default_factory=PriorRanges)
    hyper: PinHyper = field(default_factory=PinHyper)
    pin_loss_kind: str = "softari"
    cin_loss_kind: str = "ce"
    coupling: str = "decoupled"
    # task-stream knobs forwarded into the prior sampler; the first three
    # default to the standard mixed prior, the last bounds the overlap
    # target when a run is restricted to well-separated mixtures
    gmm_fraction: float = 0.4
    p_k_two: float = 0.3
    omega_target_range: Optional[Tuple[float, float]] = None
    mc_samples: int = 1500

    def __post_init__(self):
        if self.steps < 1 or self.batch_tasks < 1:
            raise ValueError("steps and batch_tasks must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.peak_lr <= 0.0:
            raise ValueError("peak_lr must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if self.pin_loss_kind not in PIN_LOSS_KINDS:
            raise ValueError(f"unknown pin_loss_kind {self.pin_loss_kind!r}")
        if self.cin_loss_kind not in CIN_LOSS_KINDS:
            raise ValueError(f"unknown cin_loss_kind {self.cin_loss_kind!r}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.ranges.k_max > self.hyper.k_max:
            raise ValueError("task k_max exceeds the model's candidate range")
        if self.mc_samples < 1000:
            raise ValueError("mc_samples must be at least 1000")


def desk_config(**overrides) -> TrainConfig:
    """Small-budget preset: 1000 steps of 8 tasks, N in [100, 200],
    D in [2, 4], K up to 4, with the compact model dimensions."""
    base = dict(steps=1000, batch_tasks=8, warmup_steps=100, peak_lr=1e-3,
                ranges=PriorRanges(n_min=100, n_max=200, d_min=2, d_max=4,
                                   k_max=4),
                hyper=PinHyper(), mc_samples=1500)
    base.update(overrides)
    return TrainConfig(**base)


def paper_config(**overrides) -> TrainConfig:
    base = dict(steps=10000, batch_tasks=512, warmup_steps=2000,
                peak_lr=1e-4,
                ranges=PriorRanges(),
                hyper=PinHyper(d=512, d_tok=32, l_enc=2, l_dec=6, heads=4,
                               k_max=10),
                mc_samples=8000)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# parameter bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    pin: PinParams
    cin: CinParams
    hyper: PinHyper

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        # pin names never start with "cin"/"ord", so the union stays unique
        return self.pin.named_tensors() + self.cin.named_tensors()

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.zero_grad()


def init_model(cfg: TrainConfig, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(pr.derive_seed(cfg.seed, 0))
    pin_p = init_pin_params(cfg.hyper, rng, dtype=dtype)
    cin_p = init_cin_params(cfg.hyper.k_max, rng,
                            with_ordinal=(cfg.cin_loss_kind == "ordinal"),
                            dtype=dtype)
    return ModelParams(pin=pin_p, cin=cin_p, hyper=cfg.hyper)


# ---------------------------------------------------------------------------
# schedule / optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then a half-cosine down to 0."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step_count: int = 0
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS


def init_optimizer(named: Sequence[Tuple[str, Tensor]]) -> OptimizerState:
    m = {name: np.zeros_like(t.data) for name, t in named}
    v = {name: np.zeros_like(t.data) for name, t in named}
    return OptimizerState(m=m, v=v)


def grad_global_norm(named: Sequence[Tuple[str, Tensor]]) -> float:
    total = 0.0
    for _, t in named:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients(named: Sequence[Tuple[str, Tensor]],
                   max_norm: float = CLIP_NORM) -> float:
    """Scale the group's gradients so their joint norm is at most max_norm.
    Returns the pre-clip norm.  A norm already under the cap leaves every
    buffer bitwise untouched."""
    norm = grad_global_norm(named)
    if norm > max_norm:
        scale = max_norm / norm
        for _, t in named:
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_update(named: Sequence[Tuple[str, Tensor]], opt: OptimizerState,
                 lr: float, weight_decay: float) -> None:
    """One decoupled-decay Adam step: p <- p*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps).

    Missing gradients count as zero, so parameters outside the current
    graph still decay.  The step counter is shared across the whole
    parameter set and advances once per call.
    """
    b1, b2 = opt.betas
    t = opt.step_count + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    opt.step_count = t


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pin_loss(p: SoftPartition, z: np.ndarray, kind: str) -> Tensor:
    if kind == "softari":
        return ad.neg(soft_ari(p, z))
    if kind == "softnmi":
        return ad.neg(soft_nmi(p, z))
    if kind == "match_ce":
        return matching_ce_loss(p, z)
    if kind == "match_softacc":
        return matching_softacc_loss(p, z)
    raise ValueError(f"unknown pin loss kind {kind!r}")


def cin_loss(out: Tensor, k_true: int, kind: str) -> Tensor:
    """Cardinality loss.  For "ce", `out` is the posterior over K = 2..K_max
    and the loss is the negative log of the true entry.  For "ordinal",
    `out` is the vector of threshold logits eta_K and the loss is the mean
    binary cross-entropy against the indicators 1[K* > K]."""
    if kind == "ce":
        k_max = out.shape[0] + 1
        if not 2 <= k_true <= k_max:
            raise ValueError(f"k_true {k_true} out of range [2, {k_max}]")
        pick = ad.take_flat(out, np.array([k_true - 2]))
        return ad.neg(ad.rsum(ad.log(pick)))
    if kind == "ordinal":
        m = out.shape[0]
        k_max = m + 2
        if not 2 <= k_true <= k_max:
            raise ValueError(f"k_true {k_true} out of range [2, {k_max}]")
        y = (np.arange(2, k_max - 1 + 1) < k_true).astype(out.data.dtype)
        bce = ad.sub(ad.softplus(out), ad.mul(out, Tensor(y)))
        return ad.scale(ad.rsum(bce), 1.0 / m)
    raise ValueError(f"unknown cin loss kind {kind!r}")


def _mean_of(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def _check_batch(batch: Sequence[Dataset], hyper: PinHyper) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    for ds in batch:
        if ds.labels is None:
            raise ValueError("training tasks need ground-truth labels")
        if not 2 <= ds.k_true <= hyper.k_max:
            raise ValueError(f"k_true {ds.k_true} outside [2, {hyper.k_max}]")


def _cin_head(fp, cin_params: CinParams, kind: str) -> Tensor:
    return cin_forward(fp, cin_params) if kind == "ce" else ordinal_forward(fp, cin_params)


def compute_gradients(batch: Sequence[Dataset], model: ModelParams,
                      cfg: TrainConfig, include_cin: bool = True
                      ) -> Dict[str, float]:
    """Build the per-batch losses, run backward, and leave gradients in the
    parameter buffers.  Exposed separately from `train_step` so coupling
    behaviour can be checked without touching the optimizer; `include_cin`
    False grades the assignment network alone."""
    _check_batch(batch, model.hyper)
    pin_terms: List[Tensor] = []
    cin_terms: List[Tensor] = []

    if cfg.coupling == "decoupled":
        for ds in batch:
            r0 = encode(ds, model.pin, model.hyper)
            p_star = decode_partition(r0, ds.k_true, model.pin, model.hyper)
            pin_terms.append(pin_loss(p_star, ds.labels, cfg.pin_loss_kind))
            if include_cin:
                # candidate sweep off the tape: fingerprints enter the
                # cardinality head as constants
                with ad.no_grad():
                    parts = [decode_partition(r0, k, model.pin, model.hyper)
                             for k in range(2, model.hyper.k_max + 1)]
                    parts = _slice_sweep(parts, model.hyper)
                fp = fingerprint_from_partitions(parts)
                out = _cin_head(fp, model.cin, cfg.cin_loss_kind)
                cin_terms.append(cin_loss(out, ds.k_true, cfg.cin_loss_kind))
    else:
        for ds in batch:
            r0 = encode(ds, model.pin, model.hyper)
            parts = [decode_partition(r0, k, model.pin, model.hyper)
                     for k in range(2, model.hyper.k_max + 1)]
            parts = _slice_sweep(parts, model.hyper)
            pin_terms.append(pin_loss(parts[ds.k_true - 2], ds.labels,
                                      cfg.pin_loss_kind))
            if include_cin:
                fp = fingerprint_from_partitions(parts)
                out = _cin_head(fp, model.cin, cfg.cin_loss_kind)
                cin_terms.append(cin_loss(out, ds.k_true, cfg.cin_loss_kind))

    pin_total = _mean_of(pin_terms)
    cin_total = _mean_of(cin_terms) if cin_terms else None
    pin_value = pin_total.item()
    cin_value = cin_total.item() if cin_total is not None else 0.0
    if not (math.isfinite(pin_value) and math.isfinite(cin_value)):
        raise FloatingPointError(
            f"non-finite loss (pin={pin_value}, cin={cin_value})")

    if cfg.coupling == "decoupled":
        pin_total.backward()
        if cin_total is not None:
            cin_total.backward()
    else:
        total = pin_total if cin_total is None else ad.add(pin_total, cin_total)
        total.backward()
    return {"pin_loss": pin_value, "cin_loss": cin_value}


def _slice_sweep(parts: List[SoftPartition], hyper: PinHyper) -> List[SoftPartition]:
    """The masked-head decoder emits k_max columns for every candidate; cut
    each down to its own k (the surplus columns hold exact zeros)."""
    out = []
    for k, p in zip(range(2, hyper.k_max + 1), parts):
        if p.k != k:
            out.append(SoftPartition.from_probs(ad.narrow(p.probs, 1, 0, k)))
        else:
            out.append(p)
    return out


def train_step(batch: Sequence[Dataset], model: ModelParams,
               opt: OptimizerState, cfg: TrainConfig) -> Dict[str, float]:
    """One optimization step over a batch of tasks.  The learning rate
    comes from the optimizer's step counter, so driving this in a loop
    reproduces the schedule."""
    lr = lr_at(opt.step_count, cfg)
    model.zero_grad()
    try:
        values = compute_gradients(batch, model, cfg)
    except FloatingPointError as exc:
        raise FloatingPointError(
            f"aborting at step {opt.step_count}: {exc}") from exc
    pin_named = model.pin.named_tensors()
    cin_named = model.cin.named_tensors()
    norm_pin = clip_gradients(pin_named)
    norm_cin = clip_gradients(cin_named)
    adamw_update(model.named_tensors(), opt, lr, cfg.weight_decay)
    model.zero_grad()
    return {"lr": lr, "pin_loss": values["pin_loss"],
            "cin_loss": values["cin_loss"],
            "grad_norm_pin": norm_pin, "grad_norm_cin": norm_cin}


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def sample_batch(cfg: TrainConfig, step: int) -> List[Dataset]:
    """Fresh preprocessed tasks for one step; task j of step s has its own
    derived seed so the stream is replayable from (cfg.seed, s, j)."""
    out = []
    for j in range(cfg.batch_tasks):
        child = pr.derive_seed(cfg.seed, 1 + step * cfg.batch_tasks + j)
        trng = np.random.default_rng(child)
        tcfg = pr.sample_task_config(trng, cfg.ranges,
                                     gmm_fraction=cfg.gmm_fraction,
                                     p_k_two=cfg.p_k_two)
        ds = pr.generate_task(tcfg, mc_samples=cfg.mc_samples,
                              target_range=cfg.omega_target_range)
        out.append(pr.preprocess(ds, permute_features=False))
    return out


def write_train_log(rows: List[Dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def train_run(cfg: TrainConfig, log_path=None, dtype=np.float64,
              progress: bool = False):
    """Full run: init, `cfg.steps` optimization steps on fresh tasks, one
    metrics row per step.  Returns (model, opt, rows); rows land in
    `train_log.csv` format when `log_path` is given."""
    model = init_model(cfg, dtype=dtype)
    opt = init_optimizer(model.named_tensors())
    rows: List[Dict[str, float]] = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        batch = sample_batch(cfg, step)
        metrics = train_step(batch, model, opt, cfg)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        row = {"step": step, "wall_ms": wall_ms}
        row.update(metrics)
        rows.append(row)
        if progress and (step % 50 == 0 or step == cfg.steps - 1):
            print(f"step {step:5d}  lr {row['lr']:.2e}  "
                  f"pin {row['pin_loss']:+.4f}  cin {row['cin_loss']:.4f}",
                  flush=True)
    if log_path is not None:
        write_train_log(rows, log_path)
    return model, opt, rows
