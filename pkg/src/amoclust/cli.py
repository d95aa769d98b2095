"""Command-line surface.

Five subcommands: `gen` writes synthetic datasets, `train` fits a model from
a JSON config or a named preset, `eval` benchmarks methods over a dataset
directory, `cluster` labels a single CSV with a trained checkpoint, and
`gradcheck` runs the finite-difference suite over every differentiable op,
the losses, the attention block, and a tiny end-to-end graph.

`--seed` and `--threads` are accepted by every subcommand; AMOCLUST_THREADS
is the environment fallback for the thread cap (applied to the BLAS pools
through threadpoolctl).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import threadpoolctl

from . import autodiff as ad
from . import harness
from .autodiff import FDReport, Tensor, finite_difference_check
from .cin import fingerprint_from_partitions, cin_forward, ordinal_predict_k, partition_sweep
from .configio import (ConfigError, load_checkpoint, load_run_config,
                       parse_run_config, preset_path, save_checkpoint)
from .metrics import (SoftPartition, matching_ce_loss, matching_softacc_loss,
                      soft_ari, soft_nmi)
from .pin import MabParams, PinHyper, forward_partition, init_pin_params, mab_pre
from .priors import (Dataset, PriorRanges, derive_seed, generate_task,
                     preprocess, sample_task_config, save_dataset)
from .training import cin_loss, desk_config, train_run

PRIOR_CHOICES = ("gmm", "zeus", "mixed")
METHOD_CHOICES = ("model", "kmeans", "gmm", "gmm_spherical", "oracle")


def _threads_cap(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("AMOCLUST_THREADS", "").strip()
    return int(env) if env else None


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    ranges = PriorRanges(n_min=args.n_min, n_max=args.n_max,
                         d_min=args.d_min, d_max=args.d_max, k_max=args.k_max)
    frac = {"gmm": 1.0, "zeus": 0.0, "mixed": 0.4}[args.prior]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0

    k_hist: dict = {}
    omegas = []
    gmm_count = 0
    for i in range(args.count):
        rng = np.random.default_rng(derive_seed(seed, i))
        tcfg = sample_task_config(rng, ranges, gmm_fraction=frac)
        ds = generate_task(tcfg, mc_samples=args.mc_samples)
        save_dataset(ds, out / f"task{i:04d}")
        k_hist[tcfg.k_true] = k_hist.get(tcfg.k_true, 0) + 1
        if tcfg.prior_kind == "gmm":
            gmm_count += 1
            omegas.append(ds.provenance["achieved_omega_max"])

    hist = "  ".join(f"K={k}: {k_hist[k]}" for k in sorted(k_hist))
    print(f"wrote {args.count} datasets to {out}")
    print(hist)
    if omegas:
        print(f"gmm tasks: {gmm_count}/{args.count}, "
              f"mean achieved omega_max {float(np.mean(omegas)):.4f}")
    else:
        print(f"gmm tasks: 0/{args.count}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.config is not None:
        cfg = load_run_config(args.config)
    else:
        cfg = load_run_config(preset_path(args.preset))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.parent / "train_log.csv"

    t0 = time.time()
    model, opt, rows = train_run(cfg, log_path=log_path, progress=args.verbose)
    save_checkpoint(out, model, seed=cfg.seed, step=cfg.steps,
                    pin_loss_kind=cfg.pin_loss_kind,
                    cin_loss_kind=cfg.cin_loss_kind,
                    ranges=asdict(cfg.ranges))
    print(f"trained {cfg.steps} steps in {time.time() - t0:.1f}s; "
          f"final pin loss {rows[-1]['pin_loss']:.4f}, "
          f"cin loss {rows[-1]['cin_loss']:.4f}")
    print(f"checkpoint: {out}")
    print(f"log: {log_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _build_methods(names: List[str], checkpoint) -> List[harness.Method]:
    methods = []
    for name in names:
        if name == "model":
            if checkpoint is None:
                raise ValueError("method 'model' needs --checkpoint")
            model, _ = load_checkpoint(checkpoint)
            methods.append(harness.model_method(model))
        elif name == "kmeans":
            methods.append(harness.kmeans_method())
        elif name == "gmm":
            methods.append(harness.gmm_method(covariance="full"))
        elif name == "gmm_spherical":
            methods.append(harness.gmm_method(covariance="spherical_shared"))
        elif name == "oracle":
            methods.append(harness.oracle_method())
        else:
            raise ValueError(f"unknown method {name!r}, "
                             f"expected some of {METHOD_CHOICES}")
    return methods


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        print(f"error: data directory {data_dir} does not exist", file=sys.stderr)
        return 1
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    tracks = tuple(t.strip() for t in args.tracks.split(",") if t.strip())
    methods = _build_methods(names, args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out)
    harness.benchmark_run(methods, data_dir, out_dir,
                          tracks=tracks,
                          k_range=range(2, args.k_max + 1),
                          seed=seed)
    print(f"wrote {out_dir / 'results_per_dataset.csv'} "
          f"and {out_dir / 'results_aggregate.csv'}")
    return 0


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

def _load_cluster_input(path: Path) -> Tuple[Dataset, Optional[dict]]:
    """CSV -> Dataset. A `<base>.meta.json` sidecar fixes the column kinds;
    otherwise any column with a value that does not parse as a number is
    label-encoded by first appearance and the encoding is reported back."""
    meta = path.parent / (path.stem + ".meta.json")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    header, body = rows[0], rows[1:]
    if meta.exists():
        with open(meta) as fh:
            kinds = json.load(fh)["col_kind"]
        drop_label = header[-1] == "label"
        cols = len(header) - (1 if drop_label else 0)
        x = np.array([[float(v) for v in row[:cols]] for row in body])
        return Dataset(x=x, col_kind=list(kinds), labels=None, k_true=0,
                       provenance={}), None

    cols = list(zip(*body))
    kinds = []
    encodings = {}
    data = []
    for name, values in zip(header, cols):
        try:
            data.append([float(v) for v in values])
            kinds.append("numeric")
        except ValueError:
            seen: dict = {}
            col = []
            for v in values:
                if v not in seen:
                    seen[v] = len(seen)
                col.append(float(seen[v]))
            data.append(col)
            kinds.append("categorical")
            encodings[name] = list(seen)
    x = np.array(data).T
    ds = Dataset(x=x, col_kind=kinds, labels=None, k_true=0, provenance={})
    return ds, (encodings if encodings else None)


def cmd_cluster(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    path = Path(args.input)
    ds, encodings = _load_cluster_input(path)
    n, d = ds.x.shape

    ranges = manifest.get("ranges")
    if ranges is not None:
        if not (ranges["n_min"] <= n <= ranges["n_max"]):
            print(f"warning: {n} rows is outside the trained range "
                  f"[{ranges['n_min']}, {ranges['n_max']}]", file=sys.stderr)
        if not (ranges["d_min"] <= d <= ranges["d_max"]):
            print(f"warning: {d} columns is outside the trained range "
                  f"[{ranges['d_min']}, {ranges['d_max']}]", file=sys.stderr)

    pre = preprocess(ds, permute_features=False)
    posterior = None
    if args.k is not None:
        k = args.k
    else:
        with ad.no_grad():
            parts = partition_sweep(pre, model.pin, model.hyper)
            fp = fingerprint_from_partitions(parts)
            if model.cin.ordinal is not None:
                k = ordinal_predict_k(fp, model.cin)
            else:
                post = cin_forward(fp, model.cin)
                posterior = post.data.tolist()
                k = 2 + int(np.argmax(post.data))

    with ad.no_grad():
        part = forward_partition(pre, k, model.pin, model.hyper)
    probs = part.probs.data
    labels = probs.argmax(axis=1)
    maxp = probs.max(axis=1)

    out = Path(args.out) if args.out else path.parent / (path.stem + ".clusters.csv")
    with open(out, "w", newline="") as fh:
        if args.k is not None:
            fh.write(f"# k={k} (forced)\n")
        elif posterior is not None:
            tail = "|".join(f"{p:.6f}" for p in posterior)
            fh.write(f"# k_hat={k} posterior[2..{model.hyper.k_max}]={tail}\n")
        else:
            fh.write(f"# k_hat={k} (ordinal head)\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "cluster", "max_prob"])
        for i in range(n):
            writer.writerow([i, int(labels[i]), f"{maxp[i]:.6f}"])

    if encodings:
        sidecar = out.parent / (out.stem + ".kinds.json")
        with open(sidecar, "w") as fh:
            json.dump({"col_kind": ds.col_kind, "encodings": encodings}, fh, indent=1)
        print(f"inferred column kinds recorded in {sidecar}")
    print(f"wrote {out} (k={k})")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return ad.rsum(ad.mul(t, Tensor(w)))


def run_gradcheck() -> List[Tuple[str, FDReport]]:
    """Finite-difference the whole differentiable surface on fixed fixtures.

    Covers every op in the autodiff module, the four partition losses, the
    two cardinality losses, the attention block (input and weight paths), and
    a tiny encode/decode/head graph against SoftARI.
    """
    rng = np.random.default_rng(7)
    a34 = rng.standard_normal((3, 4))
    b34 = rng.standard_normal((3, 4))
    w34 = rng.standard_normal((3, 4))
    m43 = rng.standard_normal((4, 3))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases: List[Tuple[str, Callable, np.ndarray, float, float]] = []

    def case(name, fn, x, step=1e-5, tol=1e-4):
        cases.append((name, fn, x, step, tol))

    case("add", lambda x: _weighted_sum(ad.add(x, Tensor(b34)), w34), a34)
    case("sub_lhs", lambda x: _weighted_sum(ad.sub(x, Tensor(b34)), w34), a34)
    case("sub_rhs", lambda x: _weighted_sum(ad.sub(Tensor(b34), x), w34), a34)
    case("mul", lambda x: _weighted_sum(ad.mul(x, Tensor(b34)), w34), a34)
    case("div_num", lambda x: _weighted_sum(ad.div(x, Tensor(pos)), w34), a34)
    case("div_den", lambda x: _weighted_sum(ad.div(Tensor(b34), x), w34), pos)
    case("neg", lambda x: _weighted_sum(ad.neg(x), w34), a34)
    case("scale", lambda x: _weighted_sum(ad.scale(x, -1.7), w34), a34)
    case("matmul_lhs", lambda x: _weighted_sum(ad.matmul(x, Tensor(m43)), w34[:, :3]), a34)
    case("matmul_rhs", lambda x: _weighted_sum(ad.matmul(Tensor(a34), x), w34[:, :3]), m43)
    case("transpose", lambda x: _weighted_sum(ad.transpose(x), w34.T), a34)
    case("swapaxes", lambda x: _weighted_sum(ad.swapaxes(x, 0, 1), w34.T), a34)
    case("reshape", lambda x: _weighted_sum(ad.reshape(x, (2, 6)), w34.reshape(2, 6)), a34)
    case("expand", lambda x: _weighted_sum(ad.expand(x, (3, 4)), w34), a34[:1])
    case("concat", lambda x: _weighted_sum(ad.concat([x, Tensor(b34)], axis=0),
                                           np.vstack([w34, w34])), a34)
    case("narrow", lambda x: _weighted_sum(ad.narrow(x, 1, 1, 2), w34[:, 1:3]), a34)
    case("take_flat", lambda x: _weighted_sum(ad.take_flat(x, [0, 5, 11]),
                                              np.array([1.0, -2.0, 0.5])), a34)
    case("rsum", lambda x: _weighted_sum(ad.rsum(x, axis=1), w34[:, 0]), a34)
    case("rmean", lambda x: _weighted_sum(ad.rmean(x, axis=0), w34[0]), a34)
    case("softmax", lambda x: _weighted_sum(ad.softmax(x), w34), a34)
    case("layer_norm", lambda x: _weighted_sum(ad.layer_norm(x), w34), a34)
    case("l2_normalize", lambda x: _weighted_sum(ad.l2_normalize(x), w34), a34)
    case("gelu", lambda x: _weighted_sum(ad.gelu(x), w34), a34)
    case("softplus", lambda x: _weighted_sum(ad.softplus(x), w34), a34)
    case("exp", lambda x: _weighted_sum(ad.exp(x), w34), a34)
    case("log", lambda x: _weighted_sum(ad.log(x), w34), pos)
    mask = np.array([[False, True, False, True]] * 3)
    case("masked_fill", lambda x: _weighted_sum(ad.masked_fill(x, mask, 0.5), w34), a34)

    z = np.array([0, 0, 1, 1, 2, 2, 1, 0])
    logits0 = rng.standard_normal((8, 3))
    case("loss_softari",
         lambda x: ad.neg(soft_ari(SoftPartition.from_logits(x), z)), logits0)
    case("loss_softnmi",
         lambda x: ad.neg(soft_nmi(SoftPartition.from_logits(x), z)), logits0)
    case("loss_match_ce",
         lambda x: matching_ce_loss(SoftPartition.from_logits(x), z), logits0)
    case("loss_match_softacc",
         lambda x: matching_softacc_loss(SoftPartition.from_logits(x), z),
         logits0, 1e-5, 1e-3)
    case("loss_cin_ce",
         lambda x: cin_loss(ad.softmax(x), 3, "ce"), rng.standard_normal(9))
    case("loss_cin_ordinal",
         lambda x: cin_loss(x, 3, "ordinal"), rng.standard_normal(8))

    mab = _gradcheck_mab(rng)
    q0 = rng.standard_normal((3, 8))
    kv0 = rng.standard_normal((5, 8))
    wq0 = mab.wq.data.copy()
    w38 = rng.standard_normal((3, 8))

    def mab_vs_input(x):
        return _weighted_sum(mab_pre(x, Tensor(kv0), mab, heads=2), w38)

    def mab_vs_weight(x):
        mab.wq = x
        return _weighted_sum(mab_pre(Tensor(q0), Tensor(kv0), mab, heads=2), w38)

    case("mab_pre_input", mab_vs_input, q0)
    case("mab_pre_weight", mab_vs_weight, wq0)

    case("pin_end_to_end", _tiny_pin_loss_fn(), _tiny_pin_leaf(), 1e-5, 1e-4)

    reports = []
    for name, fn, x, step, tol in cases:
        reports.append((name, finite_difference_check(fn, x, step=step, tol=tol)))
    return reports


def _gradcheck_mab(rng) -> MabParams:
    from .pin import _init_mab
    return _init_mab(rng, 8, 2, np.float64)


_TINY_HYPER = PinHyper(d=8, d_tok=4, l_enc=1, l_dec=1, heads=2, k_max=3)
_TINY_Z = np.array([0, 0, 0, 1, 1, 1])


def _tiny_pin_fixture():
    rng = np.random.default_rng(21)
    params = init_pin_params(_TINY_HYPER, rng)
    x = np.vstack([rng.normal(-2.0, 0.5, size=(3, 2)),
                   rng.normal(2.0, 0.5, size=(3, 2))])
    ds = Dataset(x=x, col_kind=["numeric", "numeric"], labels=_TINY_Z.copy(),
                 k_true=2, provenance={})
    return params, preprocess(ds, permute_features=False)


def _tiny_pin_leaf() -> np.ndarray:
    params, _ = _tiny_pin_fixture()
    return params.cell_w1.data.copy()


def _tiny_pin_loss_fn() -> Callable:
    params, ds = _tiny_pin_fixture()

    def fn(x):
        params.cell_w1 = x
        p = forward_partition(ds, 2, params, _TINY_HYPER)
        return ad.neg(soft_ari(p, _TINY_Z))

    return fn


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    reports = run_gradcheck()
    failed = 0
    for name, rep in reports:
        status = "pass" if rep.passed else "FAIL"
        print(f"{status:4s}  {name:22s} max_rel_err={rep.max_rel_err:.3e} "
              f"({rep.n_entries} entries)")
        failed += not rep.passed
    print(f"{len(reports) - failed}/{len(reports)} checks passed "
          f"in {time.time() - t0:.1f}s")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser and entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None,
                        help="rng seed (command-specific default otherwise)")
    shared.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (or set AMOCLUST_THREADS)")

    p = argparse.ArgumentParser(prog="amoclust",
                                description="amortized tabular clustering")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[shared], help="generate synthetic datasets")
    g.add_argument("--prior", choices=PRIOR_CHOICES, default="mixed")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", default="datasets")
    g.add_argument("--n-min", type=int, default=100)
    g.add_argument("--n-max", type=int, default=200)
    g.add_argument("--d-min", type=int, default=2)
    g.add_argument("--d-max", type=int, default=8)
    g.add_argument("--k-max", type=int, default=4)
    g.add_argument("--mc-samples", type=int, default=8000)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", parents=[shared], help="train a model")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="run-config JSON path")
    src.add_argument("--preset", help="named preset (desk, paper)")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--log", default=None, help="train log CSV (default: next to --out)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[shared], help="benchmark methods on datasets")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--methods", default="model,kmeans")
    e.add_argument("--tracks", default="known_k,inferred_k")
    e.add_argument("--k-max", type=int, default=10)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("cluster", parents=[shared], help="cluster one CSV")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--out", default=None)
    c.add_argument("--k", type=int, default=None)
    c.set_defaults(fn=cmd_cluster)

    gc = sub.add_parser("gradcheck", parents=[shared],
                        help="finite-difference the autodiff surface")
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cap = _threads_cap(args)
    try:
        if cap is not None:
            with threadpoolctl.threadpool_limits(limits=cap):
                return args.fn(args)
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
