"""Command-line surface: gen-data, train, sample, eval.

Every command is a pure function of its flags and --seed. Training walks one
root stream: parameter init first, then one child stream per step, which in
turn yields the batch indices and one grandchild stream per batch element.
Per-element gradients are computed independently (optionally on a thread
pool sized by SYMDIFF_THREADS) and reduced in batch order, so the update
sequence is bit-reproducible for any worker count.

Exit codes: 0 success, 1 runtime failure (bad files, numerics), 2 usage.

Artifacts: params in the "SYMD" format plus a <out>.json run config sidecar
used by sample/eval to rebuild the net; datasets and samples in the "SYMB"
format; training metrics as CSV (step, loss, grad_norm, wall_ms); eval
metrics as canonical JSON. All artifact bytes except the wall_ms column are
identical across reruns with one seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from .errors import ContractError, SymdiffError
from .geometry import GroupElement, NBodyState, rotate
from .io import (ToyDatasetSpec, generate_toy_dataset, load_config,
                 load_dataset, load_params, save_config, save_dataset,
                 save_params, _workers)
from .matching import euler_generate_flow, sym_flow_loss, sym_score_loss
from .nets import NetConfig, ParamStore, init_params
from .numcore import RngStream, Tensor, autodiff as ad
from .objective import (aug_step_loss, final_step_loss, nll_bound_terms,
                        symdiff_step_loss)
from .ortho import sample_haar
from .sampler import generate_batch
from .schedule import make_cosine_schedule
from .equitest import invariance_battery

MODES = ("symdiff", "aug", "plain", "symdiff-haar", "score", "flow")

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def _gamma_mode(mode: str, gamma_dirac: bool) -> str:
    if mode in ("plain", "aug") or gamma_dirac:
        return "dirac"
    return "haar" if mode == "symdiff-haar" else "recursive"


def _scalar(node) -> float:
    return float(node.value.data if isinstance(node, ad.Node) else node)


class _StepLoss:
    """Per-element training loss; one grandchild stream per element."""

    def __init__(self, mode: str, gamma_mode: str, sched, cfg: NetConfig):
        self.mode = mode
        self.gamma_mode = gamma_mode
        self.sched = sched
        self.cfg = cfg

    def __call__(self, tape: dict, z0: NBodyState, st: RngStream):
        if self.mode == "score":
            return sym_score_loss(tape, z0, None, st, self.cfg,
                                  gamma_mode=self.gamma_mode)
        if self.mode == "flow":
            return sym_flow_loss(tape, z0, None, st, self.cfg,
                                 gamma_mode=self.gamma_mode)
        t = 1 + int(st.integers(1, self.sched.T)[0])
        if self.mode == "aug":
            if t == 1:
                z0 = rotate(sample_haar(st), z0)
                return final_step_loss(tape, z0, st, self.sched, self.cfg,
                                       gamma_mode="dirac")
            return aug_step_loss(tape, z0, t, st, self.sched, self.cfg,
                                 w_mode="unit")
        if t == 1:
            return final_step_loss(tape, z0, st, self.sched, self.cfg,
                                   gamma_mode=self.gamma_mode)
        return symdiff_step_loss(tape, z0, t, st, self.sched, self.cfg,
                                 w_mode="unit", gamma_mode=self.gamma_mode)


class _Adam:
    def __init__(self, store: ParamStore, lr: float, weight_decay: float):
        self.lr = lr
        self.wd = weight_decay
        self.k = 0
        self.m = {name: np.zeros_like(store[name]) for name in store.names}
        self.v = {name: np.zeros_like(store[name]) for name in store.names}

    def step(self, store: ParamStore) -> None:
        self.k += 1
        c1 = 1.0 - _ADAM_B1 ** self.k
        c2 = 1.0 - _ADAM_B2 ** self.k
        for name in store.names:
            g = store.grads[name]
            self.m[name] = _ADAM_B1 * self.m[name] + (1.0 - _ADAM_B1) * g
            self.v[name] = _ADAM_B2 * self.v[name] + (1.0 - _ADAM_B2) * g * g
            upd = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + _ADAM_EPS)
            new = store[name] * (1.0 - self.lr * self.wd) - self.lr * upd
            store.set(name, new)


def train_steps(store: ParamStore, data: list, loss_fn, root: RngStream,
                steps: int, batch: int, opt: _Adam):
    """Yields (step, mean loss, grad norm) after each parameter update."""
    workers = _workers()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(1, steps + 1):
            step_stream = root.split()
            idx = step_stream.integers(batch, len(data))
            streams = [step_stream.split() for _ in range(batch)]

            def job(i: int):
                tape = store.tape()
                node = loss_fn(tape, data[int(idx[i])], streams[i])
                return _scalar(node), ad.backward(node)

            runs = (list(pool.map(job, range(batch))) if pool is not None
                    else [job(i) for i in range(batch)])
            store.zero_grads()
            for _, grads in runs:  # fixed reduction order
                store.accumulate_grads(grads)
            for name in store.names:
                store.grads[name] /= batch
            norm = float(np.sqrt(sum(float(np.sum(g * g))
                                     for g in store.grads.values())))
            opt.step(store)
            yield k, sum(r[0] for r in runs) / batch, norm
    finally:
        if pool is not None:
            pool.shutdown()


def _net_config(args) -> NetConfig:
    return NetConfig(hidden=args.hidden, depth=args.depth)


def cmd_gen_data(args) -> int:
    spec = ToyDatasetSpec(n_templates=args.n_templates, n_points=args.n_points,
                          d=args.d, jitter=args.jitter, count=args.count,
                          seed=args.seed)
    data = generate_toy_dataset(spec)
    save_dataset(data, args.out)
    print(f"wrote {spec.count} samples (N={spec.n_points}, d={spec.d}) "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    n, d = data[0].n_points, data[0].n_features
    cfg = _net_config(args)
    sched = make_cosine_schedule(args.T)
    gm = _gamma_mode(args.mode, args.gamma_dirac)
    loss_fn = _StepLoss(args.mode, gm, sched, cfg)

    root = RngStream(args.seed)
    store = init_params(cfg, d, root)
    opt = _Adam(store, args.lr, args.weight_decay)

    log_path = args.log if args.log is not None else f"{args.out}.csv"
    last = float("nan")
    with open(log_path, "w") as log:
        log.write("step,loss,grad_norm,wall_ms\n")
        t0 = time.perf_counter()
        for k, loss, norm in train_steps(store, data, loss_fn, root,
                                         args.steps, args.batch, opt):
            t1 = time.perf_counter()
            log.write(f"{k},{loss!r},{norm!r},{(t1 - t0) * 1e3:.3f}\n")
            t0, last = t1, loss

    save_params(store, args.out)
    save_config({"mode": args.mode, "gamma_dirac": args.gamma_dirac,
                 "T": args.T, "d": d, "n_points": n, "net": asdict(cfg)},
                f"{args.out}.json")
    print(f"trained {args.mode} for {args.steps} steps "
          f"(final loss {last:.6g}); params at {args.out}")
    return 0


def _load_model(path):
    meta = load_config(f"{path}.json")
    for key in ("mode", "gamma_dirac", "T", "d", "n_points", "net"):
        if key not in meta:
            raise ContractError(f"run config {path}.json lacks {key!r}")
    cfg = NetConfig(**meta["net"])
    store = load_params(path)
    want = init_params(cfg, meta["d"], RngStream(0)).shapes()
    if store.shapes() != want:
        raise ContractError("parameter tensors do not match the net config "
                            f"in {path}.json")
    return store, cfg, meta


def cmd_sample(args) -> int:
    store, cfg, meta = _load_model(args.params)
    n, d = meta["n_points"], meta["d"]
    gm = _gamma_mode(meta["mode"], meta["gamma_dirac"])
    root = RngStream(args.seed)
    if meta["mode"] == "score":
        raise ContractError("sampling is not supported for score-matching "
                            "runs; train with --mode flow or a diffusion mode")
    if meta["mode"] == "flow":
        out = [euler_generate_flow(store, n, d, args.euler_steps,
                                   root.split(), cfg, gamma_mode=gm)
               for _ in range(args.count)]
    else:
        sched = make_cosine_schedule(meta["T"])
        out = generate_batch(store, args.count, n, d, sched, root, cfg,
                             gamma_mode=gm)
    save_dataset(out, args.out)
    print(f"wrote {args.count} samples (N={n}, d={d}) to {args.out}")
    return 0


def _battery_elements(n: int, stream: RngStream) -> list:
    """Five pure rotations then five pure permutations."""
    rots = [GroupElement(np.arange(n), sample_haar(stream)) for _ in range(5)]
    perms = [GroupElement(stream.permutation(n), Tensor(np.eye(3)))
             for _ in range(5)]
    return rots + perms


def cmd_eval(args) -> int:
    store, cfg, meta = _load_model(args.params)
    if meta["mode"] in ("score", "flow"):
        raise ContractError("eval computes the diffusion bound; params were "
                            f"trained with --mode {meta['mode']}")
    data = load_dataset(args.data)
    if data[0].n_points != meta["n_points"] or data[0].n_features != meta["d"]:
        raise ContractError("eval data shape does not match the run config")
    sched = make_cosine_schedule(meta["T"])
    gm = _gamma_mode(meta["mode"], meta["gamma_dirac"])

    root = RngStream(args.seed)
    used = data[:args.nll_count]
    sums = {"prior_kl": 0.0, "diffusion": 0.0, "final": 0.0}
    for z0 in used:
        terms = nll_bound_terms(store, z0, root.split(), sched, cfg,
                                n_t_samples=args.nll_t_samples, gamma_mode=gm)
        for key in sums:
            sums[key] += terms[key]
    means = {key: val / len(used) for key, val in sums.items()}
    report = {"nll_bound": sum(means.values()), "terms": means,
              "nll_count": len(used), "nll_t_samples": args.nll_t_samples}

    if args.equivariance:
        n, d = meta["n_points"], meta["d"]
        pool_a = generate_batch(store, args.n, n, d, sched, root, cfg,
                                gamma_mode=gm)
        pool_b = generate_batch(store, args.n, n, d, sched, root, cfg,
                                gamma_mode=gm)
        elements = _battery_elements(n, root.split())
        reports = invariance_battery(pool_a, pool_b, elements, args.alpha,
                                     root.split())
        kinds = ["rotation"] * 5 + ["permutation"] * 5
        report["equivariance"] = {
            "alpha": args.alpha, "n_per_side": args.n,
            "tests": [{"kind": kind, "statistic": rep.statistic,
                       "p_value": rep.p_value, "reject": rep.reject}
                      for kind, rep in zip(kinds, reports)],
            "all_pass": not any(rep.reject for rep in reports)}

    text = json.dumps(report, sort_keys=True, separators=(",", ":"))
    if args.out is not None:
        save_config(report, args.out)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="symdiff",
                                  description="equivariant toy diffusion "
                                              "via stochastic symmetrisation")
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic invariant dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-templates", type=int, default=4)
    g.add_argument("--n-points", type=int, default=6)
    g.add_argument("--d", type=int, default=1)
    g.add_argument("--jitter", type=float, default=0.05)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model and write params + CSV log")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=MODES, default="symdiff")
    t.add_argument("--T", type=int, default=100)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--gamma-dirac", action="store_true",
                   help="debug: pin the rotation distribution to identity")
    t.add_argument("--log", default=None,
                   help="CSV path (default: <out>.csv)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw model samples into a dataset file")
    s.add_argument("--params", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--euler-steps", type=int, default=100,
                   help="ODE steps for flow-mode sampling")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="bound + optional equivariance battery")
    e.add_argument("--params", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="also write the JSON here")
    e.add_argument("--nll-count", type=int, default=64)
    e.add_argument("--nll-t-samples", type=int, default=8)
    e.add_argument("--equivariance", action="store_true")
    e.add_argument("--n", type=int, default=800,
                   help="battery draws per side")
    e.add_argument("--alpha", type=float, default=0.01)
    e.set_defaults(fn=cmd_eval)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        if args.command == "gen-data":
            # invalid generator settings are usage errors, not runtime ones
            print(f"symdiff gen-data: error: {exc}", file=sys.stderr)
            return 2
        print(f"symdiff {args.command}: {exc}", file=sys.stderr)
        return 1
    except (SymdiffError, OSError) as exc:
        print(f"symdiff {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
