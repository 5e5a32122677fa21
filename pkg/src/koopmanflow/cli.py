"""Command line entry point: gen / train / sample / ablate / bench-dmd / analyze.

Config files are flat key=value text; one file can carry generator, model
and trainer keys together since each consumer picks only the keys it owns.
Every CSV written here starts with a header row.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import flatconfig, kernels, synthbench
from .backbone import BackboneConfig, Conditioning, KoopmanFlowModel
from .inference import SamplerConfig, euler_sample_batch
from .synthbench import GenSpec
from .training import TrainConfig, Trainer


def _load_kv(path) -> dict[str, str]:
    if path is None:
        return {}
    return flatconfig.parse_kv(Path(path).read_text())


def _load_arrays(path):
    return synthbench.to_arrays(synthbench.load_dataset(path))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = flatconfig.dataclass_from_kv(GenSpec, _load_kv(args.spec))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    trajectories = synthbench.generate_dataset(spec, args.n)
    synthbench.save_dataset(args.out, trajectories)
    print(f"wrote {args.n} trajectories (T={spec.T}, D={spec.D}) to {args.out}")
    return 0


def _configs_for(data_arrays, kv: dict[str, str]):
    actions, _, context = data_arrays
    model_cfg = flatconfig.dataclass_from_kv(BackboneConfig, kv)
    model_cfg = dataclasses.replace(
        model_cfg, T=actions.shape[1], D=actions.shape[2],
        context_dim=context.shape[1],
    )
    train_cfg = flatconfig.dataclass_from_kv(TrainConfig, kv)
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    arrays = _load_arrays(args.data)
    model_cfg, train_cfg = _configs_for(arrays, _load_kv(args.config))
    model = KoopmanFlowModel(model_cfg)
    trainer = Trainer(model, train_cfg)
    started = time.perf_counter()
    history = trainer.fit(*arrays, log_path=args.log, ckpt_path=args.out,
                          progress_every=args.progress)
    print(f"trained {train_cfg.steps} steps in {time.perf_counter() - started:.1f}s; "
          f"final total loss {history[-1].total:.5f}; checkpoint at {args.out}")
    return 0


def cmd_sample(args) -> int:
    model = KoopmanFlowModel.load(args.ckpt)
    actions, events, context = _load_arrays(args.data)
    idx = args.index
    if not 0 <= idx < actions.shape[0]:
        raise SystemExit(f"--index {idx} out of range for {actions.shape[0]} trajectories")
    cfg = SamplerConfig(nfe=args.nfe, seed=args.seed)
    sampled, fields = euler_sample_batch(
        model, events[idx : idx + 1], context[idx : idx + 1], cfg, return_fields=True
    )
    inv_norm = np.linalg.norm(fields.v_inv.data[0], axis=-1)
    var_norm = np.linalg.norm(fields.v_var.data[0], axis=-1)
    header = ["step"] + [f"a{d}" for d in range(model.cfg.D)] + ["v_inv_norm", "v_var_norm"]
    rows = [
        [t, *sampled[0, t], inv_norm[t], var_norm[t]]
        for t in range(model.cfg.T)
    ]
    _write_csv(args.out, header, rows)
    print(f"sampled trajectory {idx} at nfe={args.nfe} -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    arrays = _load_arrays(args.data)
    if args.heldout:
        heldout = _load_arrays(args.heldout)
    else:  # hold out the trailing quarter
        n = arrays[0].shape[0]
        cut = max(1, (3 * n) // 4)
        heldout = tuple(a[cut:] for a in arrays)
        arrays = tuple(a[:cut] for a in arrays)
    model_cfg, train_cfg = _configs_for(arrays, _load_kv(args.config))
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = synthbench.ablation_sweep(args.axis, values, train_cfg, model_cfg,
                                     arrays, heldout, progress=True)
    _write_csv(
        args.out,
        ["axis", "value", "traj_mse", "event_corr", "v_inv_stability", "error"],
        [[r["axis"], r["value"], r["traj_mse"], r["event_corr"],
          r["v_inv_stability"], r["error"]] for r in rows],
    )
    print(f"sweep over {args.axis} -> {args.out}")
    return 0


def cmd_bench_dmd(args) -> int:
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(1, args.d, args.window))
    rank = min(args.d, args.window - 1)
    spd = Z[:, :, :-1] @ Z[:, :, :-1].transpose(0, 2, 1) + args.lam * np.eye(args.d)
    rhs = rng.normal(size=(1, args.d, args.d))
    rows = []
    for backend, table in kernels.available_backends().items():
        for kernel_name, fn, call in (
            ("dmd_fit_svd_batch", table["dmd_fit_svd_batch"], lambda f: f(Z, args.lam, rank)),
            ("cho_solve_batch", table["cho_solve_batch"], lambda f: f(spd, rhs)),
        ):
            call(fn)  # warm up (jit compile)
            times = []
            for _ in range(args.iters):
                start = time.perf_counter()
                call(fn)
                times.append((time.perf_counter() - start) * 1e6)
            rows.append([backend, kernel_name,
                         statistics.median(times), statistics.fmean(times)])
    print(f"d={args.d} window={args.window} lam={args.lam} iters={args.iters} "
          f"(active backend: {kernels.backend_name()})")
    print(f"{'backend':8s} {'kernel':20s} {'median_us':>10s} {'mean_us':>10s}")
    for backend, kernel_name, med, mean in rows:
        print(f"{backend:8s} {kernel_name:20s} {med:10.2f} {mean:10.2f}")
    if args.out:
        _write_csv(args.out, ["backend", "kernel", "median_us", "mean_us"], rows)
    return 0


def cmd_analyze(args) -> int:
    model = KoopmanFlowModel.load(args.ckpt)
    actions, events, context = _load_arrays(args.data)
    fields = synthbench.deployment_fields(model, events, context, seed=args.seed)
    e_inv = synthbench.per_step_energy(fields.v_inv.data)
    e_var = synthbench.per_step_energy(fields.v_var.data)
    e_naive = np.stack([
        synthbench.naive_rfft_baseline(a, model.spectral.mask) for a in actions
    ])
    rows = []
    for i in range(actions.shape[0]):
        for t in range(model.cfg.T):
            rows.append([i, t, int(events[i, t]),
                         e_inv[i, t], e_var[i, t], e_naive[i, t]])
    _write_csv(args.out, ["traj", "step", "event", "v_inv_energy",
                          "v_var_energy", "naive_energy"], rows)
    corr_model, corr_naive = synthbench.correlation_report(
        model, actions, events, context, seed=args.seed
    )
    print(f"event correlation: variant branch {corr_model:.4f}, "
          f"naive frequency cut {corr_naive:.4f}")
    print(f"energy profiles -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="flat key=value generator spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run fused co-training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key=value model+trainer config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--progress", type=int, default=0, metavar="N",
                   help="print a progress line every N steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample a trajectory from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the conditioning")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--nfe", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True,
                   help="CSV of step, actions, and branch norms from the last evaluation")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("ablate", help="sweep one axis, one run per value")
    p.add_argument("--axis", required=True, choices=synthbench.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout", help="held-out dataset (default: trailing quarter of --data)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench-dmd", help="time the local-fit kernels on both backends")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--out", help="optional CSV")
    p.set_defaults(fn=cmd_bench_dmd)

    p = sub.add_parser("analyze", help="branch energy profiles and event correlations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
