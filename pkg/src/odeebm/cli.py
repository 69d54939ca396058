"""Command-line entry point.

Subcommands cover the full experiment cycle: gen-data, train, eval, sample,
ood, ablation. Every run writes under <out_dir>/<name>/ with the effective
config echoed next to the outputs; given the same seeds a command reproduces
its files exactly. Exit codes: 0 ok, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odeebm",
        description="Continuous-time latent sequence models with an "
                    "energy-based prior.")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS worker threads (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (INI)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the experiment seed")
        p.add_argument("--out", default=None, help="override the output directory")
        return p

    add("gen-data", "generate the configured dataset file")
    p_train = add("train", "run the training loop; writes checkpoints and metrics")
    p_train.add_argument("--checkpoint", default=None,
                         help="resume from an existing checkpoint")

    p_eval = add("eval", "posterior inference + prediction metrics on the test split")
    p_eval.add_argument("--checkpoint", default=None,
                        help="checkpoint to evaluate (default: run's best.ckpt)")
    p_eval.add_argument("--langevin-steps", default=None,
                        help="comma list of test-time chain lengths to sweep")
    p_eval.add_argument("--obs-ratio", type=float, default=None,
                        help="override the conditioning observation ratio")
    p_eval.add_argument("--curves", type=int, default=4,
                        help="number of per-sequence curve files to emit")

    p_sample = add("sample", "generate sequences from the learned prior")
    p_sample.add_argument("--checkpoint", default=None)
    p_sample.add_argument("--count", type=int, default=16)

    p_ood = add("ood", "energy scores for real vs order-shuffled test sequences")
    p_ood.add_argument("--checkpoint", default=None)

    add("ablation", "train the 4-way inference/prior ablation and tabulate MSE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import ConfigError
    from .datasets import DataError
    from .langevin import NumericalError
    from .odeint import SolverError

    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "sample": cmd_sample,
        "ood": cmd_ood,
        "ablation": cmd_ablation,
    }
    try:
        handlers[args.command](args)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, SolverError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


def _load(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg.dataset = replace(cfg.dataset, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.eval = replace(cfg.eval, seed=args.seed + 7)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _dataset(cfg, generate_if_missing=False):
    import os.path

    from . import datasets

    if os.path.exists(cfg.data_path):
        return datasets.load(cfg.data_path)
    if not generate_if_missing:
        from .datasets import DataError

        raise DataError(
            f"dataset file {cfg.data_path!r} not found; run `odeebm gen-data` first")
    return datasets.generate(cfg.dataset)


def _checkpoint_path(cfg, args):
    from .datasets import DataError

    path = args.checkpoint or str(cfg.run_dir / "checkpoints" / "best.ckpt")
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return path


def cmd_gen_data(args):
    from pathlib import Path

    from . import datasets
    from .config import write_echo

    cfg = _load(args)
    ds = datasets.generate(cfg.dataset)
    Path(cfg.data_path).parent.mkdir(parents=True, exist_ok=True)
    datasets.save(ds, cfg.data_path)
    write_echo(cfg)
    counts = tuple(len(ds.split(n)) for n in ("train", "val", "test"))
    print(f"wrote {cfg.data_path} (train/val/test = {counts[0]}/{counts[1]}/{counts[2]})")


def cmd_train(args):
    from .config import write_echo
    from .training import train

    cfg = _load(args)
    ds = _dataset(cfg)
    write_echo(cfg)

    def log(row):
        print(f"iter {row['iteration']:6d}  loss {row['recon_loss']:.5f}  "
              f"val {row['val_mse'] if row['val_mse'] != '' else '-'}  "
              f"{row['secs_per_iter']:.2f}s", flush=True)

    state, _ = train(ds, cfg.model, cfg.train, run_dir=cfg.run_dir, log_fn=log)
    print(f"done; best val mse {state.best_val:.6f}; "
          f"checkpoints under {cfg.run_dir / 'checkpoints'}")


def cmd_eval(args):
    from dataclasses import replace

    from .config import write_echo
    from .evaluation import (evaluate, langevin_step_sweep, summarize,
                             write_curve_csv, write_rows_csv, predict,
                             infer_latent, conditioning_mask)
    from .training import evaluate_state, load_checkpoint

    cfg = _load(args)
    ds = _dataset(cfg)
    state, _ = load_checkpoint(_checkpoint_path(cfg, args))
    protocol = cfg.eval
    if args.obs_ratio is not None:
        protocol = replace(protocol, mode="ratio", ratio=args.obs_ratio)
    out = cfg.results_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg)

    if args.langevin_steps:
        steps = [int(s) for s in args.langevin_steps.split(",")]
        rows = langevin_step_sweep(state.model, state.prior, ds.test, protocol, steps)
        write_rows_csv(out / "langevin_sweep.csv", rows)
        for row in rows:
            print(row)
        return

    rows = evaluate_state(state, ds.test, protocol)
    write_rows_csv(out / "results.csv", rows)
    summary = summarize(rows)
    write_rows_csv(out / "summary.csv", [{"protocol": protocol.mode,
                                          "langevin_steps": protocol.steps, **summary}])
    print({k: round(v, 6) if isinstance(v, float) else v for k, v in summary.items()})

    import numpy as np

    for series in ds.test[: max(0, args.curves)]:
        cmask = conditioning_mask(series, protocol, np.random.default_rng(protocol.seed))
        z = infer_latent(state.model, state.prior, series.times[None],
                         series.values[None], cmask[None], protocol.spec(),
                         np.random.default_rng(protocol.seed))[0]
        pred = predict(state.model, z, series.times[None])[0]
        write_curve_csv(out / f"curve_{series.id}.csv", series.times,
                        series.values, pred)


def cmd_sample(args):
    import numpy as np

    from .config import write_echo
    from .evaluation import write_rows_csv
    from .generator import sample_sequence
    from .training import load_checkpoint

    cfg = _load(args)
    state, tcfg = load_checkpoint(_checkpoint_path(cfg, args))
    out = cfg.results_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg)
    span = (cfg.dataset.t_min, cfg.dataset.t_max)
    times = np.linspace(span[0], span[1], cfg.dataset.t_points)
    from .langevin import LangevinSpec

    lspec = LangevinSpec(steps=cfg.eval.steps, step_size=cfg.eval.step_size)
    seqs, latents = sample_sequence(state.model, state.prior, lspec, times,
                                    np.random.default_rng(cfg.eval.seed),
                                    count=args.count)
    rows = []
    for i, seq in enumerate(seqs):
        for t, v in zip(times, seq):
            rows.append({"sample": i, "time": t,
                         **{f"x{k}": float(x) for k, x in enumerate(v)}})
    write_rows_csv(out / "samples.csv", rows)
    print(f"wrote {out / 'samples.csv'} ({args.count} sequences)")


def cmd_ood(args):
    from .config import write_echo
    from .evaluation import ood_score_dataset, write_rows_csv
    from .training import load_checkpoint

    cfg = _load(args)
    ds = _dataset(cfg)
    state, _ = load_checkpoint(_checkpoint_path(cfg, args))
    out = cfg.results_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg)
    real, shuf, score = ood_score_dataset(state.model, state.prior, ds.test, cfg.eval)
    rows = [{"kind": "real", "id": s.id, "energy": float(e)}
            for s, e in zip(ds.test, real)]
    rows += [{"kind": "shuffled", "id": s.id, "energy": float(e)}
             for s, e in zip(ds.test, shuf)]
    write_rows_csv(out / "ood_energies.csv", rows)
    write_rows_csv(out / "ood_summary.csv", [{
        "auroc": score, "mean_real": float(real.mean()),
        "mean_shuffled": float(shuf.mean())}])
    print(f"AUROC {score:.4f}  mean energy real {real.mean():.3f} "
          f"shuffled {shuf.mean():.3f}")


def cmd_ablation(args):
    from .config import write_echo
    from .evaluation import write_rows_csv
    from .training import ablation_matrix

    cfg = _load(args)
    ds = _dataset(cfg)
    write_echo(cfg)
    out = cfg.results_dir()
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(row, flush=True)

    rows, _ = ablation_matrix(ds, cfg.model, cfg.train, cfg.eval,
                              run_dir=cfg.run_dir, log_fn=log)
    write_rows_csv(out / "ablation.csv", rows)
    for row in rows:
        print(row)


if __name__ == "__main__":
    sys.exit(main())
