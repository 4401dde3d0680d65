"""romflow command line.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Set ROMFLOW_THREADS to cap the number of numba threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from . import estimators as est
from . import weighting as wt
from .config import ConfigError, ExperimentConfig
from .elliptic import QoIOverflowError, kl_eigenpairs, write_kl_csv
from .flow import FlowError, build_model, sample, save_model
from .pipeline import STAGES, StageError, run_pipeline, run_stage
from .roots import BracketError
from .train import Objective, TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL = (FloatingPointError, ArithmeticError, TrainingDiverged, BracketError, FlowError,
             QoIOverflowError)

log = logging.getLogger("romflow")


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return EXIT_NUMERICAL if isinstance(cause, NUMERICAL) else EXIT_CONFIG


# --- subcommands -----------------------------------------------------------

def cmd_kl(args) -> int:
    expansion = kl_eigenpairs(args.lc, args.M)
    if args.out:
        write_kl_csv(args.out, expansion)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["i", "v_i", "lambda_i"])
        for i, (v, lam) in enumerate(zip(expansion.roots, expansion.eigenvalues), 1):
            w.writerow([i, repr(float(v)), repr(float(lam))])
    return EXIT_OK


def _stage_cmd(name):
    def run(args) -> int:
        cfg = ExperimentConfig.load(args.config)
        result = run_stage(name, cfg, args.out)
        if name == "estimate":
            print(json.dumps({k: result[k] for k in ("l_mc", "l_is", "sigma_IB", "sigma_w",
                                                     "ratio_is_mc")}, indent=2))
        return EXIT_OK
    return run


def cmd_pipeline(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    report = run_pipeline(cfg, args.out)
    print(json.dumps({k: report[k] for k in ("l_mc", "l_is", "sigma_IB", "sigma_w", "ratio_is_mc")},
                     indent=2))
    return EXIT_OK


def cmd_fidelity(args) -> int:
    raw, _ = wt.read_samples_csv(args.samples)
    eps = wt.eps_max_neg(raw) if args.eps_max is None else args.eps_max
    table = est.fidelity_report(raw.g_coarse, raw.g_fine, eps)
    text = json.dumps(table, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _write_points(path, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y_1", "y_2"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in y])


def cmd_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(args.seed)
    data_ss, *rest = root.spawn(3)
    rng_data = np.random.default_rng(data_ss)
    if args.which == "rotation":
        y = est.toy_rotation_data(args.N, rng_data)
    else:
        y, rate = est.toy_ellipse_data(args.N, rng_data, est.EllipseToy())
        log.info("ellipse rejection acceptance %.5f", rate)
    ds = wt.uniform_dataset(y)
    _write_points(out / "data.csv", y)
    summary = {"which": args.which, "N": args.N, "runs": []}
    for L in args.L:
        init_ss, train_ss, sample_ss = np.random.SeedSequence([args.seed, L]).spawn(3)
        model = build_model(2, L, args.H1, args.H2, "first_half",
                            init_data=y if args.init_scale_bias else None,
                            rng=np.random.default_rng(init_ss),
                            fixed_scale=args.which == "rotation",
                            output_init_std=args.output_init_std)
        cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, n_batches=args.n_batches,
                          seed=int(train_ss.generate_state(1)[0]))
        model, history = train(model, ds, Objective(args.beta), cfg)
        tag = f"L{L}"
        history.to_csv(out / f"history_{tag}.csv")
        save_model(model, out / f"model_{tag}.json")
        run = {"L": L, "final_cross_entropy": float(history.cross_entropy[-1]) if len(history) else None}
        if args.which == "rotation":
            run["entropy_target"] = est.GAUSSIAN_ENTROPY_2D
        else:
            rng_s = np.random.default_rng(sample_ss)
            pts = sample(model, args.n_samples, rng_s)
            _write_points(out / f"samples_{tag}.csv", pts)
            toy = est.EllipseToy()
            run["fraction_inside_ellipse"] = float(1.0 - toy.inside_b(pts).mean())
            rep = est.is_estimate(toy.target(), model, args.n_samples, rng_s)
            run["is"] = rep.to_dict()
        summary["runs"].append(run)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="romflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kl", help="KL eigenpairs of the exponential kernel")
    k.add_argument("--lc", type=float, required=True)
    k.add_argument("--M", type=int, required=True)
    k.add_argument("--out")
    k.set_defaults(func=cmd_kl)

    for name in STAGES:
        s = sub.add_parser(name, help=f"run the {name} stage of a pipeline config")
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True, help="run directory")
        s.set_defaults(func=_stage_cmd(name))

    f = sub.add_parser("fidelity", help="coarse/fine agreement counts for a samples CSV")
    f.add_argument("--samples", required=True)
    f.add_argument("--eps-max", type=float)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fidelity)

    t = sub.add_parser("toy", help="rotation or ellipse-exterior toy")
    t.add_argument("--which", choices=("rotation", "ellipse"), required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--N", type=int, default=10_000)
    t.add_argument("--L", type=int, nargs="+", default=[4])
    t.add_argument("--H1", type=int, default=64)
    t.add_argument("--H2", type=int, default=32)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--n-batches", type=int, default=20)
    t.add_argument("--beta", type=float, default=0.0)
    t.add_argument("--output-init-std", type=float, default=0.0)
    t.add_argument("--init-scale-bias", action="store_true")
    t.add_argument("--n-samples", type=int, default=10_000)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toy)

    pl = sub.add_parser("pipeline", help="all stages from one config")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("ROMFLOW_THREADS")
    if threads:
        try:
            _kernels.set_threads(int(threads))
        except ValueError:
            print(f"error: ROMFLOW_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, *NUMERICAL, ValueError, OSError, RuntimeError) as exc:
        code = _exit_code(exc)
        kind = "numerical failure" if code == EXIT_NUMERICAL else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
