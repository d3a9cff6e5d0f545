"""Command-line entry point: ``horom {fom,train,infer,eval,stencil}``.

Every failure the package raises on purpose exits with the code mapped to its
error category (see ``errors.EXIT_CODES``) and a one-line ``error[category]``
message on stderr.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .bundle import save_bundle
from .config import TrainingConfig, load_config
from .errors import EXIT_CODES, DatasetError, HoromError, InvalidArgumentError, NonFiniteLossError
from .fom import initial_condition, solve
from .pipeline import (DiskLoader, Pipeline, grid_parameters, read_dataset_index, relative_error,
                       write_dataset, write_error_heatmap)
from .stencils import stencil_first, stencil_second

log = logging.getLogger("horom")

CHECKPOINT = "checkpoint.bin"


def _config(args):
    overrides = {"seed": args.seed}
    if args.config:
        return load_config(args.config, **overrides)
    return TrainingConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_fom(args):
    cfg = _config(args)
    problem = cfg.fom_problem()
    thetas, _ = grid_parameters(problem.param_ranges, cfg.grid_points)
    out = args.out or cfg.data_dir
    t0 = time.time()
    bundles = []
    for i, th in enumerate(thetas):
        bundles.append(solve(problem, th))
        log.info("solved %d/%d theta=%s", i + 1, len(thetas), th.tolist())
    header = {"kind": problem.kind, "param_names": list(problem.param_names),
              "param_ranges": [list(r) for r in problem.param_ranges], "T": problem.T,
              "n_steps": problem.n_steps, "grid": problem.grid, "constants": problem.constants,
              "K": problem.K, "grid_points": list(cfg.grid_points)}
    write_dataset(out, thetas, bundles, header)
    print(f"wrote {len(thetas)} trajectories to {out} in {time.time() - t0:.1f}s")
    return 0


def _dataset(cfg):
    thetas = read_dataset_index(cfg.data_dir)
    expected = int(np.prod(cfg.grid_points))
    if len(thetas) != expected:
        raise DatasetError(f"{cfg.data_dir} holds {len(thetas)} parameters, config grid needs {expected}")
    return thetas, DiskLoader(cfg.data_dir)


def cmd_train(args):
    cfg = _config(args)
    thetas, loader = _dataset(cfg)
    pipe = Pipeline(cfg, thetas, loader)
    os.makedirs(cfg.run_dir, exist_ok=True)
    ckpt = os.path.join(cfg.run_dir, CHECKPOINT)

    def progress(rec):
        chosen = None if rec.theta is None else [float(t) for t in rec.theta]
        print(f"episode {rec.episode}: epoch {rec.epoch}, loss {rec.losses.get('total', float('nan')):.6g},"
              f" selected {chosen}")

    try:
        pipe.run(progress)
    except NonFiniteLossError:
        # parameters were not touched by the failing step, so this is the last good state
        pipe.save(ckpt)
        pipe.write_loss_log(os.path.join(cfg.run_dir, "loss_log.csv"))
        raise
    pipe.save(ckpt)
    pipe.write_loss_log(os.path.join(cfg.run_dir, "loss_log.csv"))
    pipe.write_episodes(os.path.join(cfg.run_dir, "episodes.csv"))
    print(f"checkpoint written to {ckpt}")
    return 0


def _load_run(cfg):
    thetas, loader = _dataset(cfg)
    ckpt = os.path.join(cfg.run_dir, CHECKPOINT)
    if not os.path.exists(ckpt):
        raise DatasetError(f"no checkpoint at {ckpt}; run the train command first")
    return Pipeline.load(ckpt, loader)


def cmd_infer(args):
    cfg = _config(args)
    pipe = _load_run(cfg)
    theta = np.asarray(args.theta, dtype=float)
    truth = None
    try:
        truth = pipe.loader(pipe.index_of(theta))
        ic = [c[0] for c in truth.channels]
    except DatasetError:
        ic = initial_condition(cfg.fom_problem(), theta)
    t0 = time.time()
    pred = pipe.infer(theta, ic)
    elapsed = time.time() - t0
    out = args.out or os.path.join(cfg.run_dir, "prediction.bin")
    save_bundle(pred, out)
    report = {"theta": theta.tolist(), "output": out, "seconds": elapsed}
    if truth is not None:
        report["relative_error"] = [relative_error(p, t) for p, t in zip(pred.channels, truth.channels)]
    print(json.dumps(report))
    return 0


def cmd_eval(args):
    cfg = _config(args)
    pipe = _load_run(cfg)
    errors = pipe.evaluate_grid()
    out = args.out or os.path.join(cfg.run_dir, "error_heatmap.csv")
    write_error_heatmap(out, pipe.thetas, errors, pipe.train)
    print(f"max relative error per channel: {errors.max(axis=0).tolist()}; wrote {out}")
    return 0


def cmd_stencil(args):
    if args.which == "first":
        st = stencil_first(args.a, args.b, args.mode or "forward")
    else:
        if args.c is None:
            raise InvalidArgumentError("the second-derivative stencil needs --c")
        st = stencil_second(args.a, args.b, args.c, args.mode or "forward")
    print("(" + ", ".join(f"{v:.15g}" for v in st.coefficients) + ")")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="horom", description="Parametric latent-dynamics reduced-order models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML key-value run configuration")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        return sp

    sp = with_config(sub.add_parser("fom", help="generate the full-order dataset sweep"))
    sp.add_argument("--out", help="dataset directory (default: config data_dir)")
    sp.set_defaults(func=cmd_fom)

    sp = with_config(sub.add_parser("train", help="run all training episodes"))
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("infer", help="predict the trajectory at one parameter"))
    sp.add_argument("--theta", type=float, nargs=2, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("eval", help="relative-error heatmap over the parameter grid"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stencil", help="print finite-difference coefficients")
    sp.add_argument("which", choices=["first", "second"])
    sp.add_argument("--a", type=float, required=True)
    sp.add_argument("--b", type=float, required=True)
    sp.add_argument("--c", type=float)
    sp.add_argument("--mode", choices=["forward", "central", "backward", "mixed"],
                    help="point layout; forward by default")
    sp.set_defaults(func=cmd_stencil)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except HoromError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
