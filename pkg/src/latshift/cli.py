"""Command-line entry points: dataset generation, the three-step learn /
adapt / predict pipeline, evaluation, sweeps, and gradient verification."""

import sys
import json
import argparse
from pathlib import Path

import numpy as np

from .nn import ConfigError, finite_diff_grad, value_and_grad, tree_flatten
from . import model as M
from .adapt import (fit_target_prior, predict_target, source_predict,
                    append_adapted_prior, load_adapted_prior)
from .datagen import (gen_app_a, gen_app_b, write_dataset, read_dataset,
                      dataset_hash, PI_SOURCE_A, PI_TARGET_A, PI_SOURCE_B,
                      PI_TARGET_B)
from .baselines import accuracy
from .harness import ExperimentConfig, run_sweep, default_rpm_hyper


def _pi(text):
    pi = np.asarray([float(t) for t in text.split(",")])
    if abs(pi.sum() - 1.0) > 1e-9:
        raise ConfigError(f"pi {pi} not on the simplex")
    return pi


def cmd_gen(args):
    if args.generator == "app_a":
        pi = _pi(args.pi) if args.pi else (PI_TARGET_A if args.target else PI_SOURCE_A)
        batch = gen_app_a(args.n, args.d_x, pi, args.seed)
    else:
        pi = _pi(args.pi) if args.pi else (PI_TARGET_B if args.target else PI_SOURCE_B)
        batch = gen_app_b(args.n, pi, args.seed)
    if args.target:
        batch = batch.to_target()
    write_dataset(batch, args.out)
    print(f"wrote {'target' if args.target else 'source'} dataset "
          f"({batch.n} rows) to {args.out}")
    return 0


def cmd_train(args):
    src = read_dataset(args.data, require="source")
    meta = src.meta
    dims = M.ModelDims(k_u=meta["k_u"], k_c=meta["k_c"], k_y=meta["k_y"],
                       d_x=src.x.shape[1], d_w=src.w.shape[1],
                       k_w=2 if meta["generator"] == "app_a" else 0)
    hyper = default_rpm_hyper(meta["generator"], args.seed,
                              json.loads(args.hyper) if args.hyper else None)
    model, mix, trace = M.train_source(src, dims, hyper)
    M.save_checkpoint(args.out, model, mix, hyper, args.seed)
    print(f"trained {len(trace)} epochs; final free energy {trace[-1]:.6f}; "
          f"checkpoint at {args.out}")
    return 0


def cmd_adapt(args):
    model, mix, _ = M.load_checkpoint(args.checkpoint)
    tgt = read_dataset(args.data, require="target")
    qprior, trace = fit_target_prior(model, mix, tgt.x)
    append_adapted_prior(args.checkpoint, qprior, trace,
                         target_dataset_hash=dataset_hash(args.data))
    print(f"adapted prior {np.round(qprior.q, 6).tolist()} "
          f"after {len(trace)} iterations")
    return 0


def cmd_predict(args):
    model, mix, doc = M.load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    if "adapted_prior" in doc and not args.unadapted:
        pred = predict_target(model, mix, load_adapted_prior(args.checkpoint),
                              data.x)
    else:
        pred = source_predict(model, mix, data.x)
    np.savetxt(args.out, pred, fmt="%.17g", delimiter=",")
    print(f"wrote {pred.shape[0]} predictive rows to {args.out}")
    return 0


def cmd_eval(args):
    data = read_dataset(args.data)
    pred = np.loadtxt(args.pred, delimiter=",", ndmin=2)
    labels = data.y_true if hasattr(data, "y_true") else data.y
    acc = accuracy(pred, labels)
    print(f"accuracy {acc:.6f} over {len(labels)} rows")
    return 0


def cmd_sweep(args):
    config = (ExperimentConfig.from_json(args.config) if args.config
              else ExperimentConfig())
    _, any_failed = run_sweep(config, out_dir=args.out, jobs=args.jobs,
                              emit_plot_data=args.emit_plot_data)
    print(f"sweep done; results under {args.out or config.out}")
    return 1 if any_failed else 0


def cmd_gradcheck(args):
    from .datagen import gen_app_a as gen
    data = gen(8, 2, [0.3, 0.7], seed=args.seed)
    dims = M.ModelDims(k_u=2, k_c=2, k_y=2, d_x=2, d_w=1, k_w=2)
    model = M.init_model(dims, M.TrainHyper(hidden=4, seed=args.seed))
    rng = np.random.default_rng(args.seed)
    model.y_logits = rng.normal(size=model.y_logits.shape)
    model.prior_logits = rng.normal(size=dims.k_u)
    model.recog_w.logits = rng.normal(size=(2, dims.k_u))
    mix = M.compute_mixture(model, data)
    eta = M.e_step(M.log_joint_weights_batch(model, mix, data), 1.5)
    obj = M.FreeEnergyObjective(model, data, eta, beta=1.5)
    tree = model.tree()
    _, g = value_and_grad(obj, tree)
    fd = finite_diff_grad(obj, tree, 1e-5)
    gv, _ = tree_flatten(g)
    fv, _ = tree_flatten(fd)
    denom = np.maximum(np.abs(fv), 1e-8)
    worst = float(np.max(np.abs(gv - fv) / denom))
    ok = worst <= 1e-4
    print(f"gradcheck: max relative error {worst:.3e} "
          f"({'PASS' if ok else 'FAIL'} at 1e-4)")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="latshift",
                                description="latent-subgroup shift adaptation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset directory")
    g.add_argument("--generator", choices=["app_a", "app_b"], default="app_a")
    g.add_argument("--n", type=int, default=70000)
    g.add_argument("--d-x", type=int, default=2)
    g.add_argument("--pi", help="comma-separated prior over the confounder")
    g.add_argument("--target", action="store_true",
                   help="strip observed columns down to covariates")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="learn the source model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hyper", help="JSON overrides for training settings")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("adapt", help="re-estimate the prior on target data")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.set_defaults(fn=cmd_adapt)

    pr = sub.add_parser("predict", help="write adapted label predictives")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--unadapted", action="store_true")
    pr.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="accuracy of a prediction file")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="run a full experiment grid")
    s.add_argument("--config", help="JSON experiment configuration")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--emit-plot-data", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
