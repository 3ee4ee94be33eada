"""Command line interface: ``deepfp run | evaluate | riccati | gradcheck | bench``."""
import argparse
import hashlib
import json
import os
import sys
import time
from contextlib import nullcontext
from functools import partial
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .exceptions import CheckpointError, ConfigError, DeepFPError, UsageError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
THREADS_ENV = "DEEPFP_NUM_THREADS"


def _thread_limit(deterministic):
    value = os.environ.get(THREADS_ENV)
    n = 1 if deterministic else None
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}")
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_config(args):
    if args.config:
        cfg = cfgmod.load(args.config, preset=args.preset)
    else:
        cfg = cfgmod.from_dict({}, preset=args.preset)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    if updates:
        cfg = cfgmod.from_dict({**cfg.to_dict(), **updates})
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir):
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(run_dir).as_posix()] = _sha256(p)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump({"files": files}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def _run_dir(args, cfg, name):
    if args.out:
        return Path(args.out)
    return Path(cfg.output_dir) / f"{name}-{cfg.preset or 'custom'}-seed{cfg.seed}"


def _oracle_parts(cfg, params):
    if params is None:
        return None, None
    from .evaluation import RiccatiOracle
    from .systemic_risk import riccati_solve

    riccati = riccati_solve(params)
    return riccati, RiccatiOracle(riccati)


def _alpha0(cfg, game, riccati):
    choice = cfg.dfp.alpha0
    if choice == "zero":
        return None
    if choice == "oracle":
        if riccati is None:
            raise ConfigError("alpha0 'oracle' needs the inter-bank game")
        from .systemic_risk import optimal_policy

        return partial(optimal_policy, riccati)
    value = float(choice)

    def constant(t, x):
        return np.full(np.shape(x)[:-1] + (game.N, game.d_alpha), value)

    return constant


def _delta0(cfg, game, partition, riccati):
    d = cfg.delta0
    if d.mode == "fixed" or riccati is None:
        return d.value, True
    from .sde import delta0_fixed_point
    from .systemic_risk import optimal_policy

    return delta0_fixed_point(game, partial(optimal_policy, riccati), partition, delta_init=d.value,
                              batch=d.batch, max_iter=d.max_iter, rel_tol=d.rel_tol, seed=cfg.seed)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _rse_artifacts(cfg, game, riccati, partition, delta0, nets, run_dir):
    from .evaluation import ground_truth_paths, predicted_gradients, rse_report

    gt_paths, truth = ground_truth_paths(game, riccati, partition, delta0, J=cfg.evaluation.J,
                                         seed=cfg.seed)
    report = rse_report(truth, predicted_gradients(nets, gt_paths), partition)
    report.to_csv(run_dir / "rse_profile.csv")
    return report


def cmd_run(args):
    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg, "run")
    with _thread_limit(cfg.deterministic):
        from .dfp import run_dfp, save_policy

        game, params = cfgmod.build_game(cfg)
        partition = cfgmod.build_partition(cfg)
        riccati, oracle = _oracle_parts(cfg, params)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.yaml", "w") as fh:
            fh.write(cfg.to_yaml())
        if riccati is not None:
            riccati.to_csv(run_dir / "riccati.csv")
        delta0, converged = _delta0(cfg, game, partition, riccati)
        dfp_cfg = cfgmod.build_dfp_config(cfg, delta0, _alpha0(cfg, game, riccati))

        def log(record):
            print(f"stage {record.stage}: loss {record.final_loss:.6g} "
                  f"d_prev {record.policy_distance_prev[0]:.4g}"
                  + ("" if record.rse is None else f" rse {record.rse:.4g}"), flush=True)

        report, policy = run_dfp(game, dfp_cfg, partition, oracle=oracle,
                                 checkpoint_dir=run_dir / "checkpoints", log=log)
        meta = {"delta0": delta0, "delta0_converged": bool(converged), "config": cfg.to_dict()}
        if policy.stage > 0:
            save_policy(run_dir / "policy.ckpt", policy, meta=meta)
        for rec in report.stages:
            with open(run_dir / f"history_stage_{rec.stage:02d}.csv", "w") as fh:
                fh.write("step,loss,rse\n")
                for row in rec.history:
                    rse = row.get("rse")
                    fh.write(f"{row['step']},{row['loss']!r},{'' if rse is None else repr(rse)}\n")
        summary = {"delta0": delta0, "delta0_converged": bool(converged)}
        if riccati is not None and policy.stage > 0:
            rep = _rse_artifacts(cfg, game, riccati, partition, delta0,
                                 policy.player_nets(policy.stage, 0), run_dir)
            summary["final_rse"] = rep.rse
        with open(run_dir / "report.json", "w") as fh:
            full = report.to_dict(timings=not cfg.deterministic)
            full["summary"] = summary
            json.dump(full, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_json(run_dir / "timings.json", report.timings())
        write_manifest(run_dir)
    print(f"artifacts written to {run_dir}")
    if not report.completed:
        print(f"run stopped early: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg, "evaluate")
    with _thread_limit(cfg.deterministic):
        from .dfp import GapConfig, NetSpec, eps_nash_gap, load_policy
        from .bsde import TrainConfig
        from .evaluation import path_comparison
        from .sde import sample_initial

        game, params = cfgmod.build_game(cfg)
        partition = cfgmod.build_partition(cfg)
        riccati, _ = _oracle_parts(cfg, params)
        policy, meta = load_policy(args.checkpoint, game, alpha0=_alpha0(cfg, game, riccati))
        if policy.stage == 0:
            raise CheckpointError("checkpoint holds no trained stage")
        nets = policy.player_nets(policy.stage, 0)
        if nets.representation == "per_step" and len(nets.z_nets) != partition.n_steps:
            raise CheckpointError("checkpoint partition does not match the configuration")
        delta0 = meta.get("delta0", cfg.delta0.value)
        run_dir.mkdir(parents=True, exist_ok=True)
        out = {"checkpoint": str(args.checkpoint), "stage": policy.stage, "delta0": delta0}
        if riccati is not None:
            out["rse"] = _rse_artifacts(cfg, game, riccati, partition, delta0, nets, run_dir).rse
            x0 = sample_initial(delta0, game.n, 1, cfg.seed)
            path_comparison(game, riccati, policy, partition, x0[0], seed=cfg.seed,
                            path=run_dir / "comparison.csv")
        net = cfg.network
        gap_cfg = GapConfig(
            train=TrainConfig(steps=cfg.evaluation.gap_steps, batch=cfg.train.batch, lr=cfg.train.lr,
                              seed=cfg.seed, eval_every=cfg.train.eval_every),
            nets=NetSpec(hidden=tuple(net.hidden), activation=net.activation,
                         batchnorm=net.batchnorm, representation=net.representation,
                         head=net.head, momentum=net.momentum),
            delta0=delta0, eval_batch=cfg.evaluation.gap_batch, seed=cfg.seed)
        out["eps_nash_gap_player_0"] = eps_nash_gap(game, policy, 0, partition, gap_cfg).to_dict()
        _write_json(run_dir / "evaluate.json", out)
        write_manifest(run_dir)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_riccati(args):
    cfg = _load_config(args)
    _, params = cfgmod.build_game(cfg)
    if params is None:
        raise UsageError("the riccati subcommand needs the inter-bank game")
    from .systemic_risk import riccati_solve

    sol = riccati_solve(params)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        sol.to_csv(args.out)
        print(f"wrote {args.out}")
    else:
        sol.to_csv(sys.stdout)
    return EXIT_OK


GRADCHECK_CASES = [
    {"hidden": (6, 5), "batchnorm": False, "activation": "tanh"},
    {"hidden": (6, 5), "batchnorm": True, "activation": "tanh"},
    {"hidden": (4, 4, 4), "batchnorm": True, "activation": "tanh", "input_batchnorm": False},
    {"hidden": (5,), "batchnorm": False, "activation": "relu"},
]
GRADCHECK_TOL = 1e-5


def gradcheck_suite(seed=0):
    from .nn import INFER, TRAIN, Mlp, MlpConfig, gradcheck

    rows = []
    for j, case in enumerate(GRADCHECK_CASES):
        for mode in (TRAIN, INFER):
            net = Mlp(MlpConfig(3, 2, seed=seed + j, **case))
            x = np.random.default_rng(seed + 100 + j).normal(size=(7, 3))
            if mode == INFER and case.get("batchnorm"):
                for _ in range(3):
                    net.forward(x * 1.3 + 0.1)
            err = gradcheck(net, x, mode=mode, seed=seed + j)
            rows.append({"case": j, "mode": mode, "hidden": str(case["hidden"]),
                         "batchnorm": str(case["batchnorm"]), "activation": case["activation"],
                         "max_err": err})
    return rows


def cmd_gradcheck(args):
    rows = gradcheck_suite()
    worst = max(r["max_err"] for r in rows)
    print(f"{'case':>4} {'mode':>6} {'layers':>10} {'bn':>5} {'act':>5} {'max_err':>10}")
    for r in rows:
        print(f"{r['case']:>4} {r['mode']:>6} {r['hidden']:>10} {r['batchnorm']:>5} "
              f"{r['activation']:>5} {r['max_err']:>10.2e}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.2e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def bench_step(cfg, repeats=3):
    """Seconds per training step of one stage-1 problem under ``cfg``."""
    from .bsde import loss_and_grads
    from .dfp import StagePolicy, fresh_nets, path_source, player_problem
    from .nn import AdamHyper, AdamState, adam_step

    game, _ = cfgmod.build_game(cfg)
    partition = cfgmod.build_partition(cfg)
    dfp_cfg = cfgmod.build_dfp_config(cfg, cfg.delta0.value)
    policy = StagePolicy(game, shared=dfp_cfg.share_players)
    nets = fresh_nets(game, partition, dfp_cfg.nets, cfg.seed)
    problem = player_problem(game, policy, 0, dfp_cfg.mode, partition)
    source = path_source(game, partition, dfp_cfg.delta0, cfg.train.batch, cfg.seed, (0,))
    hyper = AdamHyper(lr=cfg.train.lr)
    states = [AdamState.zeros(net.size) for net in [nets.y0_net] + nets.z_nets]
    times = []
    for step in range(repeats + 1):
        start = time.perf_counter()
        _, y0_grad, z_grads = loss_and_grads(problem, nets, source(step))
        for j, (net, grad) in enumerate(zip([nets.y0_net] + nets.z_nets, [y0_grad] + z_grads)):
            net.params, states[j] = adam_step(states[j], net.params, grad, hyper, step)
        times.append(time.perf_counter() - start)
    return float(np.median(times[1:]))


def cmd_bench(args):
    deterministic = bool(args.deterministic)
    print(f"deterministic: {deterministic}")
    print(f"{'preset':>6} {'sec/step':>10} {'steps/sec':>10}")
    with _thread_limit(deterministic):
        for name in ("ci", "full"):
            sec = bench_step(cfgmod.preset(name), repeats=args.repeats)
            print(f"{name:>6} {sec:>10.4f} {1.0 / sec:>10.2f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="deepfp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="scale preset")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS and timing-free reports")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("run", help="train by deep fictitious play")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("evaluate", help="evaluate a checkpoint without retraining")
    common(p)
    p.add_argument("--checkpoint", required=True, help="policy checkpoint written by 'run'")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("riccati", help="dump the closed-form solution as CSV")
    common(p, out_help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_riccati)
    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("bench", help="time one training step at both presets")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DeepFPError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
