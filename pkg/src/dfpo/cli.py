"""Command line: ``dfpo train | eval | diagnose``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage,
3 corrupt checkpoint, 4 a diagnostic threshold was violated.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .diffcore import ScoreNet, finite_diff_check
from .environments import ConfigError, Environment
from .evalharness import (
    energy_drift,
    euler_power_check,
    eval_terminal,
    export_report,
    integrator_order,
    pointwise_error_stats,
    regret_estimate,
)
from .trainer import ReplayMemory, StageError, policy, train

log = logging.getLogger("dfpo")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CKPT, EXIT_THRESHOLD = 0, 1, 2, 3, 4

STAGE_COLUMNS = ("stage", "n_starts", "n_failed", "memory_size", "epochs", "final_loss", "true_loss_before",
                 "true_loss_after", "seconds")
EPISODE_COLUMNS = ("episode", "stage", "terminal_score")


class UsageError(Exception):
    pass


def _f(v):
    return "%.17g" % v


def save_memory(path, memory: ReplayMemory, last_stage):
    tmp = Path(path).with_name(Path(path).name + ".tmp.npz")
    np.savez(tmp, x=memory.x, y=memory.y, provenance=memory.provenance, stage=memory.stage,
             last_stage=np.int64(last_stage))
    tmp.replace(path)


def load_memory(path, dim):
    with np.load(path) as z:
        x, y, prov, st, last = z["x"], z["y"], z["provenance"], z["stage"], int(z["last_stage"])
    mem = ReplayMemory(dim)
    for k in np.unique(st):
        sel = st == k
        mem.append_stage(int(k), x[sel], y[sel], prov[sel])
    return mem, last


def _stage_ckpt(out, k):
    return out / f"stage_{k:02d}.dfpo"


def _config_from_header(header) -> RunConfig:
    try:
        return parse_config(header["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint carries no usable config echo ({exc})") from exc


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = parse_config({**cfg.flat, "run.seed": str(args.seed)})
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
    stage_csv, episode_csv, mem_path = out / "stages.csv", out / "episodes.csv", out / "memory.npz"

    resume = None
    n_prev_episodes = 0
    if args.resume and mem_path.exists():
        memory, last = load_memory(mem_path, cfg.env.phase_dim)
        net, header = load_checkpoint(_stage_ckpt(out, last))
        if header.get("config") != echo:
            raise ConfigError("--resume with a config that differs from the run being resumed", ["config"])
        resume = (net, memory, last)
        n_prev_episodes = sum(cfg.schedule.N[:last])
        log.info("resuming after stage %d (%d samples in memory)", last, len(memory))
    else:
        for path, cols in ((stage_csv, STAGE_COLUMNS), (episode_csv, EPISODE_COLUMNS)):
            with path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(cols)

    def on_stage(k, net, history, memory):
        rec = history.stages[-1]
        with stage_csv.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [k, rec.n_starts, rec.n_failed, rec.memory_size, len(rec.epoch_losses), _f(rec.epoch_losses[-1]),
                 _f(rec.true_loss_before), _f(rec.true_loss_after), _f(rec.seconds)])
        lo = len(history.episode_stage) - rec.n_starts
        with episode_csv.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for i in range(lo, len(history.episode_stage)):
                w.writerow([n_prev_episodes + i, k, _f(history.terminal_scores[i])])
        save_checkpoint(_stage_ckpt(out, k), net, echo, stage=k)
        save_memory(mem_path, memory, k)

    net, history, _ = train(cfg.env, cfg.schedule, cfg.net, cfg.optimizer, seed=cfg.seed, on_stage=on_stage,
                            resume=resume)
    final = save_checkpoint(out / "final.dfpo", net, echo, stage=cfg.env.H - 1)
    print(f"trained {len(history.stages)} stages in {history.wall_clock:.1f}s; checkpoint {final}")
    return EXIT_OK


def cmd_eval(args):
    net, header = load_checkpoint(args.ckpt)
    cfg = _config_from_header(header)
    env = Environment(cfg.env)
    rep = eval_terminal(policy(net, cfg.env.dt), env, args.episodes, args.seed)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"eval_seed{args.seed}.csv")
    export_report(rep, out, "JSON" if out.suffix.lower() == ".json" else "CSV")
    print(f"terminal cost {rep.mean:.6g} +/- {rep.std:.6g} over {len(rep.terminal_costs)} episodes "
          f"({rep.n_failed} failed); report {out}")
    return EXIT_OK


def _line(name, value, ok):
    print(f"{name}: {value} [{'ok' if ok else 'FAIL'}]")
    return ok


def _diag_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    worst = strict = 0.0
    for _ in range(args.nets):
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(4, 33, size=depth)]
        act = ("tanh", "softplus", "sigmoid")[int(rng.integers(3))]
        dim = 2 * int(rng.integers(1, 5))
        net = ScoreNet.init([dim, *widths, 1], rng, activation=act, output_scale=1.0)
        for x in rng.standard_normal((args.inputs, dim)):
            worst = max(worst, finite_diff_check(net, x))
            strict = max(strict, finite_diff_check(net, x, elementwise=True))
    print(f"elementwise relative error (informational, rounding-dominated on near-zero entries): {strict:.3e}")
    return _line(f"gradcheck max relative error over {args.nets} nets x {args.inputs} inputs", f"{worst:.3e}",
                 worst <= args.threshold if args.threshold is not None else worst <= 1e-5)


def _diag_oracle(args):
    ok = _line("Euler rollout vs matrix powers, max deviation", f"{euler_power_check():.3e}",
               euler_power_check() <= 1e-12)
    errs, ratios = integrator_order()
    ok &= _line("one-step error ratios per halving of dt", ", ".join(f"{r:.3f}" for r in ratios),
                min(ratios) >= 3.9)
    drift = energy_drift()
    ok &= _line("harmonic energy drift over 20 steps at dt=0.01", f"{drift:.3e}", drift < 5e-3)
    return ok


def _diag_pointwise(args):
    if not args.ckpt:
        raise UsageError("diagnose --mode pointwise needs --ckpt")
    net, header = load_checkpoint(args.ckpt)
    cfg = _config_from_header(header)
    if cfg.env.kind != "quadratic":
        raise UsageError("pointwise error needs a quadratic-environment checkpoint")
    env = Environment(cfg.env)
    op = policy(net, cfg.env.dt)
    ok = True
    threshold = 0.05 if args.threshold is None else args.threshold
    for j in (1, 2, 3):
        m, se = pointwise_error_stats(op, env.oracle(), j, n=500, seed=args.seed, env=env)
        line_ok = m < threshold if j == 1 else True
        ok &= _line(f"pointwise error j={j}", f"{m:.4g} +/- {se:.2g}", line_ok)
    return ok


def _diag_regret(args):
    if not args.config:
        raise UsageError("diagnose --mode regret needs --config")
    cfg = load_config(args.config, args.set)
    if cfg.env.kind != "quadratic":
        raise UsageError("regret needs the quadratic environment")
    exps = []
    for s in range(args.seed, args.seed + args.seeds):
        c = parse_config({**cfg.flat, "run.seed": str(s)})
        _, history, _ = train(c.env, c.schedule, c.net, c.optimizer, seed=s)
        curve = regret_estimate(history, Environment(c.env))
        print(f"seed {s}: exponent {curve.exponent:.4f} ({curve.n_clipped} negative gaps clipped)")
        exps.append(curve.exponent)
    mean = float(np.nanmean(exps))
    threshold = 1.0 if args.threshold is None else args.threshold
    return _line(f"mean regret exponent over {len(exps)} seeds", f"{mean:.4f}", mean < threshold)


def cmd_diagnose(args):
    fn = {"gradcheck": _diag_gradcheck, "oracle": _diag_oracle, "pointwise": _diag_pointwise,
          "regret": _diag_regret}[args.mode]
    return EXIT_OK if fn(args) else EXIT_THRESHOLD


def build_parser():
    p = argparse.ArgumentParser(prog="dfpo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a score network stage by stage")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="terminal cost of a checkpoint on fresh starts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diagnose", help="numerical self-checks")
    d.add_argument("--mode", required=True, choices=("gradcheck", "oracle", "pointwise", "regret"))
    d.add_argument("--ckpt")
    d.add_argument("--config")
    d.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--seeds", type=int, default=5)
    d.add_argument("--nets", type=int, default=100)
    d.add_argument("--inputs", type=int, default=100)
    d.add_argument("--threshold", type=float)
    d.set_defaults(fn=cmd_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    if getattr(args, "episodes", 1) < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc} (fields: {', '.join(exc.fields)})", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except StageError as exc:
        print(f"training failed at stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
