"""Command-line entry point: ``cogradar <command> --config scenario.yaml``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from . import interference as itf
from . import neural
from .config import ConfigError, apply_overrides, dump_config, load_config
from .deep import DeepQAgent, export_lut, lut_latency
from .experiments import (EXACT_KINDS, build_agent, channel_of, env_signature, evaluate_agent, load_agent,
                          roc_for_agent, run_oracle, save_agent, train_agent)
from .radar import MetricsRow
from .spectrum import InvalidInput, enumerate_actions

METRIC_COLUMNS = [
    ("avg_sinr_db", "avg_sinr_db"),
    ("avg_bandwidth_mhz", "avg_bandwidth_mhz"),
    ("collision_steps_pct", "pct_collision_steps"),
    ("missed_opp_steps_pct", "pct_missed_opp_steps"),
    ("missed_opp_any_steps_pct", "pct_missed_opp_any_steps"),
    ("adaptation_steps_pct", "pct_adaptation_steps"),
    ("n_steps", "n_steps"),
]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def metrics_rows(named: list[tuple[str, MetricsRow | None]]):
    header = ["agent"] + [c for c, _ in METRIC_COLUMNS]
    rows = []
    for name, m in named:
        if m is None:
            continue
        rows.append([name] + [getattr(m, attr) for _, attr in METRIC_COLUMNS])
    return header, rows


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _version(dist: str) -> str:
    try:
        return metadata.version(dist)
    except metadata.PackageNotFoundError:
        return "unknown"


class Run:
    """Tracks files produced by one command and writes the manifest last."""

    def __init__(self, command: str, cfgs, out_dir: str):
        self.command = command
        self.cfgs = list(cfgs)
        self.out_dir = out_dir
        self.files: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.out_dir, name)
        self.files.append(p)
        return p

    def finish(self, extra: dict | None = None) -> str:
        manifest = {
            "command": self.command,
            "config_hashes": [c.digest() for c in self.cfgs],
            "seeds": [{"env": c.seeds.env, "agent": c.seeds.agent, "noise": c.seeds.noise} for c in self.cfgs],
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "pyyaml": _version("PyYAML"), "package": _version("artifact")},
            "started_utc": self.started,
            "finished_utc": datetime.now(timezone.utc).isoformat(),
            "files": [{"path": os.path.relpath(p, self.out_dir), "sha256": _sha256(p), "bytes": os.path.getsize(p)}
                      for p in self.files if os.path.exists(p)],
        }
        if extra:
            manifest.update(extra)
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return path


def _config(args, path=None):
    cfg = load_config(path or args.config[0])
    return apply_overrides(cfg, seed_env=args.seed_env, seed_agent=args.seed_agent, seed_noise=args.seed_noise,
                           paper_scale=args.paper_scale, out=args.out, continue_learning=args.continue_learning)


def _curve_rows(log):
    return [[k, r] for k, r in enumerate(log.cpi_rewards)]


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Run("train", [cfg], cfg.output_dir)
    agent, log = train_agent(cfg)
    ckpt = run.path("agent.ckpt")
    save_agent(agent, ckpt)
    write_csv(run.path("train_reward.csv"), ["cpi_index", "mean_reward"], _curve_rows(log))
    if cfg.agent.variant == "policy_iteration" and agent.policy is not None:
        agent.policy.export(run.path("policy.txt"))
    extra = {}
    if args.export_lut:
        if not isinstance(agent, DeepQAgent):
            raise ConfigError("--export-lut needs a deep agent variant")
        lut = export_lut(agent)
        lut.export(run.path("lut.txt"))
        latency = lut_latency(lut)
        extra["lut"] = {"entries": len(lut), "seconds_per_decision": latency,
                        "interference_slot_s": cfg.radar.interference_slot_s,
                        "within_half_slot": latency < cfg.radar.interference_slot_s / 2}
        print(f"LUT: {len(lut)} entries, {latency * 1e9:.1f} ns per decision "
              f"(slot {cfg.radar.interference_slot_s * 1e3:.3f} ms)")
    dump_config(cfg, run.path("config.yaml"))
    print(run.finish(extra))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    run = Run("eval", [cfg], cfg.output_dir)
    actions = enumerate_actions(channel_of(cfg))
    if args.checkpoint:
        agent = load_agent(args.checkpoint, cfg, actions)
    elif cfg.agent.variant in ("saa", "random", "full_band"):
        agent = build_agent(cfg, actions)
    else:
        raise ConfigError(f"agent.variant {cfg.agent.variant!r} needs --checkpoint for eval")
    log, metrics = evaluate_agent(cfg, agent)
    write_csv(run.path("eval_reward.csv"), ["cpi_index", "mean_reward"], _curve_rows(log))
    header, rows = metrics_rows([(cfg.agent.variant, metrics)])
    write_csv(run.path("metrics.csv"), header, rows)
    print(run.finish())
    return 0


def _unique(names):
    seen = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n}_{seen[n]}")
    return out


def cmd_compare(args) -> int:
    cfgs = [_config(args, p) for p in args.config]
    sig = env_signature(cfgs[0])
    for k, c in enumerate(cfgs[1:], start=1):
        if env_signature(c) != sig:
            raise ConfigError(f"config #{k + 1} differs from config #1 in its environment or env seed")
    out_dir = args.out or cfgs[0].output_dir
    run = Run("compare", cfgs, out_dir)
    results = []
    for c in cfgs:
        agent, _ = train_agent(c)
        log, metrics = evaluate_agent(c, agent)
        results.append((c.agent.variant, log, metrics))
    if cfgs[0].interference.kind in EXACT_KINDS and not args.no_oracle:
        oracle = run_oracle(cfgs[0])
        results.append((oracle.name, oracle.eval, oracle.metrics))
    names = _unique([r[0] for r in results])
    n = max(len(r[1].cpi_rewards) for r in results)
    rows = []
    for k in range(n):
        rows.append([k] + [fmt(r[1].cpi_rewards[k]) if k < len(r[1].cpi_rewards) else "" for r in results])
    write_csv(run.path("compare_reward.csv"), ["cpi_index"] + [f"{name}_mean_reward" for name in names], rows)
    header, mrows = metrics_rows([(name, r[2]) for name, r in zip(names, results)])
    header.insert(1, "mean_reward")
    for row, r in zip(mrows, [r for r in results if r[2] is not None]):
        row.insert(1, float(np.mean(r[1].cpi_rewards)))
    write_csv(run.path("summary.csv"), header, mrows)
    print(run.finish())
    return 0


def cmd_roc(args) -> int:
    cfgs = [_config(args, p) for p in args.config]
    out_dir = args.out or cfgs[0].output_dir
    run = Run("roc", cfgs, out_dir)
    checkpoints = args.checkpoint or []
    if checkpoints and len(checkpoints) != len(cfgs):
        raise ConfigError("give one --checkpoint per --config, or none")
    named = []
    names = _unique([c.agent.variant for c in cfgs])
    for k, (name, c) in enumerate(zip(names, cfgs)):
        actions = enumerate_actions(channel_of(c))
        if checkpoints:
            agent = load_agent(checkpoints[k], c, actions)
        elif c.agent.variant in ("saa", "random", "full_band"):
            agent = build_agent(c, actions)
        else:
            agent, _ = train_agent(c)
        points, metrics, _ = roc_for_agent(c, agent)
        write_csv(run.path(f"roc_{name}.csv"), ["threshold_pfa", "fa_rate", "pd_rate"],
                  [[p, fa, pd] for p, (fa, pd) in zip(c.radar.pfas, points)])
        named.append((name, metrics))
    header, rows = metrics_rows(named)
    write_csv(run.path("roc_metrics.csv"), header, rows)
    print(run.finish())
    return 0


def cmd_trace_gen(args) -> int:
    if args.config:
        cfg = _config(args)
        it = cfg.interference
        kind, p, mask, masks, n = it.kind, it.p_switch, it.active_mask, it.masks, cfg.channel.n_subbands
    else:
        kind, p, n = args.kind, args.p_switch, args.n_subbands
        mask = [int(b) for b in args.active_mask.split(",")] if args.active_mask else [1, 1] + [0] * (n - 2)
        masks = []
    if kind == "sweep":
        gen = itf.SweepGenerator(n)
    elif kind == "markov":
        gen = itf.MarkovGenerator(p, tuple(mask), seed=args.seed)
    elif kind == "cycle":
        gen = itf.CycleGenerator([tuple(m) for m in masks])
    else:
        raise ConfigError(f"trace-gen supports sweep, markov and cycle sources, not {kind!r}")
    if args.length < 1:
        raise ConfigError("--length must be positive")
    frames = [gen.next_theta() for _ in range(args.length)]
    path = args.path
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if args.power:
        rng = np.random.default_rng(args.seed)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"threshold_db={fmt(args.threshold_db)}\n")
            for f in frames:
                level = np.where(np.array(f) == 1, args.threshold_db + 10.0, args.threshold_db - 10.0)
                values = level + rng.uniform(-3.0, 3.0, size=len(f))
                fh.write(",".join(f"{v:.3f}" for v in values) + "\n")
    else:
        itf.write_trace(path, frames)
    print(f"wrote {len(frames)} frames to {path}")
    return 0


def cmd_grad_check(args) -> int:
    per_layer: dict[str, float] = {}
    for kind in ("dense", "lstm", "mixed"):
        stack_worst = 0.0
        for seed in range(args.seeds):
            net, xs, actions, targets, sequence = neural.random_check_case(kind, seed)
            report = neural.gradient_check(net, xs, actions, targets, sequence=sequence)
            for layer_kind, err in report.items():
                per_layer[layer_kind] = max(per_layer.get(layer_kind, 0.0), err)
            stack_worst = max(stack_worst, max(report.values()))
        print(f"stack {kind:6s} max relative error {stack_worst:.3e} over {args.seeds} seeds")
    for layer_kind, err in sorted(per_layer.items()):
        print(f"layer {layer_kind:6s} max relative error {err:.3e}")
    ok = max(per_layer.values()) <= args.tolerance
    print("PASS" if ok else f"FAIL (tolerance {args.tolerance:g})")
    return 0 if ok else 1


# --------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogradar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi=False, required=True):
        p.add_argument("--config", action="append" if multi else None, required=required,
                       type=str, help="scenario YAML" + (" (repeatable)" if multi else ""))
        p.add_argument("--seed-env", type=int)
        p.add_argument("--seed-agent", type=int)
        p.add_argument("--seed-noise", type=int)
        p.add_argument("--paper-scale", action="store_true", help="500 offline / 70 eval CPIs of 1000 pulses")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--continue-learning", type=_bool, default=None, metavar="BOOL")

    p = sub.add_parser("train", help="offline training; writes a checkpoint and reward curve")
    common(p)
    p.add_argument("--export-lut", action="store_true", help="also write the greedy look-up table")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="online evaluation; writes metrics and reward curve")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate several configs on one environment")
    common(p, multi=True)
    p.add_argument("--no-oracle", action="store_true", help="skip the exact-dynamics reference column")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("roc", help="detection ROC per agent through the radar simulation")
    common(p, multi=True)
    p.add_argument("--checkpoint", action="append")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("trace-gen", help="write an interference trace file")
    common(p, required=False)
    p.add_argument("--kind", default="markov", choices=["sweep", "markov", "cycle"])
    p.add_argument("--p-switch", type=float, default=0.4)
    p.add_argument("--active-mask", default="")
    p.add_argument("--n-subbands", type=int, default=5)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--path", required=True)
    p.add_argument("--power", action="store_true", help="write dB power rows with a threshold header")
    p.add_argument("--threshold-db", type=float, default=-90.0)
    p.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("grad-check", help="finite-difference check of the network gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None and isinstance(args.config, str):
        args.config = [args.config]
    try:
        return args.func(args)
    except (ConfigError, InvalidInput, neural.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
