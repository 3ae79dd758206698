"""Command-line entry point: thin adapters over the library."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from irgame import __version__
from irgame.decomposition import write_inventory
from irgame.dynamics import observation_model
from irgame.equilibrium import (
    SolverSettings,
    best_response_attacker,
    best_response_defender,
    dfsp_run,
    exploitability,
    load_strategy,
    save_strategy,
    task_rng,
)
from irgame.infrastructure import ConfigError, cardinalities, load_config
from irgame.simulation import mean_and_se, run_episodes, simulate_episode
from irgame.stopping import horizon_for
from irgame.strategies import StrategyProfile, constant_defender, static_strategies, uniform_attacker
from irgame.sysid import estimate_observation_model, ingest_traces, validate_mlr, write_model_csv

log = logging.getLogger("irgame")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="game configuration file or bundled fixture name")
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--episodes", type=int, help="evaluation episodes")
    p.add_argument("--horizon", type=int, help="episode length (default: gamma**T < 1e-4)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="irgame", description=__doc__)
    parser.add_argument("--version", action="version", version=f"irgame {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("simulate", parents=[common], help="simulate episodes of a strategy profile")
    p.add_argument("--defender", default="static", help="static, null, or a strategy file")
    p.add_argument("--attacker", default="static", help="static, uniform, or a strategy file")

    p = sub.add_parser("br-defender", parents=[common], help="defender best response to an attacker")
    p.add_argument("--attacker", default="static")

    p = sub.add_parser("br-attacker", parents=[common], help="attacker best response to a defender")
    p.add_argument("--defender", default="static")

    p = sub.add_parser("dfsp", parents=[common], help="run fictitious self-play")
    p.add_argument("--delta", type=float, default=0.2, help="exploitability stop threshold")
    p.add_argument("--max-iterations", type=int, default=100)

    p = sub.add_parser("exploitability", parents=[common], help="estimate exploitability of a profile")
    p.add_argument("--defender", default="static")
    p.add_argument("--attacker", default="static")

    p = sub.add_parser("ident", parents=[common], help="estimate an observation model from traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--smoothing", type=float, default=1.0)
    p.add_argument("--obs-space", type=int, help="observation space size when no config is given")

    p = sub.add_parser("cardinality", parents=[common], help="print state, observation and action space sizes")
    p.add_argument("--zones", type=int, required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--obs", type=int, default=100)
    p.add_argument("--defender-actions", type=int)
    p.add_argument("--attacker-actions", type=int, default=4)
    return parser


# --------------------------------------------------------------------------- helpers


def _config(args):
    if not args.config:
        raise UsageError("--config is required for this command")
    return load_config(args.config)


def _horizon(args, cfg) -> int:
    return args.horizon or horizon_for(cfg.gamma)


def _defender(spec: str, cfg):
    if spec == "static":
        return static_strategies("defender", cfg)
    if spec == "null":
        return constant_defender(cfg, 0)
    return load_strategy(spec)


def _attacker(spec: str, cfg):
    if spec == "static":
        return static_strategies("attacker", cfg)
    if spec == "uniform":
        return uniform_attacker(cfg)
    return load_strategy(spec)


def _out(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args) -> None:
    overrides = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "config", "seed", "out", "verbose")}
    lines = [
        f"command = {args.command}",
        f"config = {args.config or ''}",
        f"seed = {args.seed}",
        f"overrides = {json.dumps(overrides, sort_keys=True)}",
        f"out = {args.out}",
        f"version = {__version__}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------- commands


def cmd_simulate(args) -> None:
    cfg = _config(args)
    model = observation_model(cfg)
    T = _horizon(args, cfg)
    D, A = _defender(args.defender, cfg), _attacker(args.attacker, cfg)
    episodes = args.episodes or 100
    batch = run_episodes(cfg, model, D, A, episodes, T, task_rng(args.seed, 0, 0, 0, 0))
    traj = simulate_episode(StrategyProfile(D, A), T, cfg, model, task_rng(args.seed, 0, 0, 0, 1))
    mean, se = mean_and_se(batch.returns)
    print(f"episodes={episodes} horizon={T} mean_J={mean:.6f} se={se:.6f}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        traj.write_csv(out / "trajectories.csv")
        _write_rows(out / "metrics.csv", ["episodes", "horizon", "mean_J", "se"], [[episodes, T, repr(mean), repr(se)]])
        write_inventory(cfg, out / "subgames.csv")


def cmd_br_defender(args) -> None:
    cfg = _config(args)
    model = observation_model(cfg)
    A = _attacker(args.attacker, cfg)
    br = best_response_defender(cfg, model, A, SolverSettings(), args.seed, 0, args.workers)
    T, episodes = _horizon(args, cfg), args.episodes or 1000
    J = run_episodes(cfg, model, br, A, episodes, T, task_rng(args.seed, 0, 0, 0, 1)).returns
    mean, se = mean_and_se(J)
    print(f"defender best response: mean_J={mean:.6f} se={se:.6f}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        (out / "strategies").mkdir(exist_ok=True)
        save_strategy(br, out / "strategies" / "defender.json", "defender")
        _write_rows(out / "metrics.csv", ["episodes", "horizon", "mean_J", "se"], [[episodes, T, repr(mean), repr(se)]])


def cmd_br_attacker(args) -> None:
    cfg = _config(args)
    model = observation_model(cfg)
    D = _defender(args.defender, cfg)
    br = best_response_attacker(cfg, model, D, SolverSettings(), args.seed, 0, args.workers)
    T, episodes = _horizon(args, cfg), args.episodes or 1000
    J = run_episodes(cfg, model, D, br, episodes, T, task_rng(args.seed, 0, 1, 0, 1)).returns
    mean, se = mean_and_se(J)
    print(f"attacker best response: mean_J={mean:.6f} se={se:.6f}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        (out / "strategies").mkdir(exist_ok=True)
        save_strategy(br, out / "strategies" / "attacker.json", "attacker")
        _write_rows(out / "metrics.csv", ["episodes", "horizon", "mean_J", "se"], [[episodes, T, repr(mean), repr(se)]])


def cmd_dfsp(args) -> None:
    cfg = _config(args)
    settings = SolverSettings(eval_episodes=args.episodes or SolverSettings.eval_episodes, horizon=args.horizon)
    out = _out(args)
    profile, metrics = dfsp_run(
        cfg, settings, args.delta, args.max_iterations, args.seed, args.workers,
        checkpoint_dir=None if out is None else out / "strategies",
    )
    for r in metrics.records:
        print(f"iteration={r.iteration} delta_hat={r.delta_hat:.6f} se={r.delta_se:.6f}")
    if out is not None:
        write_manifest(out, args)
        metrics.write_csv(out / "metrics.csv")
        metrics.write_timing(out / "timing.csv")


def cmd_exploitability(args) -> None:
    cfg = _config(args)
    model = observation_model(cfg)
    D, A = _defender(args.defender, cfg), _attacker(args.attacker, cfg)
    settings = SolverSettings()
    hat_D = best_response_defender(cfg, model, A, settings, args.seed, 0, args.workers)
    hat_A = best_response_attacker(cfg, model, D, settings, args.seed, 0, args.workers)
    episodes = args.episodes or settings.eval_episodes
    ex = exploitability(
        StrategyProfile(D, A), hat_D, hat_A, episodes, _horizon(args, cfg),
        task_rng(args.seed, 0, 2, 0, 1), cfg=cfg, model=model,
    )
    print(f"delta_hat={ex.delta:.6f} se={ex.se:.6f} v_def={ex.v_def:.6f} v_atk={ex.v_atk:.6f}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        _write_rows(
            out / "metrics.csv", ["iteration", "delta_hat", "delta_se", "v_def", "v_atk"],
            [[0, repr(ex.delta), repr(ex.se), repr(ex.v_def), repr(ex.v_atk)]],
        )


def cmd_ident(args) -> None:
    if args.config:
        cfg = load_config(args.config)
        n_obs, nodes = cfg.obs_space_size, cfg.graph.nodes
    elif args.obs_space:
        n_obs, nodes = args.obs_space, None
    else:
        raise UsageError("ident needs --config or --obs-space")
    records, summary = ingest_traces(args.traces, n_obs, nodes)
    model = estimate_observation_model(records, n_obs, args.smoothing, nodes)
    report = validate_mlr(model)
    print(f"records={summary.records} per_class={','.join(map(str, summary.per_class))}")
    for node, r in report.items():
        print(f"node={node} mlr={'pass' if r.passed else 'fail'} fraction={r.fraction_nonnegative:.6f} worst={r.worst_minor:.3e}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        write_model_csv(model, out / "model.csv")
        rows = []
        for k, node in enumerate(model.nodes):
            r = report[node]
            rows.append([node, int(r.passed), repr(r.fraction_nonnegative), repr(r.worst_minor),
                         *map(int, model.samples[k]), *map(int, model.usable[k])])
        _write_rows(
            out / "metrics.csv",
            ["node", "mlr_pass", "fraction_nonnegative", "worst_minor", "n_healthy", "n_discovered",
             "n_compromised", "usable_healthy", "usable_discovered", "usable_compromised"],
            rows,
        )


def cmd_cardinality(args) -> None:
    n_def = args.defender_actions or args.zones + 2
    S, O, AD, AA = cardinalities(args.nodes, args.zones, args.obs, n_def, args.attacker_actions)
    print(f"|S|={S}")
    print(f"|O|={O}")
    print(f"|A_D|={AD}")
    print(f"|A_A|={AA}")
    out = _out(args)
    if out is not None:
        write_manifest(out, args)
        _write_rows(out / "metrics.csv", ["nodes", "zones", "S", "O", "A_D", "A_A"], [[args.nodes, args.zones, S, O, AD, AA]])


COMMANDS = {
    "simulate": cmd_simulate,
    "br-defender": cmd_br_defender,
    "br-attacker": cmd_br_attacker,
    "dfsp": cmd_dfsp,
    "exploitability": cmd_exploitability,
    "ident": cmd_ident,
    "cardinality": cmd_cardinality,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.print_usage(sys.stderr)
        print("irgame: error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"irgame: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        msg = str(exc) if "not found" in str(exc) else f"file not found: {exc.filename}"
        print(f"irgame: {msg}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"irgame: validation error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
