"""Command line entry point: plan, simulate, fuzzy-eval, validate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .clearance import DEFAULT_RULES, ObstacleObservation, OwnshipState
from .ocp import solve
from .replanner import ActiveSet, InitialSolveError, run, zones_for
from .scenario import (
    ScenarioError,
    activation_row,
    format_activation_rows,
    load_scenario,
    validate,
    write_solution_trajectory,
    write_trace,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SOLVER = 2
EXIT_USAGE = 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fuzzy-takeoff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_args(p):
        p.add_argument("scenario_path", nargs="?", metavar="SCENARIO")
        p.add_argument("--scenario", dest="scenario_flag", metavar="PATH")

    plan = sub.add_parser("plan", help="single trajectory solve from the scenario start")
    scenario_args(plan)
    plan.add_argument("--out", type=Path, default=Path("."))
    plan.add_argument("--w-obstacle", type=float)

    sim = sub.add_parser("simulate", help="receding-horizon run with fuzzy gating")
    scenario_args(sim)
    sim.add_argument("--out", type=Path, default=Path("."))
    sim.add_argument("--w-obstacle", type=float)
    sim.add_argument("--force-resolve-every", type=int, default=0, metavar="N")
    sim.add_argument("--max-ticks", type=int, metavar="N")
    sim.add_argument("--seed", type=int, help="reserved; runs are deterministic")

    val = sub.add_parser("validate", help="check a scenario file")
    scenario_args(val)

    fe = sub.add_parser("fuzzy-eval", help="clearance decision for one obstacle")
    fe.add_argument("--type", required=True, choices=["air_vehicle", "bird"])
    fe.add_argument("--size", required=True, type=float)
    fe.add_argument("--id", type=int, default=0)
    fe.add_argument("--d", type=float, help="distance, m")
    fe.add_argument("--cr", type=float, help="closing rate, m/s (negative when closing)")
    fe.add_argument("--position", type=_vec3, metavar="X,Y,Z")
    fe.add_argument("--velocity", type=_vec3, metavar="VX,VY,VZ", default=(0.0, 0.0, 0.0))
    fe.add_argument("--own-position", type=_vec3, metavar="X,Y,Z", default=(0.0, 0.0, 0.0))
    fe.add_argument("--own-velocity", type=_vec3, metavar="VX,VY,VZ", default=(0.0, 0.0, 0.0))
    fe.add_argument("--scenario", dest="scenario_flag", metavar="PATH", help="take membership overrides from here")
    return parser


def _scenario_path(parser, args) -> str:
    path = args.scenario_flag or args.scenario_path
    if args.scenario_flag and args.scenario_path and args.scenario_flag != args.scenario_path:
        parser.error("give the scenario once, positionally or with --scenario")
    if not path:
        parser.error("a scenario path is required")
    return path


def _load(path):
    """Parsed and validated scenario, or None after reporting problems."""
    try:
        scenario = load_scenario(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return None
    except ScenarioError as exc:
        for problem in exc.problems:
            print(problem, file=sys.stderr)
        return None
    violations = validate(scenario)
    for v in violations:
        print(v, file=sys.stderr)
    return None if violations else scenario


def _cmd_validate(parser, args) -> int:
    scenario = _load(_scenario_path(parser, args))
    if scenario is None:
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


def _cmd_plan(parser, args) -> int:
    scenario = _load(_scenario_path(parser, args))
    if scenario is None:
        return EXIT_INVALID
    overrides = {} if args.w_obstacle is None else {"w_obstacle": args.w_obstacle}
    config = scenario.sim_config(**overrides)
    mission = scenario.mission()
    decisions = [config.rules.decide(o, mission.ownship) for o in mission.obstacles]
    zones = zones_for(ActiveSet.from_decisions(decisions), mission.obstacles)
    solution = solve(config.problem(mission.ownship.as_array(), mission.goal, zones), max_iter=config.max_iter)
    if solution.failed:
        print(f"solver failed: {solution.message}", file=sys.stderr)
        return EXIT_SOLVER
    for key, value in solution.cost.as_dict().items():
        print(f"{key},{value!r}")
    print(f"t_final,{solution.t_final!r}")
    print(f"converged,{int(solution.converged)}")
    print(f"iterations,{solution.iterations}")
    print(f"active_constraints,{' '.join(str(z.obstacle_id) for z in zones)}")
    path = write_solution_trajectory(args.out / "trajectory.csv", solution)
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_simulate(parser, args) -> int:
    scenario = _load(_scenario_path(parser, args))
    if scenario is None:
        return EXIT_INVALID
    if args.force_resolve_every < 0:
        parser.error("--force-resolve-every must be nonnegative")
    if args.max_ticks is not None and args.max_ticks < 1:
        parser.error("--max-ticks must be at least 1")
    overrides = {"forced_resolve_every": args.force_resolve_every}
    if args.w_obstacle is not None:
        overrides["w_obstacle"] = args.w_obstacle
    if args.max_ticks is not None:
        overrides["max_ticks"] = args.max_ticks
    try:
        trace = run(scenario.mission(), scenario.sim_config(**overrides))
    except InitialSolveError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_SOLVER
    paths = write_trace(args.out, trace)
    degraded = sum(r.degraded for r in trace.records)
    print(f"ticks,{len(trace.records)}")
    print(f"solves,{trace.n_solves}")
    print(f"degraded_ticks,{degraded}")
    print(f"final_goal_miss,{trace.final_miss!r}")
    for path in paths.values():
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_fuzzy_eval(parser, args) -> int:
    rules = DEFAULT_RULES
    if args.scenario_flag:
        scenario = _load(args.scenario_flag)
        if scenario is None:
            return EXIT_INVALID
        rules = scenario.rules()
    if not args.size > 0:
        parser.error("--size must be positive")
    if args.d is not None or args.cr is not None:
        if args.d is None or args.cr is None or args.position is not None:
            parser.error("give --d and --cr together, or --position (with velocities) instead")
        if args.d < 0:
            parser.error("--d must be nonnegative")
        decision = rules.decide_geometry(args.id, args.type, args.size, args.d, args.cr)
    elif args.position is not None:
        try:
            obs = ObstacleObservation(args.id, args.type, args.size, args.position, args.velocity)
        except ValueError as exc:
            parser.error(str(exc))
        own = OwnshipState(args.own_position, args.own_velocity)
        decision = rules.decide(obs, own)
    else:
        parser.error("need --d and --cr, or --position")
    sys.stdout.write(format_activation_rows([activation_row(0, decision)]))
    return EXIT_OK


_COMMANDS = {
    "plan": _cmd_plan,
    "simulate": _cmd_simulate,
    "validate": _cmd_validate,
    "fuzzy-eval": _cmd_fuzzy_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](parser, args)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:
        # --help exits through argparse with status 0
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
