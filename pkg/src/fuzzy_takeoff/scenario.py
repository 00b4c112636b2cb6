"""Scenario files (strict JSON), their validation rules and the CSV trace
tables written by the command line tool."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clearance import DEFAULT_RULES, SEPARATION, ClearanceDecision, ClearanceRules, ObstacleObservation, OwnshipState
from .fuzzy import FuzzyConfigError, MembershipFunction, find_holes
from .ocp import AircraftModel, OcpSolution
from .replanner import Mission, SimConfig, SimTrace

Vec3 = tuple[float, float, float]

_STRICT = ConfigDict(extra="forbid", strict=True, allow_inf_nan=False, frozen=True)


class OwnshipSpec(BaseModel):
    model_config = _STRICT
    position: Vec3
    velocity: Vec3


class ObstacleSpec(BaseModel):
    model_config = _STRICT
    id: int
    type: Literal["air_vehicle", "bird"]
    size: float = Field(gt=0)
    position: Vec3
    velocity: Vec3


class MfSpec(BaseModel):
    model_config = _STRICT
    shape: Literal["triangle", "trapezoid", "crisp_below", "crisp_at_or_above"]
    params: tuple[float, ...]

    def build(self) -> MembershipFunction:
        return MembershipFunction(self.shape, self.params)


MfOverrides = dict[str, dict[str, dict[str, MfSpec]]]


class ConfigSpec(BaseModel):
    model_config = _STRICT
    tick_interval: float = 1.0
    max_ticks: int = 200
    w_obstacle: float = 1e3
    w_terminal: float = 1e2
    n_control_nodes: int = 25
    n_integration_steps: int = 100
    t_min: float = SimConfig.t_min
    t_max: float = 600.0
    mf_overrides: MfOverrides = Field(default_factory=dict)


class ScenarioFile(BaseModel):
    model_config = _STRICT
    ownship: OwnshipSpec
    goal: Vec3
    obstacles: tuple[ObstacleSpec, ...]
    # defaults to the ownship start, i.e. lift-off at the runway end
    runway_end: Vec3 | None = None
    config: ConfigSpec = Field(default_factory=ConfigSpec)

    @property
    def runway_end_position(self) -> np.ndarray:
        return np.array(self.runway_end if self.runway_end is not None else self.ownship.position)

    def rules(self) -> ClearanceRules:
        overrides = {
            sub: {var: {label: mf.build() for label, mf in labels.items()} for var, labels in vars_.items()}
            for sub, vars_ in self.config.mf_overrides.items()
        }
        return DEFAULT_RULES.with_overrides(overrides) if overrides else DEFAULT_RULES

    def mission(self) -> Mission:
        own = OwnshipState(self.ownship.position, self.ownship.velocity)
        obstacles = tuple(
            ObstacleObservation(o.id, o.type, o.size, o.position, o.velocity) for o in self.obstacles
        )
        return Mission(own, self.goal, obstacles)

    def sim_config(self, **overrides) -> SimConfig:
        c = self.config
        kw = dict(
            tick_interval=c.tick_interval,
            max_ticks=c.max_ticks,
            w_obstacle=c.w_obstacle,
            w_terminal=c.w_terminal,
            n_control_nodes=c.n_control_nodes,
            n_integration_steps=c.n_integration_steps,
            t_min=c.t_min,
            t_max=c.t_max,
            rules=self.rules(),
        )
        kw.update(overrides)
        return SimConfig(**kw)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ScenarioError(ValueError):
    """Scenario text could not be turned into a valid ScenarioFile."""

    def __init__(self, problems: Sequence[str | Violation]):
        self.problems = list(problems)
        super().__init__("; ".join(str(p) for p in self.problems))


def _format_pydantic(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "missing":
            out.append(f"missing required key {path!r}")
        elif err["type"] == "extra_forbidden":
            out.append(f"unknown key {path!r}")
        else:
            out.append(f"{path}: {err['msg']}")
    return out


# violations that make the file itself ill-formed, as opposed to a legal
# file describing an unsafe or out-of-envelope situation
_STRUCTURAL = {"DUPLICATE_ID", "BIRD_SIZE", "MF_OVERRIDE"}


def parse_scenario(text: str | bytes) -> ScenarioFile:
    """Strict parse: unknown keys, missing keys, type mismatches, duplicate
    obstacle ids, out-of-bound bird sizes and malformed membership overrides
    all raise ScenarioError."""
    try:
        scenario = ScenarioFile.model_validate_json(text)
    except ValidationError as exc:
        raise ScenarioError(_format_pydantic(exc)) from None
    structural = [v for v in validate(scenario) if v.code in _STRUCTURAL]
    if structural:
        raise ScenarioError(structural)
    return scenario


def load_scenario(path: str | Path) -> ScenarioFile:
    return parse_scenario(Path(path).read_bytes())


def emit(scenario: ScenarioFile) -> str:
    """Canonical JSON with every default written out."""
    return scenario.model_dump_json(indent=2)


def validate(scenario: ScenarioFile) -> list[Violation]:
    out: list[Violation] = []
    seen: set[int] = set()
    for o in scenario.obstacles:
        if o.id in seen:
            out.append(Violation("DUPLICATE_ID", f"obstacle id {o.id} appears more than once"))
        seen.add(o.id)

    lo, hi = SEPARATION.bird_size_min, SEPARATION.bird_size_max
    runway = scenario.runway_end_position
    for o in scenario.obstacles:
        if o.type == "bird" and not lo <= o.size <= hi:
            out.append(
                Violation("BIRD_SIZE", f"bird {o.id} size {o.size} m outside [{lo:g}, {hi:g}] m")
            )
        gap = float(np.linalg.norm(np.array(o.position) - runway))
        if gap < SEPARATION.runway_end_clearance:
            out.append(
                Violation(
                    "RUNWAY_CLEARANCE",
                    f"obstacle {o.id} is {gap:.1f} m from the runway end "
                    f"(minimum {SEPARATION.runway_end_clearance:g} m)",
                )
            )

    model = AircraftModel()
    speed = math.hypot(*scenario.ownship.velocity)
    if speed > model.v_max:
        out.append(
            Violation("SPEED_BOUND", f"ownship speed {speed:.1f} m/s exceeds v_max {model.v_max:g} m/s")
        )

    c = scenario.config
    if not c.tick_interval > 0:
        out.append(Violation("TICK_INTERVAL", f"tick_interval must be positive, got {c.tick_interval}"))
    if c.max_ticks < 1:
        out.append(Violation("MAX_TICKS", f"max_ticks must be at least 1, got {c.max_ticks}"))
    if min(c.w_obstacle, c.w_terminal) < 0:
        out.append(Violation("WEIGHT", "penalty weights must be nonnegative"))
    if c.n_control_nodes < 2 or c.n_integration_steps < c.n_control_nodes:
        out.append(
            Violation(
                "DISCRETIZATION",
                f"need n_control_nodes >= 2 and n_integration_steps >= n_control_nodes, "
                f"got {c.n_control_nodes} / {c.n_integration_steps}",
            )
        )
    if not 0 < c.t_min < c.t_max:
        out.append(Violation("TIME_BOUNDS", f"need 0 < t_min < t_max, got [{c.t_min}, {c.t_max}]"))

    if c.mf_overrides:
        try:
            rules = scenario.rules()
        except (FuzzyConfigError, ValueError) as exc:
            out.append(Violation("MF_OVERRIDE", str(exc)))
        else:
            for name, system in rules.systems.items():
                holes = find_holes(system, n=101)
                if holes:
                    out.append(
                        Violation(
                            "MF_COVERAGE",
                            f"{name} subsystem has {len(holes)} uncovered input pairs, e.g. {holes[0]}",
                        )
                    )
    return out


# --- trace tables -----------------------------------------------------------

TRAJECTORY_COLUMNS = ("t", "x", "y", "z", "vx", "vy", "vz")
COST_COLUMNS = (
    "tick", "time_cost", "obstacle_penalty", "terminal_penalty", "bounds_penalty",
    "total", "resolved", "solver_wall_time",
)
ACTIVATION_COLUMNS = (
    "tick", "obstacle_id", "distance", "closing_rate", "radius", "urgency",
    "activation_level", "active", "visible",
)


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # repr round-trips a double exactly
    return repr(float(value))


def _write(path: Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def activation_row(tick: int, d: ClearanceDecision) -> tuple:
    return (
        tick, d.obstacle_id, d.distance, d.closing_rate, d.radius, d.urgency,
        d.activation_level, d.active, d.visible,
    )


def format_activation_rows(rows: Sequence[tuple]) -> str:
    lines = [",".join(ACTIVATION_COLUMNS)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_solution_trajectory(path, solution: OcpSolution) -> Path:
    rows = (np.concatenate([[t], s]) for t, s in zip(solution.times, solution.states))
    return _write(path, TRAJECTORY_COLUMNS, rows)


def write_trace(out_dir, trace: SimTrace) -> dict[str, Path]:
    """trajectory.csv, cost.csv and activation.csv for a completed run."""
    out_dir = Path(out_dir)
    traj = _write(
        out_dir / "trajectory.csv",
        TRAJECTORY_COLUMNS,
        (np.concatenate([[r.time], r.state]) for r in trace.records),
    )
    cost = _write(
        out_dir / "cost.csv",
        COST_COLUMNS,
        (
            (
                r.tick, r.cost.time_cost, r.cost.obstacle_penalty, r.cost.terminal_penalty,
                r.cost.bounds_penalty, r.cost.total, r.resolved, r.solver_wall_time,
            )
            for r in trace.records
        ),
    )
    act = _write(
        out_dir / "activation.csv",
        ACTIVATION_COLUMNS,
        (activation_row(r.tick, d) for r in trace.records for d in r.decisions),
    )
    return {"trajectory": traj, "cost": cost, "activation": act}
