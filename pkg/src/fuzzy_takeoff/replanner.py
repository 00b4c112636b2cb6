"""Receding-horizon loop that re-solves the trajectory only when the fuzzy
activation layer changes the set of active keep-out zones."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .clearance import DEFAULT_RULES, ClearanceDecision, ClearanceRules, ObstacleObservation, OwnshipState
from .ocp import (
    AircraftModel,
    CostBreakdown,
    OcpProblem,
    OcpSolution,
    ZoneConstraint,
    pack,
    solve,
)


class InitialSolveError(RuntimeError):
    """The t = 0 solve failed, so there is no plan to fly."""


@dataclass(frozen=True)
class SimConfig:
    tick_interval: float = 1.0
    radius_change_tolerance: float = 0.01
    forced_resolve_every: int = 0
    max_ticks: int = 200
    model: AircraftModel = field(default_factory=AircraftModel)
    w_obstacle: float = 1e3
    w_terminal: float = 1e2
    w_bounds: float = 1e2
    # far below the solver default so a re-plan in the last second stays reachable
    t_min: float = 0.01
    t_max: float = 600.0
    n_control_nodes: int = 25
    n_integration_steps: int = 100
    max_iter: int = 500
    rules: ClearanceRules = DEFAULT_RULES

    def __post_init__(self):
        if not self.tick_interval > 0:
            raise ValueError("tick_interval must be positive")
        if self.radius_change_tolerance < 0:
            raise ValueError("radius_change_tolerance must be nonnegative")
        if self.forced_resolve_every < 0:
            raise ValueError("forced_resolve_every must be nonnegative")
        if self.max_ticks < 1:
            raise ValueError("max_ticks must be at least 1")

    def problem(self, initial_state, goal, constraints: Sequence[ZoneConstraint] = ()) -> OcpProblem:
        return OcpProblem(
            initial_state=initial_state,
            goal=goal,
            constraints=tuple(constraints),
            model=self.model,
            w_obstacle=self.w_obstacle,
            w_terminal=self.w_terminal,
            w_bounds=self.w_bounds,
            t_min=self.t_min,
            t_max=self.t_max,
            n_control_nodes=self.n_control_nodes,
            n_integration_steps=self.n_integration_steps,
        )


@dataclass(frozen=True)
class ActiveSet:
    """Obstacle id -> constraint radius for every visible, activated obstacle."""

    radii: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "radii", MappingProxyType(dict(self.radii)))

    @classmethod
    def from_decisions(cls, decisions: Sequence[ClearanceDecision]) -> "ActiveSet":
        return cls({d.obstacle_id: d.radius for d in decisions if d.active and d.visible})

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(self.radii)

    def __len__(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class Mission:
    ownship: OwnshipState
    goal: np.ndarray
    obstacles: tuple[ObstacleObservation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(3))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))


@dataclass(frozen=True)
class TickRecord:
    tick: int
    time: float
    state: np.ndarray
    obstacles: tuple[ObstacleObservation, ...]
    decisions: tuple[ClearanceDecision, ...]
    cost: CostBreakdown
    resolved: bool
    solver_wall_time: float
    gate: bool
    constraint_ids: tuple[int, ...]
    degraded: bool = False
    arrived: bool = False
    iterations: int = 0


@dataclass
class SimTrace:
    records: list[TickRecord] = field(default_factory=list)
    # (start time, plan) for every plan that was flown, in order
    plans: list[tuple[float, OcpSolution]] = field(default_factory=list)
    goal: np.ndarray | None = None

    @property
    def n_solves(self) -> int:
        return sum(r.resolved for r in self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records])

    @property
    def final_miss(self) -> float:
        return float(np.linalg.norm(self.records[-1].state[:3] - self.goal))

    def realized_states(self, times) -> np.ndarray:
        """Ownship states at arbitrary times along the flown plans."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        starts = np.array([s for s, _ in self.plans])
        out = np.empty((times.size, 6))
        for i, t in enumerate(times):
            j = max(int(np.searchsorted(starts, t, side="right")) - 1, 0)
            start, plan = self.plans[j]
            out[i] = plan_state(plan, t - start)[0]
        return out


def propagate_obstacles(obstacles: Sequence[ObstacleObservation], dt: float) -> list[ObstacleObservation]:
    """Constant-velocity update of every obstacle position."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return [o.moved(dt) for o in obstacles]


def needs_resolve(previous: ActiveSet, current: ActiveSet, config: SimConfig, tick_index: int) -> bool:
    if previous.ids != current.ids:
        return True
    tol = config.radius_change_tolerance
    for oid, r_prev in previous.radii.items():
        if abs(current.radii[oid] - r_prev) > tol * abs(r_prev):
            return True
    every = config.forced_resolve_every
    return every > 0 and tick_index % every == 0


def plan_state(plan: OcpSolution, elapsed: float) -> tuple[np.ndarray, bool]:
    """State ``elapsed`` seconds into a plan, and whether the plan is finished.

    Positions follow the cubic Hermite interpolant of the sampled positions
    and velocities, which is exact for unclamped piecewise-linear control.
    Past the final time the state stays at the plan's last sample.
    """
    if elapsed >= plan.t_final:
        return plan.states[-1].copy(), True
    spline = CubicHermiteSpline(plan.times, plan.states[:, :3], plan.states[:, 3:])
    t = max(elapsed, 0.0)
    return np.concatenate([spline(t), spline(t, 1)]), False


def shifted_warm_start(plan: OcpSolution, elapsed: float, t_min: float) -> np.ndarray:
    """Previous decision vector re-timed to start ``elapsed`` seconds later."""
    m = plan.control_nodes.shape[0]
    old_times = np.linspace(0.0, plan.t_final, m)
    tf = max(plan.t_final - elapsed, t_min)
    new_times = elapsed + np.linspace(0.0, tf, m)
    nodes = np.column_stack(
        [np.interp(new_times, old_times, plan.control_nodes[:, k]) for k in range(3)]
    )
    return pack(nodes, tf)


def zones_for(active: ActiveSet, obstacles: Sequence[ObstacleObservation]) -> tuple[ZoneConstraint, ...]:
    by_id = {o.id: o for o in obstacles}
    return tuple(
        ZoneConstraint(by_id[oid].position, by_id[oid].velocity, radius, obstacle_id=oid)
        for oid, radius in sorted(active.radii.items())
    )


@dataclass
class LoopState:
    tick: int
    time: float
    state: np.ndarray
    obstacles: list[ObstacleObservation]
    plan: OcpSolution
    plan_start: float
    planned_for: ActiveSet
    arrived: bool = False


def step(
    loop: LoopState, goal: np.ndarray, config: SimConfig, trace: SimTrace | None = None
) -> TickRecord:
    """Advance one tick: fly the current plan, move obstacles, run the fuzzy
    layer and re-solve when the gate opens. Mutates ``loop``."""
    loop.tick += 1
    loop.time = loop.tick * config.tick_interval
    elapsed = loop.time - loop.plan_start
    loop.state, finished = plan_state(loop.plan, elapsed)
    loop.arrived = loop.arrived or finished
    loop.obstacles = propagate_obstacles(loop.obstacles, config.tick_interval)

    own = OwnshipState(loop.state[:3], loop.state[3:])
    decisions = tuple(config.rules.decide(o, own) for o in loop.obstacles)
    current = ActiveSet.from_decisions(decisions)
    gate = needs_resolve(loop.planned_for, current, config, loop.tick)

    resolved = degraded = False
    wall = 0.0
    iterations = 0
    constraint_ids: tuple[int, ...] = ()
    if gate and not loop.arrived:
        zones = zones_for(current, loop.obstacles)
        constraint_ids = tuple(z.obstacle_id for z in zones)
        problem = config.problem(loop.state, goal, zones)
        warm = shifted_warm_start(loop.plan, elapsed, config.t_min)
        solution = solve(problem, warm_start=warm, max_iter=config.max_iter)
        wall = solution.wall_time
        iterations = solution.iterations
        if solution.failed:
            # keep flying the old plan; the unchanged planned_for retries next tick
            degraded = True
        else:
            resolved = True
            loop.plan = solution
            loop.plan_start = loop.time
            loop.planned_for = current
            if trace is not None:
                trace.plans.append((loop.time, solution))

    return TickRecord(
        tick=loop.tick,
        time=loop.time,
        state=loop.state.copy(),
        obstacles=tuple(loop.obstacles),
        decisions=decisions,
        cost=loop.plan.cost,
        resolved=resolved,
        solver_wall_time=wall,
        gate=gate,
        constraint_ids=constraint_ids,
        degraded=degraded,
        arrived=loop.arrived,
        iterations=iterations,
    )


def run(mission: Mission, config: SimConfig = SimConfig()) -> SimTrace:
    """Initial solve at t = 0 followed by ``max_ticks - 1`` steps.

    Tick 0 carries the initial solve, so the trace holds exactly
    ``max_ticks`` records.
    """
    state = mission.ownship.as_array()
    obstacles = list(mission.obstacles)
    decisions = tuple(config.rules.decide(o, mission.ownship) for o in obstacles)
    active = ActiveSet.from_decisions(decisions)
    zones = zones_for(active, obstacles)
    first = solve(config.problem(state, mission.goal, zones), max_iter=config.max_iter)
    if first.failed:
        raise InitialSolveError(f"initial solve failed: {first.message}")

    trace = SimTrace(plans=[(0.0, first)], goal=mission.goal.copy())
    trace.records.append(
        TickRecord(
            tick=0,
            time=0.0,
            state=state.copy(),
            obstacles=tuple(obstacles),
            decisions=decisions,
            cost=first.cost,
            resolved=True,
            solver_wall_time=first.wall_time,
            gate=True,
            constraint_ids=tuple(z.obstacle_id for z in zones),
            iterations=first.iterations,
        )
    )
    loop = LoopState(0, 0.0, state, obstacles, first, 0.0, active)
    for _ in range(config.max_ticks - 1):
        trace.records.append(step(loop, mission.goal, config, trace))
    return trace
