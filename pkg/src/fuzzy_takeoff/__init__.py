"""Fuzzy-gated minimum-time take-off planning with soft keep-out zones."""

from .clearance import (
    DEFAULT_RULES,
    SEPARATION,
    ClearanceDecision,
    ClearanceRules,
    ObstacleObservation,
    ObstacleType,
    OwnshipState,
    SeparationConstants,
    activation_subsystem,
    closing_rate,
    decide,
    distance,
    flock_radius_bound,
    radius_subsystem,
    relative_position,
    urgency_subsystem,
)
from .fuzzy import (
    Consequent,
    InputVariable,
    MembershipFunction,
    RuleBaseHoleError,
    TskRule,
    TskSystem,
    evaluate_mf,
    infer,
)
from .ocp import (
    AircraftModel,
    CostBreakdown,
    OcpProblem,
    OcpSolution,
    ZoneConstraint,
    evaluate_cost,
    gradient,
    integrate,
    min_separation,
    solve,
)
from .replanner import ActiveSet, Mission, SimConfig, SimTrace, needs_resolve, propagate_obstacles, run, step
from .scenario import ScenarioError, ScenarioFile, Violation, emit, parse_scenario, validate

__all__ = [name for name in dir() if not name.startswith("_")]
