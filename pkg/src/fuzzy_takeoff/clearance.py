"""Obstacle clearance rule base.

Relative geometry between the ownship and each radar return feeds three
chained TSK subsystems: constraint radius from (type, size), urgency from
(distance, closing rate) and activation from (radius, urgency).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .fuzzy import Consequent, InputVariable, MembershipFunction, TskRule, TskSystem

trap = MembershipFunction.trapezoid
tri = MembershipFunction.triangle


@dataclass(frozen=True)
class SeparationConstants:
    horizontal_separation: float = 5556.0  # 3 NM
    radar_range: float = 6000.0
    runway_end_clearance: float = 1000.0
    vertical_sep_low: float = 300.0  # up to and including FL410
    vertical_sep_high: float = 600.0
    kepler_density: float = 0.7405
    radar_target_capacity: int = 1000
    radar_segregation: float = 50.0
    bird_size_min: float = 1.0
    bird_size_max: float = 277.0


SEPARATION = SeparationConstants()

ACTIVATION_THRESHOLD = 0.5


class ObstacleType(str, Enum):
    AIR_VEHICLE = "air_vehicle"
    BIRD = "bird"

    @property
    def code(self) -> float:
        """Crisp value fed to the type input of the radius subsystem."""
        return 0.0 if self is ObstacleType.AIR_VEHICLE else 1.0


def _vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObstacleObservation:
    id: int
    type: ObstacleType
    size: float
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "type", ObstacleType(self.type))
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "velocity", _vec3(self.velocity))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError(f"obstacle {self.id}: non-finite position or velocity")
        if not self.size > 0:
            raise ValueError(f"obstacle {self.id}: size must be positive, got {self.size}")

    def moved(self, dt: float) -> "ObstacleObservation":
        return ObstacleObservation(
            self.id, self.type, self.size, self.position + self.velocity * dt, self.velocity
        )


@dataclass(frozen=True)
class OwnshipState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "velocity", _vec3(self.velocity))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("ownship state must be finite")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class ClearanceDecision:
    obstacle_id: int
    distance: float
    closing_rate: float
    radius: float
    urgency: float
    activation_level: float
    active: bool
    visible: bool

    def row(self) -> tuple:
        return (
            self.obstacle_id,
            self.distance,
            self.closing_rate,
            self.radius,
            self.urgency,
            self.activation_level,
            self.active,
            self.visible,
        )


class DegenerateGeometryError(ZeroDivisionError):
    """Closing rate requested at zero range."""


def relative_position(own_position, obstacle_position) -> np.ndarray:
    return np.asarray(obstacle_position, dtype=float) - np.asarray(own_position, dtype=float)


def relative_velocity(own_velocity, obstacle_velocity) -> np.ndarray:
    return np.asarray(obstacle_velocity, dtype=float) - np.asarray(own_velocity, dtype=float)


def distance(rel_position) -> float:
    x, y, z = (float(c) for c in rel_position)
    return math.sqrt(x * x + y * y + z * z)


def closing_rate(rel_position, rel_velocity, dist: float) -> float:
    """Range rate; negative while the object is getting closer."""
    if dist == 0.0:
        raise DegenerateGeometryError("closing rate undefined at zero distance")
    rp = [float(c) for c in rel_position]
    rv = [float(c) for c in rel_velocity]
    return (rp[0] * rv[0] + rp[1] * rv[1] + rp[2] * rv[2]) / dist


def flock_radius_bound(n_targets: int, segregation: float, density: float) -> float:
    """Radius of the smallest ball holding ``n_targets`` disjoint birds.

    Each bird occupies a ball of radius ``segregation / 2``; the flock packs
    them at volume fraction ``density``.
    """
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    if not segregation > 0:
        raise ValueError("segregation must be positive")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    return (segregation / 2.0) * (n_targets / density) ** (1.0 / 3.0)


# --- shipped membership functions, raw units -------------------------------

TYPE_TERMS = {
    "air_vehicle": MembershipFunction.crisp_below(0.5),
    "bird": MembershipFunction.crisp_at_or_above(0.5),
}
SIZE_TERMS = {
    "Small": trap(0, 0, 25, 75),
    "Medium": tri(25, 100, 175),
    "Large": trap(100, 200, 300, 300),
    # the air-vehicle rule applies whatever the size
    "Any": trap(0, 0, 300, 300),
}
DISTANCE_TERMS = {
    "Small": trap(0, 0, 500, 1500),
    "Medium": tri(500, 2000, 4000),
    "Large": trap(2000, 4500, 6000, 6000),
}
CLOSING_RATE_TERMS = {
    "ClosingFast": trap(-300, -300, -150, -90),
    "ClosingMedium": tri(-120, -75, -30),
    "ClosingSlow": tri(-60, -25, 5),
    "Further": trap(0, 20, 300, 300),
}
RADIUS_TERMS = {
    "Small": trap(0, 0, 200, 600),
    "Medium": tri(300, 1000, 3000),
    "Large": trap(1500, 4000, 6000, 6000),
}
URGENCY_TERMS = {
    "Low": trap(0, 0, 1, 2),
    "Medium": tri(1, 2.5, 4),
    "High": trap(2.5, 4, 5, 5),
}

C = Consequent

RADIUS_RULES = (
    TskRule("air_vehicle", "Any", C(c0=5556.0)),
    TskRule("bird", "Small", C(c0=100.0, c2=2.5)),
    TskRule("bird", "Medium", C(c0=200.0, c2=2.5)),
    TskRule("bird", "Large", C(c0=300.0, c2=2.5)),
)

# distance in km, closing rate in hundreds of m/s
URGENCY_RULES = (
    TskRule("Large", "Further", C(c0=0.0)),
    TskRule("Large", "ClosingSlow", C(c0=0.5)),
    TskRule("Large", "ClosingMedium", C(c0=0.5)),
    TskRule("Large", "ClosingFast", C(c0=2.0)),
    TskRule("Medium", "Further", C(c1=0.5)),
    TskRule("Medium", "ClosingSlow", C(c0=2.0, c1=0.5)),
    TskRule("Medium", "ClosingMedium", C(c0=3.0, c1=0.5)),
    TskRule("Medium", "ClosingFast", C(c0=4.0, c1=0.5)),
    TskRule("Small", "Further", C(c0=1.5, cr=0.1)),
    TskRule("Small", "ClosingSlow", C(c0=4.0, cr=0.1, c2=-2.5)),
    TskRule("Small", "ClosingMedium", C(c0=4.5, cr=0.1, c2=-3.0)),
    TskRule("Small", "ClosingFast", C(c0=5.0, cr=0.1, c2=-5.0)),
)

ACTIVATION_RULES = (
    TskRule("Small", "Low", C(0.0)),
    TskRule("Small", "Medium", C(0.0)),
    TskRule("Small", "High", C(1.0)),
    TskRule("Medium", "Low", C(0.0)),
    TskRule("Medium", "Medium", C(1.0)),
    TskRule("Medium", "High", C(1.0)),
    TskRule("Large", "Low", C(0.0)),
    TskRule("Large", "Medium", C(1.0)),
    TskRule("Large", "High", C(1.0)),
)

RADIUS_SYSTEM = TskSystem(
    "radius",
    (InputVariable("type", (0.0, 1.0), TYPE_TERMS), InputVariable("size", (0.0, 300.0), SIZE_TERMS)),
    RADIUS_RULES,
    output_range=(0.0, 6000.0),
)
URGENCY_SYSTEM = TskSystem(
    "urgency",
    (
        InputVariable("distance", (0.0, 6000.0), DISTANCE_TERMS),
        InputVariable("closing_rate", (-300.0, 300.0), CLOSING_RATE_TERMS),
    ),
    URGENCY_RULES,
    output_range=(0.0, 5.0),
    consequent_scale=(1000.0, 100.0),
)
ACTIVATION_SYSTEM = TskSystem(
    "activation",
    (InputVariable("radius", (0.0, 6000.0), RADIUS_TERMS), InputVariable("urgency", (0.0, 5.0), URGENCY_TERMS)),
    ACTIVATION_RULES,
    output_range=(0.0, 1.0),
)


@dataclass(frozen=True)
class ClearanceRules:
    """The three chained subsystems plus the regulatory constants."""

    radius_system: TskSystem = RADIUS_SYSTEM
    urgency_system: TskSystem = URGENCY_SYSTEM
    activation_system: TskSystem = ACTIVATION_SYSTEM
    constants: SeparationConstants = SEPARATION
    threshold: float = ACTIVATION_THRESHOLD

    @property
    def systems(self) -> Mapping[str, TskSystem]:
        return MappingProxyType(
            {
                "radius": self.radius_system,
                "urgency": self.urgency_system,
                "activation": self.activation_system,
            }
        )

    def with_overrides(self, overrides: Mapping[str, Mapping[str, Mapping[str, MembershipFunction]]]) -> "ClearanceRules":
        """Replace membership functions, keyed subsystem -> variable -> label."""
        unknown = set(overrides) - set(self.systems)
        if unknown:
            raise ValueError(f"unknown subsystems in overrides: {sorted(unknown)}")
        systems = {
            name: sys.with_terms({k: dict(v) for k, v in overrides.get(name, {}).items()})
            for name, sys in self.systems.items()
        }
        return ClearanceRules(
            systems["radius"], systems["urgency"], systems["activation"], self.constants, self.threshold
        )

    def radius(self, obstacle_type: ObstacleType | str, size: float) -> float:
        return self.radius_system.infer(ObstacleType(obstacle_type).code, size)

    def urgency(self, dist: float, rate: float) -> float:
        return self.urgency_system.infer(dist, rate)

    def activation(self, radius: float, urgency: float) -> float:
        return self.activation_system.infer(radius, urgency)

    def decide_geometry(
        self, obstacle_id: int, obstacle_type: ObstacleType | str, size: float, dist: float, rate: float
    ) -> ClearanceDecision:
        """Run the subsystem chain once distance and closing rate are known."""
        radius = self.radius(obstacle_type, size)
        urgency = self.urgency(dist, rate)
        level = self.activation(radius, urgency)
        visible = dist <= self.constants.radar_range
        return ClearanceDecision(
            obstacle_id=obstacle_id,
            distance=dist,
            closing_rate=rate,
            radius=radius,
            urgency=urgency,
            activation_level=level,
            active=bool(level >= self.threshold and visible),
            visible=bool(visible),
        )

    def decide(self, obs: ObstacleObservation, own: OwnshipState) -> ClearanceDecision:
        rel_p = relative_position(own.position, obs.position)
        rel_v = relative_velocity(own.velocity, obs.velocity)
        dist = distance(rel_p)
        try:
            rate = closing_rate(rel_p, rel_v, dist)
        except DegenerateGeometryError:
            rate = -distance(rel_v)
        return self.decide_geometry(obs.id, obs.type, obs.size, dist, rate)


DEFAULT_RULES = ClearanceRules()


def radius_subsystem(obstacle_type: ObstacleType | str, size: float) -> float:
    return DEFAULT_RULES.radius(obstacle_type, size)


def urgency_subsystem(dist: float, rate: float) -> float:
    return DEFAULT_RULES.urgency(dist, rate)


def activation_subsystem(radius: float, urgency: float) -> float:
    return DEFAULT_RULES.activation(radius, urgency)


def decide(obs: ObstacleObservation, own: OwnshipState, rules: ClearanceRules = DEFAULT_RULES) -> ClearanceDecision:
    return rules.decide(obs, own)
