"""Two-input Takagi-Sugeno-Kang inference.

Membership functions are piecewise linear (or crisp steps), rules fire with
the product t-norm and the crisp output is the firing-strength weighted mean
of the rule consequents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("triangle", "trapezoid", "crisp_below", "crisp_at_or_above")

# smallest first input fed to a reciprocal consequent term
RECIPROCAL_FLOOR = 1e-3


class FuzzyConfigError(ValueError):
    """Raised when a membership function or system is malformed."""


class RuleBaseHoleError(RuntimeError):
    """No rule fired for an in-domain input pair."""

    def __init__(self, x1: float, x2: float, system: str = ""):
        self.x1 = x1
        self.x2 = x2
        self.system = system
        super().__init__(f"no rule fires in system {system!r} at ({x1!r}, {x2!r})")


@dataclass(frozen=True)
class MembershipFunction:
    """A labelled membership function.

    ``params`` holds (a, b, c) for a triangle, (a, b, c, d) for a trapezoid
    and a single threshold for the crisp step shapes.
    """

    shape: str
    params: tuple[float, ...]

    def __post_init__(self):
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        expected = {"triangle": 3, "trapezoid": 4, "crisp_below": 1, "crisp_at_or_above": 1}
        if self.shape not in expected:
            raise FuzzyConfigError(f"unknown membership shape {self.shape!r}")
        if len(params) != expected[self.shape]:
            raise FuzzyConfigError(
                f"{self.shape} takes {expected[self.shape]} parameters, got {len(params)}"
            )
        if not all(math.isfinite(p) for p in params):
            raise FuzzyConfigError(f"non-finite parameter in {self.shape}{params}")
        if any(lo > hi for lo, hi in zip(params, params[1:])):
            raise FuzzyConfigError(f"{self.shape} parameters must be nondecreasing: {params}")

    @classmethod
    def triangle(cls, a: float, b: float, c: float) -> "MembershipFunction":
        return cls("triangle", (a, b, c))

    @classmethod
    def trapezoid(cls, a: float, b: float, c: float, d: float) -> "MembershipFunction":
        return cls("trapezoid", (a, b, c, d))

    @classmethod
    def crisp_below(cls, t: float) -> "MembershipFunction":
        return cls("crisp_below", (t,))

    @classmethod
    def crisp_at_or_above(cls, t: float) -> "MembershipFunction":
        return cls("crisp_at_or_above", (t,))

    def __call__(self, x: float) -> float:
        return evaluate_mf(self, x)


def _trapezoid(x: float, a: float, b: float, c: float, d: float) -> float:
    if b <= x <= c:
        return 1.0
    if a < x < b:
        return (x - a) / (b - a)
    if c < x < d:
        return (d - x) / (d - c)
    return 0.0


def evaluate_mf(mf: MembershipFunction, x: float) -> float:
    """Degree of membership of ``x``, always in [0, 1].

    Degenerate edges (a == b or c == d) behave as vertical shoulders, so
    ``trapezoid(0, 0, 25, 75)`` is 1 at x = 0.
    """
    p = mf.params
    if mf.shape == "triangle":
        return _trapezoid(x, p[0], p[1], p[1], p[2])
    if mf.shape == "trapezoid":
        return _trapezoid(x, *p)
    if mf.shape == "crisp_below":
        return 1.0 if x < p[0] else 0.0
    return 1.0 if x >= p[0] else 0.0


@dataclass(frozen=True)
class InputVariable:
    name: str
    domain: tuple[float, float]
    terms: dict[str, MembershipFunction]

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not lo < hi:
            raise FuzzyConfigError(f"{self.name}: empty domain [{lo}, {hi}]")
        if not self.terms:
            raise FuzzyConfigError(f"{self.name}: no membership functions")
        object.__setattr__(self, "domain", (lo, hi))
        object.__setattr__(self, "terms", dict(self.terms))

    def clamp(self, x: float) -> float:
        lo, hi = self.domain
        return min(max(float(x), lo), hi)

    def fuzzify(self, x: float) -> dict[str, float]:
        return {label: evaluate_mf(mf, x) for label, mf in self.terms.items()}


@dataclass(frozen=True)
class Consequent:
    """Affine consequent ``c0 + cr / max(x1, floor) + c1 * x1 + c2 * x2``."""

    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    cr: float = 0.0

    def __call__(self, x1: float, x2: float) -> float:
        value = self.c0 + self.c1 * x1 + self.c2 * x2
        if self.cr:
            value += self.cr / max(x1, RECIPROCAL_FLOOR)
        return value

    @property
    def is_constant(self) -> bool:
        return self.c1 == 0.0 and self.c2 == 0.0 and self.cr == 0.0


@dataclass(frozen=True)
class TskRule:
    """IF input1 is ``term1`` AND input2 is ``term2`` THEN ``consequent``."""

    term1: str
    term2: str
    consequent: Consequent


@dataclass(frozen=True)
class TskSystem:
    """Two-input, one-output TSK system.

    ``consequent_scale`` divides each clamped input before it is handed to the
    consequents, so rule coefficients may live in different units from the
    membership functions (e.g. kilometres vs metres).
    """

    name: str
    inputs: tuple[InputVariable, InputVariable]
    rules: tuple[TskRule, ...]
    output_range: tuple[float, float]
    consequent_scale: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if len(self.inputs) != 2:
            raise FuzzyConfigError(f"{self.name}: exactly two inputs are supported")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.rules:
            raise FuzzyConfigError(f"{self.name}: empty rule base")
        for rule in self.rules:
            for var, term in zip(self.inputs, (rule.term1, rule.term2)):
                if term not in var.terms:
                    raise FuzzyConfigError(
                        f"{self.name}: rule references unknown term {term!r} of {var.name!r}"
                    )
        olo, ohi = self.output_range
        if not olo <= ohi:
            raise FuzzyConfigError(f"{self.name}: bad output range {self.output_range}")
        if any(s <= 0 for s in self.consequent_scale):
            raise FuzzyConfigError(f"{self.name}: consequent scales must be positive")

    def firing_strengths(self, x1: float, x2: float) -> list[float]:
        """Per-rule product firing strengths at already-clamped inputs."""
        mu1 = self.inputs[0].fuzzify(x1)
        mu2 = self.inputs[1].fuzzify(x2)
        return [mu1[r.term1] * mu2[r.term2] for r in self.rules]

    def infer_raw(self, x1: float, x2: float) -> float:
        """Weighted mean of consequents before the output clamp."""
        x1 = self.inputs[0].clamp(x1)
        x2 = self.inputs[1].clamp(x2)
        weights = self.firing_strengths(x1, x2)
        total = math.fsum(weights)
        if total <= 0.0:
            raise RuleBaseHoleError(x1, x2, self.name)
        s1, s2 = self.consequent_scale
        u1, u2 = x1 / s1, x2 / s2
        num = math.fsum(w * r.consequent(u1, u2) for w, r in zip(weights, self.rules) if w)
        return num / total

    def infer(self, x1: float, x2: float) -> float:
        olo, ohi = self.output_range
        return min(max(self.infer_raw(x1, x2), olo), ohi)

    def with_terms(self, overrides: dict[str, dict[str, MembershipFunction]]) -> "TskSystem":
        """Copy of this system with some membership functions replaced."""
        new_inputs = []
        for var in self.inputs:
            replaced = overrides.get(var.name, {})
            unknown = set(replaced) - set(var.terms)
            if unknown:
                raise FuzzyConfigError(
                    f"{self.name}.{var.name}: unknown terms {sorted(unknown)}"
                )
            new_inputs.append(InputVariable(var.name, var.domain, {**var.terms, **replaced}))
        unknown_vars = set(overrides) - {v.name for v in self.inputs}
        if unknown_vars:
            raise FuzzyConfigError(f"{self.name}: unknown inputs {sorted(unknown_vars)}")
        return TskSystem(
            self.name, tuple(new_inputs), self.rules, self.output_range, self.consequent_scale
        )


def infer(system: TskSystem, x1: float, x2: float) -> float:
    return system.infer(x1, x2)


def find_holes(system: TskSystem, n: int = 201, extra: Iterable[tuple[float, float]] = ()) -> list[tuple[float, float]]:
    """Grid points (plus ``extra``) where no rule fires.

    The grid includes every membership breakpoint inside the domain, which
    is where holes between adjacent terms show up.
    """
    axes = []
    for var in system.inputs:
        lo, hi = var.domain
        pts = set(np.linspace(lo, hi, n).tolist())
        for mf in var.terms.values():
            pts.update(p for p in mf.params if lo <= p <= hi)
        axes.append(sorted(pts))
    holes = []
    candidates: Sequence[tuple[float, float]] = [(a, b) for a in axes[0] for b in axes[1]]
    for x1, x2 in list(candidates) + list(extra):
        try:
            system.infer_raw(x1, x2)
        except RuleBaseHoleError:
            holes.append((x1, x2))
    return holes
