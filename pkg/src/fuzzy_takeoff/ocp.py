"""Minimum-time trajectory optimisation with soft spherical keep-out zones.

Direct single shooting on a 3D double integrator: the decision vector holds
the acceleration nodes (linearly interpolated in time) followed by the final
time. The cost is the final time plus quadratic hinge penalties for zone
intrusion, goal miss and speed / climb-rate bounds, minimised by BFGS with a
projected backtracking line search.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

VIRTUAL_HARD_WEIGHT = 1e6


class DivergenceError(FloatingPointError):
    """Integration produced a non-finite state."""


@dataclass(frozen=True)
class AircraftModel:
    a_max: float = 5.0
    v_max: float = 120.0
    v_min: float = 40.0
    climb_rate_max: float = 15.0

    def __post_init__(self):
        if min(self.a_max, self.v_max, self.v_min, self.climb_rate_max) <= 0:
            raise ValueError("aircraft bounds must be strictly positive")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")


@dataclass(frozen=True)
class ZoneConstraint:
    """Keep-out sphere whose centre drifts at constant velocity."""

    center: np.ndarray
    center_velocity: np.ndarray
    radius: float
    obstacle_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(
            self, "center_velocity", np.asarray(self.center_velocity, dtype=float).reshape(3)
        )
        if not self.radius > 0:
            raise ValueError(f"zone radius must be positive, got {self.radius}")

    def center_at(self, t):
        t = np.asarray(t, dtype=float)
        return self.center + t[..., None] * self.center_velocity


@dataclass(frozen=True)
class OcpProblem:
    initial_state: np.ndarray
    goal: np.ndarray
    constraints: tuple[ZoneConstraint, ...] = ()
    model: AircraftModel = field(default_factory=AircraftModel)
    w_obstacle: float = 1e3
    w_terminal: float = 1e2
    w_bounds: float = 1e2
    t_min: float = 60.0
    t_max: float = 600.0
    n_control_nodes: int = 25
    n_integration_steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "initial_state", np.asarray(self.initial_state, dtype=float).reshape(6))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(3))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.n_control_nodes < 2:
            raise ValueError("need at least two control nodes")
        if self.n_integration_steps < self.n_control_nodes:
            raise ValueError("n_integration_steps must be >= n_control_nodes")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if min(self.w_obstacle, self.w_terminal, self.w_bounds) < 0:
            raise ValueError("penalty weights must be nonnegative")

    @property
    def n_decision(self) -> int:
        return 3 * self.n_control_nodes + 1

    @cached_property
    def zone_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked zone centres (K, 3), centre velocities (K, 3) and radii (K,)."""
        k = len(self.constraints)
        centers = np.array([c.center for c in self.constraints]).reshape(k, 3)
        velocities = np.array([c.center_velocity for c in self.constraints]).reshape(k, 3)
        radii = np.array([c.radius for c in self.constraints], dtype=float)
        return centers, velocities, radii


@dataclass(frozen=True)
class CostBreakdown:
    time_cost: float
    obstacle_penalty: float
    terminal_penalty: float
    bounds_penalty: float

    @property
    def total(self) -> float:
        return self.time_cost + self.obstacle_penalty + self.terminal_penalty + self.bounds_penalty

    def as_dict(self) -> dict[str, float]:
        return {
            "time_cost": self.time_cost,
            "obstacle_penalty": self.obstacle_penalty,
            "terminal_penalty": self.terminal_penalty,
            "bounds_penalty": self.bounds_penalty,
            "total": self.total,
        }


@dataclass(frozen=True)
class OcpSolution:
    control_nodes: np.ndarray
    t_final: float
    times: np.ndarray
    states: np.ndarray
    cost: CostBreakdown
    converged: bool
    iterations: int
    wall_time: float
    status: str = "gradient"
    message: str = ""
    # (obstacle weight, total cost) at the start and after every accepted step
    history: tuple[tuple[float, float], ...] = ()

    @property
    def failed(self) -> bool:
        return self.status == "diverged"

    @property
    def decision(self) -> np.ndarray:
        return pack(self.control_nodes, self.t_final)


# --- decision vector --------------------------------------------------------


def pack(control_nodes, t_final: float) -> np.ndarray:
    nodes = np.asarray(control_nodes, dtype=float).reshape(-1, 3)
    return np.concatenate([nodes.ravel(), [float(t_final)]])


def unpack(z) -> tuple[np.ndarray, float]:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or (z.size - 1) % 3:
        raise ValueError(f"decision vector length must be 3*M + 1, got {z.shape}")
    return z[:-1].reshape(-1, 3), float(z[-1])


# --- dynamics ---------------------------------------------------------------


@lru_cache(maxsize=32)
def _interp_matrices(n_nodes: int, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear-interpolation weights from nodes to step points and midpoints.

    Nodes and steps are both uniform on [0, tF], so the weights do not depend
    on tF.
    """

    def weights(frac):
        pos = frac * (n_nodes - 1)
        left = np.minimum(np.floor(pos).astype(int), n_nodes - 2)
        w = pos - left
        mat = np.zeros((frac.size, n_nodes))
        rows = np.arange(frac.size)
        mat[rows, left] = 1.0 - w
        mat[rows, left + 1] = w
        return mat

    k = np.arange(n_steps + 1)
    ws = weights(k / n_steps)
    wm = weights((k[:-1] + 0.5) / n_steps)
    ws.setflags(write=False)
    wm.setflags(write=False)
    return ws, wm


def _clamp_ball(a: np.ndarray, a_max: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = np.linalg.norm(a, axis=-1)
    scale = np.where(norm > a_max, a_max / np.maximum(norm, 1e-300), 1.0)
    return a * scale[:, None], norm, scale


def _clamp_ball_vjp(a, norm, scale, g, a_max):
    """Pull back ``g`` through the radial clamp."""
    out = g * scale[:, None]
    outside = norm > a_max
    if np.any(outside):
        u = a[outside] / norm[outside, None]
        proj = np.sum(u * g[outside], axis=1)
        out[outside] -= scale[outside, None] * proj[:, None] * u
    return out


def control_samples(model: AircraftModel, control_nodes, n_steps: int):
    """Clamped accelerations at the step points and at the step midpoints."""
    nodes = np.asarray(control_nodes, dtype=float).reshape(-1, 3)
    ws, wm = _interp_matrices(nodes.shape[0], n_steps)
    s, _, _ = _clamp_ball(ws @ nodes, model.a_max)
    m, _, _ = _clamp_ball(wm @ nodes, model.a_max)
    return s, m


def _rk4_double_integrator(x0, acc_steps, acc_mid, h):
    # RK4 stages for p' = v, v' = a(t) collapse to closed form per step:
    #   v+ = v + h/6 (a0 + 4 am + a1)
    #   p+ = p + h v + h^2/6 (a0 + 2 am)
    n = acc_mid.shape[0]
    dv = (h / 6.0) * (acc_steps[:-1] + 4.0 * acc_mid + acc_steps[1:])
    v = np.empty((n + 1, 3))
    v[0] = x0[3:]
    v[1:] = x0[3:] + np.cumsum(dv, axis=0)
    dp = h * v[:-1] + (h * h / 6.0) * (acc_steps[:-1] + 2.0 * acc_mid)
    p = np.empty((n + 1, 3))
    p[0] = x0[:3]
    p[1:] = x0[:3] + np.cumsum(dp, axis=0)
    return p, v


def integrate(model: AircraftModel, initial, control_nodes, t_final: float, n_steps: int) -> np.ndarray:
    """States (n_steps + 1, 6) on the uniform grid k * t_final / n_steps."""
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x0 = np.asarray(initial, dtype=float).reshape(6)
    s, m = control_samples(model, control_nodes, n_steps)
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        p, v = _rk4_double_integrator(x0, s, m, t_final / n_steps)
    states = np.hstack([p, v])
    if not np.all(np.isfinite(states)):
        raise DivergenceError("non-finite state during integration")
    return states


# --- cost and gradient ------------------------------------------------------


def project_time(problem: OcpProblem, t_final: float) -> float:
    return min(max(t_final, problem.t_min), problem.t_max)


def _zone_geometry(problem: OcpProblem, p: np.ndarray, t: np.ndarray):
    """Offsets (K, N+1, 3), distances and hinge violations against every zone."""
    centers, velocities, radii = problem.zone_arrays
    diff = p[None] - (centers[:, None, :] + t[None, :, None] * velocities[:, None, :])
    d = np.linalg.norm(diff, axis=2)
    viol = np.maximum(0.0, radii[:, None] - d)
    return diff, d, viol


def _unit(diff: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.where(d[..., None] > 0, diff / np.maximum(d, 1e-300)[..., None], 0.0)


def _forward(problem: OcpProblem, z):
    nodes, tf_raw = unpack(z)
    if nodes.shape[0] != problem.n_control_nodes:
        raise ValueError(
            f"expected {problem.n_control_nodes} control nodes, got {nodes.shape[0]}"
        )
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite decision vector")
    n = problem.n_integration_steps
    tf = project_time(problem, tf_raw)
    h = tf / n
    ws, wm = _interp_matrices(problem.n_control_nodes, n)
    a_s = ws @ nodes
    a_m = wm @ nodes
    clamp_s = _clamp_ball(a_s, problem.model.a_max)
    clamp_m = _clamp_ball(a_m, problem.model.a_max)
    p, v = _rk4_double_integrator(problem.initial_state, clamp_s[0], clamp_m[0], h)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
        raise DivergenceError("non-finite state during integration")
    return tf_raw, tf, h, (a_s, clamp_s), (a_m, clamp_m), p, v


def _bound_hinges(model: AircraftModel, v: np.ndarray):
    speed = np.linalg.norm(v, axis=1)
    over = np.maximum(0.0, speed - model.v_max)
    under = np.maximum(0.0, model.v_min - speed)
    climb = np.maximum(0.0, np.abs(v[:, 2]) - model.climb_rate_max)
    return speed, over, under, climb


def _evaluate(problem: OcpProblem, z, with_grad: bool):
    tf_raw, tf, h, (a_s, (acc_s, ns, ks)), (a_m, (acc_m, nm, km)), p, v = _forward(problem, z)
    model = problem.model
    n = problem.n_integration_steps
    t = np.arange(n + 1) * h

    gp = np.zeros_like(p) if with_grad else None
    gv = np.zeros_like(v) if with_grad else None
    gh = 0.0

    obstacle = 0.0
    if problem.constraints:
        diff, d, viol = _zone_geometry(problem, p, t)
        obstacle = float(np.sum(viol * viol))
        if with_grad and obstacle > 0.0:
            unit = _unit(diff, d)
            coef = problem.w_obstacle * h * 2.0 * viol
            gp -= np.einsum("ki,kia->ia", coef, unit)
            # centres move with t_k = k h, so they depend on h too
            drift = np.einsum("kia,ka->ki", unit, problem.zone_arrays[1])
            gh += float(np.sum(coef * drift, axis=0) @ np.arange(n + 1))
            gh += problem.w_obstacle * obstacle
    obstacle *= problem.w_obstacle * h

    miss = p[-1] - problem.goal
    terminal = problem.w_terminal * float(miss @ miss)

    speed, over, under, climb = _bound_hinges(model, v)
    bsq = float(np.sum(over * over) + np.sum(under * under) + np.sum(climb * climb))
    bounds = problem.w_bounds * h * bsq

    cost = CostBreakdown(tf, obstacle, terminal, bounds)
    if not with_grad:
        return cost, None

    gp[-1] += 2.0 * problem.w_terminal * miss
    if bsq > 0.0:
        unit_v = _unit(v, speed)
        gv += (problem.w_bounds * h * 2.0 * (over - under))[:, None] * unit_v
        gv[:, 2] += problem.w_bounds * h * 2.0 * climb * np.sign(v[:, 2])
        gh += problem.w_bounds * bsq

    # reverse through p[k] = p0 + sum_{j<k} dp[j]
    gdp = np.cumsum(gp[:0:-1], axis=0)[::-1]
    base_p = acc_s[:-1] + 2.0 * acc_m
    gv[:-1] += h * gdp
    g_acc_s = np.zeros_like(acc_s)
    g_acc_m = np.zeros_like(acc_m)
    g_acc_s[:-1] += (h * h / 6.0) * gdp
    g_acc_m += (h * h / 3.0) * gdp
    gh += float(np.sum(gdp * (v[:-1] + (h / 3.0) * base_p)))

    # reverse through v[k] = v0 + sum_{j<k} dv[j]
    gdv = np.cumsum(gv[:0:-1], axis=0)[::-1]
    g_acc_s[:-1] += (h / 6.0) * gdv
    g_acc_s[1:] += (h / 6.0) * gdv
    g_acc_m += (4.0 * h / 6.0) * gdv
    gh += float(np.sum(gdv * (acc_s[:-1] + 4.0 * acc_m + acc_s[1:]))) / 6.0

    ws, wm = _interp_matrices(problem.n_control_nodes, n)
    g_nodes = ws.T @ _clamp_ball_vjp(a_s, ns, ks, g_acc_s, model.a_max)
    g_nodes += wm.T @ _clamp_ball_vjp(a_m, nm, km, g_acc_m, model.a_max)

    inside = problem.t_min <= tf_raw <= problem.t_max
    g_tf = (1.0 + gh / n) if inside else 0.0
    return cost, np.concatenate([g_nodes.ravel(), [g_tf]])


def evaluate_cost(problem: OcpProblem, z) -> CostBreakdown:
    return _evaluate(problem, z, with_grad=False)[0]


def cost_and_gradient(problem: OcpProblem, z) -> tuple[CostBreakdown, np.ndarray]:
    """Cost breakdown and the reverse-mode gradient of its total."""
    return _evaluate(problem, z, with_grad=True)


def fd_gradient(problem: OcpProblem, z, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |z_j|)``."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for j in range(z.size):
        step = rel_step * (1.0 + abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        g[j] = (evaluate_cost(problem, zp).total - evaluate_cost(problem, zm).total) / (2.0 * step)
    return g


def gradient(problem: OcpProblem, z, method: str = "fd", rel_step: float = 1e-6) -> np.ndarray:
    """Gradient of the total cost; ``method`` is ``"fd"`` or ``"adjoint"``."""
    if method == "fd":
        return fd_gradient(problem, z, rel_step)
    if method == "adjoint":
        return cost_and_gradient(problem, z)[1]
    raise ValueError(f"unknown gradient method {method!r}")


def zone_intrusion(problem: OcpProblem, z) -> float:
    """Unweighted sum of squared zone violations times the step length."""
    if not problem.constraints:
        return 0.0
    _, _, h, _, _, p, _ = _forward(problem, z)
    _, _, viol = _zone_geometry(problem, p, np.arange(p.shape[0]) * h)
    return float(np.sum(viol * viol)) * h


# --- solver -----------------------------------------------------------------


def initial_guess(problem: OcpProblem) -> np.ndarray:
    """Kinematic cold start: accelerate at full authority towards a cruise
    velocity aimed at the goal, then coast.

    The cruise velocity points at the goal at v_max with its vertical part
    limited to the climb rate. Starting from zero accelerations instead leaves
    BFGS stuck on a slow, stretched trajectory.
    """
    model = problem.model
    p0, v0 = problem.initial_state[:3], problem.initial_state[3:]
    to_goal = problem.goal - p0
    dist = float(np.linalg.norm(to_goal))
    m = problem.n_control_nodes
    if dist == 0.0:
        return pack(np.zeros((m, 3)), problem.t_min)
    cruise = model.v_max * to_goal / dist
    if abs(cruise[2]) > model.climb_rate_max:
        horiz = math.hypot(cruise[0], cruise[1])
        cruise[2] = math.copysign(model.climb_rate_max, cruise[2])
        cruise[:2] *= math.sqrt(model.v_max**2 - cruise[2] ** 2) / max(horiz, 1e-9)
    dv = cruise - v0
    dv_norm = float(np.linalg.norm(dv))
    t_acc = dv_norm / model.a_max
    covered = v0 * t_acc + 0.5 * dv * t_acc
    t_coast = max(float((to_goal - covered) @ cruise) / float(cruise @ cruise), 0.0)
    tf = project_time(problem, t_acc + t_coast)
    node_times = np.linspace(0.0, tf, m)
    accel = model.a_max * dv / max(dv_norm, 1e-9)
    nodes = np.where((node_times < t_acc)[:, None], accel[None, :], 0.0)
    return pack(nodes, tf)


def _projected_gradient(problem: OcpProblem, z, g):
    pg = g.copy()
    tf = z[-1]
    if tf <= problem.t_min and g[-1] > 0:
        pg[-1] = 0.0
    elif tf >= problem.t_max and g[-1] < 0:
        pg[-1] = 0.0
    return pg


def _project(problem: OcpProblem, z):
    z = z.copy()
    z[-1] = project_time(problem, z[-1])
    return z


def trajectory_solution(problem: OcpProblem, z, **kw) -> OcpSolution:
    """Package a decision vector as a solution (integrating its trajectory)."""
    nodes, tf = unpack(z)
    tf = project_time(problem, tf)
    n = problem.n_integration_steps
    states = integrate(problem.model, problem.initial_state, nodes, tf, n)
    cost = evaluate_cost(problem, pack(nodes, tf))
    defaults = dict(converged=False, iterations=0, wall_time=0.0, status="evaluated")
    defaults.update(kw)
    return OcpSolution(nodes.copy(), tf, np.arange(n + 1) * (tf / n), states, cost, **defaults)


@dataclass
class _Run:
    z: np.ndarray
    status: str
    iterations: int
    message: str = ""
    history: list[float] = field(default_factory=list)


def _backtrack(alpha: float, f: float, t_f: float, slope: float) -> float:
    """Next trial step: minimiser of the quadratic through f, the slope and
    t_f, kept within [0.1, 0.5] of the current step."""
    if not math.isfinite(t_f) or slope >= 0.0:
        return 0.5 * alpha
    curv = t_f - f - slope
    if curv <= 0.0:
        return 0.5 * alpha
    ratio = -0.5 * slope / curv
    return alpha * min(max(ratio, 0.1), 0.5)


def _bfgs(problem: OcpProblem, z, max_iter, gtol, ftol, stall_window, reseed_every) -> _Run:
    """Projected BFGS whose inverse Hessian is periodically reseeded from the
    Gauss-Newton model of the penalty residuals."""
    try:
        cost, g = cost_and_gradient(problem, z)
    except DivergenceError as exc:
        return _Run(z, "diverged", 0, str(exc))
    f = cost.total
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        return _Run(z, "diverged", 0, "non-finite cost at starting point")

    eye = np.eye(z.size)

    def seed(at):
        try:
            return _gauss_newton_inverse(problem, at)
        except (np.linalg.LinAlgError, DivergenceError):
            return eye.copy()

    hess_inv = seed(z)
    since_seed = 0
    history = [f]
    it = 0
    while it < max_iter:
        pg = _projected_gradient(problem, z, g)
        if np.linalg.norm(pg) <= gtol * (1.0 + abs(f)):
            return _Run(z, "gradient", it, history=history)
        direction = -hess_inv @ g
        if pg[-1] == 0.0:
            direction[-1] = 0.0
        if not float(g @ direction) < 0:
            hess_inv = eye.copy()
            since_seed = 0
            direction = -pg / max(1.0, float(np.linalg.norm(pg)))

        alpha = 1.0
        accepted = False
        for _ in range(60):
            trial = _project(problem, z + alpha * direction)
            slope = float(g @ (trial - z))
            try:
                t_f = evaluate_cost(problem, trial).total
            except DivergenceError:
                t_f = math.inf
            # Armijo on the projected step, and never uphill
            if math.isfinite(t_f) and t_f <= f + 1e-4 * slope and t_f <= f:
                accepted = True
                break
            alpha = _backtrack(alpha, f, t_f, slope)
        if not accepted:
            if since_seed == 0:
                return _Run(z, "line_search", it, "no acceptable step along a fresh direction", history)
            hess_inv = seed(z)
            since_seed = 0
            continue
        t_g = cost_and_gradient(problem, trial)[1]

        it += 1
        since_seed += 1
        s = trial - z
        y = t_g - g
        sy = float(s @ y)
        if since_seed >= reseed_every:
            hess_inv = seed(trial)
            since_seed = 0
        elif sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            rho = 1.0 / sy
            hy = hess_inv @ y
            hess_inv = (
                hess_inv
                - rho * (np.outer(s, hy) + np.outer(hy, s))
                + (rho * rho * float(y @ hy) + rho) * np.outer(s, s)
            )
        z, f, g = trial, t_f, t_g
        history.append(f)
        if len(history) > stall_window and history[-1 - stall_window] - f <= ftol * (1.0 + abs(f)):
            return _Run(z, "stalled", it, history=history)
    return _Run(z, "max_iter", it, history=history)


def continuation_weights(problem: OcpProblem, z, factor: float = 10.0) -> list[float]:
    """Obstacle weights to solve at before the target weight.

    Only used when the start point intrudes into a zone: the solver first
    pushes the path out under a mild penalty and then stiffens it.
    """
    target = problem.w_obstacle
    if target <= 1.0 or zone_intrusion(problem, z) == 0.0:
        return []
    weights = []
    w = 1.0
    while w < target:
        weights.append(w)
        w *= factor
    return weights


def solve(
    problem: OcpProblem,
    warm_start: Sequence[float] | None = None,
    max_iter: int = 500,
    gtol: float = 1e-4,
    ftol: float = 1e-8,
    stall_window: int = 5,
    reseed_every: int = 25,
    stage_iter: int = 100,
    continuation: bool = True,
) -> OcpSolution:
    """Minimise the penalised cost with projected BFGS.

    Each stage stops when the projected gradient norm falls below
    ``gtol * (1 + |f|)``, when the cost has dropped by no more than
    ``ftol * (1 + |f|)`` over the last ``stall_window`` iterations, or when its
    iteration budget runs out. ``max_iter`` bounds the iterations summed over
    all stages. Divergence never raises; it comes back as
    ``status="diverged"``.
    """
    start = time.perf_counter()
    if warm_start is None:
        # an absurd start state only produces NaNs here; the first evaluation reports it
        with np.errstate(all="ignore"):
            z = initial_guess(problem)
    else:
        z = np.array(warm_start, dtype=float)
        if z.shape != (problem.n_decision,):
            raise ValueError(f"warm start must have length {problem.n_decision}")
    with np.errstate(all="ignore"):
        z = _project(problem, z)

    try:
        weights = continuation_weights(problem, z) if continuation else []
    except DivergenceError:
        weights = []
    used = 0
    run = _Run(z, "max_iter", 0)
    history: list[tuple[float, float]] = []
    for w in weights:
        budget = min(stage_iter, max_iter - used)
        if budget <= 0:
            break
        run = _bfgs(replace(problem, w_obstacle=w), run.z, budget, gtol, ftol, stall_window, reseed_every)
        used += run.iterations
        history += [(w, f) for f in run.history]
        if run.status == "diverged":
            break
    if run.status != "diverged":
        run = _bfgs(problem, run.z, max_iter - used, gtol, ftol, stall_window, reseed_every)
        used += run.iterations
        history += [(problem.w_obstacle, f) for f in run.history]
    elapsed = time.perf_counter() - start

    if run.status == "diverged":
        n = problem.n_integration_steps
        nodes, tf = unpack(run.z)
        nan = float("nan")
        return OcpSolution(
            nodes.copy(), tf, np.arange(n + 1) * (tf / n), np.full((n + 1, 6), nan),
            CostBreakdown(tf, nan, nan, nan), False, used, elapsed,
            status="diverged", message=run.message, history=tuple(history),
        )
    return trajectory_solution(
        problem, run.z,
        converged=run.status in ("gradient", "stalled"), iterations=used,
        wall_time=elapsed, status=run.status, message=run.message, history=tuple(history),
    )


def min_separation(solution: OcpSolution, constraints: Sequence[ZoneConstraint]) -> np.ndarray:
    """Closest approach of the trajectory to each (moving) zone centre."""
    p = solution.states[:, :3]
    return np.array(
        [float(np.min(np.linalg.norm(p - c.center_at(solution.times), axis=1))) for c in constraints]
    )


def with_constraints(problem: OcpProblem, constraints: Sequence[ZoneConstraint]) -> OcpProblem:
    return replace(problem, constraints=tuple(constraints))


# --- Gauss-Newton curvature model -------------------------------------------


@lru_cache(maxsize=32)
def _propagation_matrices(n_steps: int):
    """Constant maps from acceleration samples to velocity / position.

    With h = tF / n_steps:
        v = v0 + h (Lvs @ acc_steps + Lvm @ acc_mid)
        p = p0 + t v0 + h^2 (Lps @ acc_steps + Lpm @ acc_mid)
    """
    n = n_steps
    c1 = np.tril(np.ones((n + 1, n)), k=-1)
    e0 = np.eye(n, n + 1)
    e1 = np.eye(n, n + 1, k=1)
    lvs = (c1 @ e0 + c1 @ e1) / 6.0
    lvm = (4.0 / 6.0) * c1
    lps = c1 @ lvs[:-1] + (c1 @ e0) / 6.0
    lpm = c1 @ lvm[:-1] + c1 / 3.0
    return lvs, lvm, lps, lpm


def _clamp_jacobian(a, norm, scale, a_max):
    jac = np.repeat(np.eye(3)[None], a.shape[0], axis=0) * scale[:, None, None]
    outside = norm > a_max
    if np.any(outside):
        u = a[outside] / norm[outside, None]
        jac[outside] -= scale[outside, None, None] * u[:, :, None] * u[:, None, :]
    return jac


def residuals(problem: OcpProblem, z) -> np.ndarray:
    """Vector r with sum(r**2) equal to the three penalty terms."""
    return _residuals(problem, z, with_jac=False)[0]


def residual_jacobian(problem: OcpProblem, z) -> tuple[np.ndarray, np.ndarray]:
    return _residuals(problem, z, with_jac=True)


def _residuals(problem: OcpProblem, z, with_jac: bool, tf_step: float = 1e-6):
    tf_raw, tf, h, (a_s, (_, ns, ks)), (a_m, (_, nm, km)), p, v = _forward(problem, z)
    model = problem.model
    n = problem.n_integration_steps
    t = np.arange(n + 1) * h

    so = math.sqrt(problem.w_obstacle * h)
    sb = math.sqrt(problem.w_bounds * h)
    st = math.sqrt(problem.w_terminal)
    parts = [st * (p[-1] - problem.goal)]
    if problem.constraints:
        diff, d, viol = _zone_geometry(problem, p, t)
        parts.append(so * viol.ravel())
    speed, over, under, climb = _bound_hinges(model, v)
    parts += [sb * over, sb * under, sb * climb]
    r = np.concatenate(parts)
    if not with_jac:
        return r, None

    m = problem.n_control_nodes
    ws, wm = _interp_matrices(m, n)
    lvs, lvm, lps, lpm = _propagation_matrices(n)
    ds = _clamp_jacobian(a_s, ns, ks, model.a_max)
    dm = _clamp_jacobian(a_m, nm, km, model.a_max)
    # (sample, axis_out, axis_in, node)
    xs = (ds[:, :, :, None] * ws[:, None, None, :]).reshape(n + 1, -1)
    xm = (dm[:, :, :, None] * wm[:, None, None, :]).reshape(n, -1)
    jp = (h * h) * (lps @ xs + lpm @ xm)
    jv = h * (lvs @ xs + lvm @ xm)
    # -> (sample, axis_out, node * 3 + axis_in) to match the packed layout
    jp = jp.reshape(n + 1, 3, 3, m).transpose(0, 1, 3, 2).reshape(n + 1, 3, 3 * m)
    jv = jv.reshape(n + 1, 3, 3, m).transpose(0, 1, 3, 2).reshape(n + 1, 3, 3 * m)

    blocks = [st * jp[-1]]
    if problem.constraints:
        unit = _unit(diff, d) * (viol > 0)[..., None]
        blocks.append(-so * np.einsum("kia,iaj->kij", unit, jp).reshape(-1, 3 * m))
    unit_v = _unit(v, speed)
    jspeed = np.einsum("ka,kaj->kj", unit_v, jv)
    blocks.append(sb * (over > 0)[:, None] * jspeed)
    blocks.append(-sb * (under > 0)[:, None] * jspeed)
    blocks.append(sb * ((climb > 0) * np.sign(v[:, 2]))[:, None] * jv[:, 2, :])
    jac = np.zeros((r.size, 3 * m + 1))
    jac[:, :-1] = np.vstack(blocks)

    if problem.t_min <= tf_raw <= problem.t_max:
        step = tf_step * (1.0 + tf)
        lo = max(problem.t_min, tf - step)
        hi = min(problem.t_max, tf + step)
        if hi > lo:
            zp, zm = z.copy(), z.copy()
            zp[-1], zm[-1] = hi, lo
            rp = _residuals(problem, zp, False)[0]
            rm = _residuals(problem, zm, False)[0]
            jac[:, -1] = (rp - rm) / (hi - lo)
    return r, jac


def _gauss_newton_inverse(problem: OcpProblem, z, damping: float = 1e-6) -> np.ndarray:
    """Inverse of the damped Gauss-Newton Hessian of the penalty terms."""
    _, jac = _residuals(problem, z, with_jac=True)
    hess = 2.0 * jac.T @ jac
    scale = max(float(np.max(np.diag(hess))), 1.0)
    hess[np.diag_indices_from(hess)] += damping * scale + 1e-9
    return np.linalg.inv(hess)
