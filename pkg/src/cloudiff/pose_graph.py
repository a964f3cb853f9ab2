"""Global pose optimization fusing odometry chains with absolute prior fixes.

The graph state is one pose per keyframe. Odometry edges constrain consecutive
relative poses; accepted prior-registration measurements contribute a global
position factor and a relative-rotation factor anchored at the earliest
measurement. Minimization is Levenberg-Marquardt over a 6-DoF local
parametrization per pose.

Conventions:

- Local increment per pose is ``[d_theta, d_p]`` (rotation first), applied as
  ``q <- q * exp(d_theta)`` and ``p <- p + d_p``.
- 6x6 information matrices use the same ordering: rotation block upper-left,
  translation block lower-right.
- Rotation error between quaternions is ``a (-) b = 2 * vec(b^-1 * a)``, the
  small-angle rotation vector of the error rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Pose,
    quat_conjugate,
    quat_from_rotvec,
    quat_left_matrix,
    quat_multiply,
    quat_right_matrix,
    quat_rotate,
    skew,
)

# maps a rotation vector to the vector part of a quaternion and back
_V = np.zeros((4, 3))
_V[1:, :] = np.eye(3)
_S = _V.T


@dataclass
class GraphState:
    """Pose per keyframe; quaternions stay unit-norm through every update."""

    poses: list[Pose]

    def __len__(self) -> int:
        return len(self.poses)

    def copy(self) -> "GraphState":
        return GraphState(list(self.poses))

    def perturbed(self, delta: np.ndarray) -> "GraphState":
        """Apply a stacked local increment (6 per pose, rotation first)."""
        out = []
        for k, pose in enumerate(self.poses):
            dtheta = delta[6 * k:6 * k + 3]
            dp = delta[6 * k + 3:6 * k + 6]
            out.append(Pose(t=pose.t + dp,
                            q=quat_multiply(pose.q, quat_from_rotvec(dtheta))))
        return GraphState(out)


def _check_information(info) -> np.ndarray:
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (6, 6):
        raise ValueError("information matrix must be 6x6")
    if not np.allclose(info, info.T, atol=1e-9):
        raise ValueError("information matrix must be symmetric")
    if np.linalg.eigvalsh(info).min() < -1e-9:
        raise ValueError("information matrix must be positive semi-definite")
    return 0.5 * (info + info.T)


@dataclass(frozen=True)
class PriorMeasurement:
    """Absolute pose fix for one keyframe, weighted by its 6x6 information."""

    index: int
    p: np.ndarray
    q: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(4))
        object.__setattr__(self, "information", _check_information(self.information))


@dataclass(frozen=True)
class OdometryMeasurement:
    """Relative pose of keyframe j expressed in keyframe i's frame (j = i+1)."""

    i: int
    j: int
    relative: Pose
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information", _check_information(self.information))


def quat_box_minus(a, b) -> np.ndarray:
    """Small-angle rotation vector of the error rotation b^-1 * a."""
    e = quat_multiply(quat_conjugate(b), a)
    if e[0] < 0:
        e = -e
    return 2.0 * e[1:]


def position_residual(x_t: Pose, m: PriorMeasurement) -> np.ndarray:
    """Global position error: measured position minus state position."""
    return m.p - x_t.t


def relative_rotation_residual(x_anchor: Pose, x_t: Pose,
                               m_anchor: PriorMeasurement,
                               m_t: PriorMeasurement) -> np.ndarray:
    """Error between measured and state relative rotation (anchor -> t)."""
    z_rel = quat_multiply(quat_conjugate(m_anchor.q), m_t.q)
    h_rel = quat_multiply(quat_conjugate(x_anchor.q), x_t.q)
    return quat_box_minus(z_rel, h_rel)


def odometry_residual(x_i: Pose, x_j: Pose, m: OdometryMeasurement) -> np.ndarray:
    """6-vector [rotation, translation] odometry error."""
    q_pred = quat_multiply(quat_conjugate(x_i.q), x_j.q)
    p_pred = quat_rotate(quat_conjugate(x_i.q), x_j.t - x_i.t)[0]
    return np.concatenate([quat_box_minus(q_pred, m.relative.q),
                           p_pred - m.relative.t])


# ---------------------------------------------------------------------------
# Factors: residual + analytic Jacobians w.r.t. the 6-DoF local increments
# ---------------------------------------------------------------------------

class _PositionFactor:
    def __init__(self, m: PriorMeasurement):
        self.t = m.index
        self.z = m.p
        self.weight = m.information[3:, 3:]

    def linearize(self, state: GraphState):
        r = self.z - state.poses[self.t].t
        # d r / d dp_t = -I ; rotation of pose t does not enter
        jac = {self.t: np.hstack([np.zeros((3, 3)), -np.eye(3)])}
        return r, jac, self.weight


class _RelativeRotationFactor:
    def __init__(self, m_anchor: PriorMeasurement, m_t: PriorMeasurement):
        self.a = m_anchor.index
        self.t = m_t.index
        self.z_rel = quat_multiply(quat_conjugate(m_anchor.q), m_t.q)
        self.weight = m_t.information[:3, :3]

    def linearize(self, state: GraphState):
        q_a = state.poses[self.a].q
        q_t = state.poses[self.t].q
        a_quat = quat_multiply(quat_conjugate(q_t), q_a)       # q_t^-1 q_a
        e_quat = quat_multiply(a_quat, self.z_rel)
        sign = -1.0 if e_quat[0] < 0 else 1.0
        r = sign * 2.0 * e_quat[1:]
        # r = 2 vec(q_t^-1 q_a z_rel); perturb each quaternion on the right
        j_a = sign * _S @ quat_left_matrix(a_quat) @ quat_right_matrix(self.z_rel) @ _V
        j_t = -sign * _S @ quat_right_matrix(e_quat) @ _V
        jac = {
            self.a: np.hstack([j_a, np.zeros((3, 3))]),
            self.t: np.hstack([j_t, np.zeros((3, 3))]),
        }
        return r, jac, self.weight


class _OdometryFactor:
    def __init__(self, m: OdometryMeasurement):
        self.i = m.i
        self.j = m.j
        self.z = m.relative
        self.weight = m.information

    def linearize(self, state: GraphState):
        x_i = state.poses[self.i]
        x_j = state.poses[self.j]
        rot_i_t = x_i.rotation_matrix().T
        q_ij = quat_multiply(quat_conjugate(x_i.q), x_j.q)
        e_quat = quat_multiply(quat_conjugate(self.z.q), q_ij)
        sign = -1.0 if e_quat[0] < 0 else 1.0
        r_q = sign * 2.0 * e_quat[1:]
        v0 = rot_i_t @ (x_j.t - x_i.t)
        r_p = v0 - self.z.t
        # rotation rows
        jq_j = sign * _S @ quat_left_matrix(e_quat) @ _V
        jq_i = -sign * _S @ quat_left_matrix(quat_conjugate(self.z.q)) \
            @ quat_right_matrix(q_ij) @ _V
        # translation rows
        jp_dthi = skew(v0)
        j_i = np.zeros((6, 6))
        j_i[:3, :3] = jq_i
        j_i[3:, :3] = jp_dthi
        j_i[3:, 3:] = -rot_i_t
        j_j = np.zeros((6, 6))
        j_j[:3, :3] = jq_j
        j_j[3:, 3:] = rot_i_t
        return np.concatenate([r_q, r_p]), {self.i: j_i, self.j: j_j}, self.weight


@dataclass(frozen=True)
class OptimizeConfig:
    max_iterations: int = 100
    cost_epsilon: float = 1e-9
    step_epsilon: float = 1e-9
    initial_lambda: float = 1e-6
    rank_tolerance: float = 1e-10


@dataclass
class OptimizeResult:
    state: GraphState
    cost_initial: float
    cost_final: float
    iterations: int
    converged: bool


def _build_factors(odometry, priors):
    factors = [_OdometryFactor(m) for m in odometry]
    factors += [_PositionFactor(m) for m in priors]
    if priors:
        anchor = min(priors, key=lambda m: m.index)
        for m in priors:
            if m.index != anchor.index:
                factors.append(_RelativeRotationFactor(anchor, m))
    return factors


def _assemble(state: GraphState, factors, free: np.ndarray):
    n = len(state)
    h = np.zeros((6 * n, 6 * n))
    g = np.zeros(6 * n)
    cost = 0.0
    for f in factors:
        r, jac, w = f.linearize(state)
        cost += float(r @ w @ r)
        for k, jk in jac.items():
            g[6 * k:6 * k + 6] += jk.T @ (w @ r)
            for l, jl in jac.items():
                h[6 * k:6 * k + 6, 6 * l:6 * l + 6] += jk.T @ w @ jl
    return h[np.ix_(free, free)], g[free], cost


def _cost(state: GraphState, factors) -> float:
    total = 0.0
    for f in factors:
        r, _, w = f.linearize(state)
        total += float(r @ w @ r)
    return total


def optimize(graph: GraphState, odometry: list[OdometryMeasurement],
             priors: list[PriorMeasurement],
             config: OptimizeConfig = OptimizeConfig()) -> OptimizeResult:
    """Levenberg-Marquardt minimization of the weighted factor-graph cost.

    With no prior measurements the first pose is held fixed (gauge); with
    priors all poses are free and the system must be full-rank, otherwise a
    diagnostic ValueError is raised.
    """
    n = len(graph)
    if n == 0:
        raise ValueError("empty graph")
    for m in odometry:
        if not (0 <= m.i < n and 0 <= m.j < n):
            raise ValueError(f"odometry edge ({m.i}, {m.j}) outside graph of size {n}")
    for m in priors:
        if not (0 <= m.index < n):
            raise ValueError(f"prior index {m.index} outside graph of size {n}")
    _check_connected(n, odometry)

    factors = _build_factors(odometry, priors)
    free = np.ones(6 * n, dtype=bool)
    if not priors:
        free[:6] = False  # fix the first pose to remove the gauge freedom

    state = graph.copy()
    h, g, cost = _assemble(state, factors, free)
    _check_rank(h, config.rank_tolerance)
    cost_initial = cost

    lam = config.initial_lambda
    iterations = 0
    converged = False
    while iterations < config.max_iterations:
        iterations += 1
        damped = h + lam * np.diag(np.diag(h))
        try:
            step = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        delta = np.zeros(6 * n)
        delta[free] = step
        candidate = state.perturbed(delta)
        new_cost = _cost(candidate, factors)
        if new_cost <= cost:
            decrease = cost - new_cost
            state = candidate
            cost = new_cost
            lam = max(lam * 0.3, 1e-12)
            h, g, cost = _assemble(state, factors, free)
            if decrease < config.cost_epsilon or np.linalg.norm(step) < config.step_epsilon:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return OptimizeResult(state=state, cost_initial=cost_initial,
                          cost_final=cost, iterations=iterations,
                          converged=converged)


def _check_connected(n: int, odometry) -> None:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m in odometry:
        ra, rb = find(m.i), find(m.j)
        if ra != rb:
            parent[ra] = rb
    roots = {find(k) for k in range(n)}
    if len(roots) > 1:
        raise ValueError(f"graph not connected through odometry ({len(roots)} components)")


def _check_rank(h: np.ndarray, tol: float) -> None:
    if h.size == 0:
        raise ValueError("no free variables to optimize")
    # equilibrate first: raw factor weights span many orders of magnitude,
    # which would make softly-constrained modes look like gauge freedoms
    d = np.sqrt(np.diag(h))
    if (d <= 0).any():
        raise ValueError("normal matrix has an unconstrained variable "
                         "(zero diagonal); add more priors or fix a pose")
    scaled = h / np.outer(d, d)
    eig = np.linalg.eigvalsh(scaled)
    if eig[0] < tol * eig[-1]:
        raise ValueError(
            "normal matrix is rank-deficient: the measurements leave a gauge "
            f"freedom (min/max eigenvalue ratio {eig[0] / max(eig[-1], 1e-300):.2e}); "
            "add more priors or fix a pose")


# ---------------------------------------------------------------------------
# Trajectory text format: one line per keyframe,
# `timestamp tx ty tz qx qy qz qw`
# ---------------------------------------------------------------------------

def save_trajectory(path, timestamps, poses) -> None:
    lines = []
    for ts, pose in zip(timestamps, poses):
        w, x, y, z = pose.q
        tx, ty, tz = pose.t
        lines.append(f"{ts:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    timestamps = []
    poses = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"{path}: expected 8 columns per line, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        timestamps.append(ts)
        poses.append(Pose(t=(tx, ty, tz), q=(qw, qx, qy, qz)))
    return np.asarray(timestamps), poses
