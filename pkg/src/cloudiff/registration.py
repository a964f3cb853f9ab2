"""Generalized-ICP alignment with validity gating and covariance extraction.

Plane-to-plane GICP: each point carries a neighborhood covariance regularized
to a disc (eigenvalues 1, 1, epsilon), and registration minimizes the summed
Mahalanobis distance of correspondences under the combined covariances by
Gauss-Newton over a 6-DoF increment.

The final normal (Gauss-Newton) matrix of the quadratic model is kept as the
registration's information: it is the positive-definite curvature of the
negative log-likelihood at the optimum, so the pose covariance is its inverse.
The 6x6 ordering is rotation first, translation second, matching the pose
graph's convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    PointCloud,
    Pose,
    SpatialIndex,
    matrix_to_quat,
    quat_to_matrix,
)

COVARIANCE_EPSILON = 1e-3  # disc thickness of the plane-to-plane model
CONDITION_LIMIT = 1e12

_MIN_CLOUD = 50


@dataclass(frozen=True)
class RegistrationConfig:
    max_iterations: int = 64
    translation_epsilon: float = 1e-4   # m
    rotation_epsilon: float = 1e-4      # rad
    correspondence_distance: float = 1.0
    knn_for_covariance: int = 10
    fitness_threshold: float = 0.5      # m, mean local->prior distance
    max_translation: float = 1.0        # m, length of the recovered translation
    thread_count: int = 1

    def __post_init__(self):
        for name in ("max_iterations", "translation_epsilon", "rotation_epsilon",
                     "correspondence_distance", "fitness_threshold",
                     "max_translation", "thread_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.knn_for_covariance < 4:
            raise ValueError("knn_for_covariance must be >= 4")


@dataclass
class RegistrationResult:
    transform: Pose
    converged: bool
    fitness: float
    hessian: np.ndarray | None
    covariance: np.ndarray | None
    iterations: int
    accepted: bool = False
    correspondences: int = 0


def estimate_point_covariances(cloud: PointCloud, k: int) -> np.ndarray:
    """Per-point k-NN sample covariances regularized to the plane-to-plane model.

    Each covariance is re-composed in its own eigenbasis with eigenvalues
    (epsilon, 1, 1), epsilon on the smallest (normal) direction. The
    regularization is unconditional, so the output only encodes each
    neighborhood's orientation.
    """
    if len(cloud) < k:
        raise ValueError(f"cloud of {len(cloud)} points is smaller than k={k}")
    index = SpatialIndex(cloud)
    _, nn = index.knn(cloud.points, k=k)
    neighborhoods = cloud.points[nn]                       # (n, k, 3)
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)                          # ascending eigenvalues
    vals = np.array([COVARIANCE_EPSILON, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", vecs, vals, vecs)


class RegistrationTarget:
    """Prior cloud prepared for repeated registrations (index + covariances)."""

    def __init__(self, cloud: PointCloud, k: int = 10, workers: int = 1):
        if len(cloud) < max(_MIN_CLOUD, k):
            raise ValueError(f"target cloud must have at least {max(_MIN_CLOUD, k)} points")
        self.cloud = cloud
        self.index = SpatialIndex(cloud, workers=workers)
        self.covariances = estimate_point_covariances(cloud, k)


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _normal_system(rot, t, local_pts, local_covs, target: RegistrationTarget,
                   max_dist: float):
    """Gauss-Newton H, g, and bookkeeping at the current transform."""
    moved = local_pts @ rot.T + t
    dist, nn = target.index.query(moved)
    mask = dist <= max_dist
    m = int(mask.sum())
    if m < 6:
        return None
    a_rot = moved[mask] - t                              # R @ a
    b = target.cloud.points[nn[mask]]
    e = b - moved[mask]
    cov = target.covariances[nn[mask]] + \
        np.einsum("ij,njk,lk->nil", rot, local_covs[mask], rot)
    w = np.linalg.inv(cov)
    jr = _skew_batch(a_rot)                              # d e / d dtheta
    jr_t_w = np.einsum("nji,njk->nik", jr, w)            # Jr^T W
    h = np.zeros((6, 6))
    h[:3, :3] = np.einsum("nik,nkj->ij", jr_t_w, jr)
    h_rt = -jr_t_w.sum(axis=0)
    h[:3, 3:] = h_rt
    h[3:, :3] = h_rt.T
    h[3:, 3:] = w.sum(axis=0)
    g = np.concatenate([
        np.einsum("nik,nk->i", jr_t_w, e),
        -np.einsum("nik,nk->i", w, e),
    ])
    return h, g, m


def register_gicp(local: PointCloud, prior: PointCloud | RegistrationTarget,
                  initial_guess: Pose = Pose(),
                  config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Align ``local`` onto the prior cloud; returns transform local -> prior.

    Iterates nearest-neighbor correspondence search (pairs beyond
    ``correspondence_distance`` dropped) and a Gauss-Newton step on the summed
    plane-to-plane Mahalanobis residuals, until both increment norms fall
    under the epsilons or ``max_iterations`` is hit. Fitness is the mean
    distance from every local point to its nearest prior point after
    alignment. A degenerate normal matrix (condition number above 1e12) flags
    the result as not converged and omits the covariance.
    """
    target = prior if isinstance(prior, RegistrationTarget) else \
        RegistrationTarget(prior, k=config.knn_for_covariance,
                           workers=config.thread_count)
    if len(local) < _MIN_CLOUD:
        raise ValueError(f"local cloud must have at least {_MIN_CLOUD} points")

    local_covs = estimate_point_covariances(local, config.knn_for_covariance)
    local_pts = local.points
    rot = quat_to_matrix(initial_guess.q)
    t = initial_guess.t.copy()

    converged = False
    degenerate = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        system = _normal_system(rot, t, local_pts, local_covs, target,
                                config.correspondence_distance)
        if system is None:
            degenerate = True
            break
        h, g, _ = system
        if np.linalg.cond(h) > CONDITION_LIMIT:
            degenerate = True
            break
        delta = np.linalg.solve(h, -g)
        dtheta, dt = delta[:3], delta[3:]
        rot = quat_to_matrix(matrix_to_quat(_exp_rotvec(dtheta) @ rot))
        t = t + dt
        if (np.linalg.norm(dt) < config.translation_epsilon
                and np.linalg.norm(dtheta) < config.rotation_epsilon):
            converged = True
            break

    pose = Pose(t=t, q=matrix_to_quat(rot))
    moved = local_pts @ pose.rotation_matrix().T + pose.t
    fitness = float(target.index.query(moved)[0].mean())

    hessian = None
    covariance = None
    n_corr = 0
    if not degenerate:
        system = _normal_system(pose.rotation_matrix(), pose.t, local_pts,
                                local_covs, target, config.correspondence_distance)
        if system is not None and np.linalg.cond(system[0]) <= CONDITION_LIMIT:
            hessian, _, n_corr = system
            if converged:
                covariance = np.linalg.inv(hessian)
                covariance = 0.5 * (covariance + covariance.T)
        else:
            converged = False
    else:
        converged = False

    result = RegistrationResult(transform=pose, converged=converged,
                                fitness=fitness, hessian=hessian,
                                covariance=covariance, iterations=iterations,
                                correspondences=n_corr)
    result.accepted = validate_registration(result, config)
    return result


def _exp_rotvec(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        k = _skew(v)
        return np.eye(3) + k
    axis = v / angle
    k = _skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def validate_registration(result: RegistrationResult,
                          config: RegistrationConfig) -> bool:
    """Gate a registration: converged, fitness and translation under bounds."""
    return bool(result.converged
                and result.fitness < config.fitness_threshold
                and np.linalg.norm(result.transform.t) < config.max_translation)
