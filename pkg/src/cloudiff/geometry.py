"""Core geometric types: points, clouds, rigid poses, and spatial queries.

Conventions used across the package:

- World frame is z-up, units are meters.
- Camera frame is z-forward (optical axis), x-right, y-down.
- Quaternions are Hamilton convention, stored as (w, x, y, z), unit norm.
- Point clouds are (N, 3) float64 arrays; a single point is a length-3 array.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# A point is any array-like of 3 finite floats; module functions normalize to
# np.ndarray internally.
Point3 = np.ndarray


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Quaternion helpers (Hamilton convention, (w, x, y, z))
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    q = q / n
    # fix the double-cover sign to keep representations stable
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_rotate(q, points) -> np.ndarray:
    """Rotate one or many points by unit quaternion q."""
    return _as_points(points) @ quat_to_matrix(q).T


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_from_rotvec(v) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_to_rotvec(q) -> np.ndarray:
    """Log map: unit quaternion to rotation vector, angle in [0, pi]."""
    q = quat_normalize(q)
    w = np.clip(q[0], -1.0, 1.0)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec  # small-angle limit
    angle = 2.0 * np.arctan2(s, w)
    return vec / s * angle


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_left_matrix(q) -> np.ndarray:
    """4x4 L(q) such that q * p == L(q) @ p for quaternions as 4-vectors."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right_matrix(q) -> np.ndarray:
    """4x4 R(q) such that p * q == R(q) @ p for quaternions as 4-vectors."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform (rotation + translation) of a body frame in a parent frame.

    ``p_parent = q * p_body + t``. Quaternion is (w, x, y, z), renormalized on
    construction so composition chains cannot drift.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        q = quat_normalize(self.q)
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(t=m[:3, 3], q=matrix_to_quat(m[:3, :3]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(p) = self(other(p))."""
        return Pose(t=quat_rotate(self.q, other.t)[0] + self.t,
                    q=quat_multiply(self.q, other.q))

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose(t=-quat_rotate(qi, self.t)[0], q=qi)

    def apply(self, points) -> np.ndarray:
        """Transform (N, 3) points from the body frame into the parent frame."""
        return _as_points(points) @ quat_to_matrix(self.q).T + self.t


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points in a named coordinate frame.

    Order is stable: transforms and filters preserve the input order
    (subsetting keeps relative order).
    """

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def is_empty(self) -> bool:
        return len(self) == 0

    def select(self, mask_or_indices) -> "PointCloud":
        return PointCloud(self.points[mask_or_indices], frame_id=self.frame_id)

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.points, other.points]),
                          frame_id=self.frame_id)

    @staticmethod
    def empty(frame_id: str = "") -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), frame_id=frame_id)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply a rigid transform to every point; length and order are preserved."""
    if cloud.is_empty():
        return cloud
    return PointCloud(pose.apply(cloud.points), frame_id=cloud.frame_id)


# ---------------------------------------------------------------------------
# Spatial queries
# ---------------------------------------------------------------------------

class SpatialIndex:
    """Static nearest-neighbor index over a fixed point cloud.

    Backed by a kd-tree built once at construction; the indexed cloud must not
    change afterwards. Query results are identical to a brute-force scan.
    """

    def __init__(self, cloud: PointCloud | np.ndarray, workers: int = 1):
        pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
        self.points = pts
        self.workers = int(workers)
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indexed point for each query: (distances, indices)."""
        if self._tree is None:
            raise ValueError("cannot query an empty spatial index")
        pts = _as_points(points)
        d, i = self._tree.query(pts, k=1, workers=self.workers)
        return np.atleast_1d(d), np.atleast_1d(i)

    def nearest_distances(self, points) -> np.ndarray:
        return self.query(points)[0]

    def radius(self, point, r: float) -> np.ndarray:
        """Indices of all indexed points within distance r of ``point``."""
        if self._tree is None:
            raise ValueError("cannot query an empty spatial index")
        idx = self._tree.query_ball_point(np.asarray(point, dtype=np.float64), r)
        return np.asarray(sorted(idx), dtype=np.intp)

    def knn(self, points, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self._tree is None:
            raise ValueError("cannot query an empty spatial index")
        d, i = self._tree.query(_as_points(points), k=k, workers=self.workers)
        return d, i


def nearest_distance(p, index: SpatialIndex) -> float:
    """Euclidean distance from p to the closest indexed point."""
    return float(index.nearest_distances(np.asarray(p, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# Voxel downsampling
# ---------------------------------------------------------------------------

def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    """Integer voxel coordinates, floor(coord / resolution) per axis.

    Points exactly on a voxel boundary belong to the higher-index voxel.
    """
    return np.floor(np.asarray(points, dtype=np.float64) / float(resolution)).astype(np.int64)


def voxel_downsample(cloud: PointCloud, resolution: float) -> PointCloud:
    """Reduce a cloud to one centroid per occupied voxel of edge ``resolution``.

    Output order follows ascending voxel key (lexicographic x, y, z).
    """
    if resolution <= 0.0:
        raise ValueError(f"voxel resolution must be positive, got {resolution}")
    if cloud.is_empty():
        return cloud
    keys = voxel_keys(cloud.points, resolution)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    sorted_pts = cloud.points[order]
    boundary = np.ones(len(sorted_keys), dtype=bool)
    boundary[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    group = np.cumsum(boundary) - 1
    n_groups = group[-1] + 1
    sums = np.zeros((n_groups, 3))
    np.add.at(sums, group, sorted_pts)
    counts = np.bincount(group, minlength=n_groups).astype(np.float64)
    return PointCloud(sums / counts[:, None], frame_id=cloud.frame_id)
