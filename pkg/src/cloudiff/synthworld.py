"""Synthetic box-world scenes, trajectories, depth rendering, and sensor noise.

Stands in for a real mapping campaign: axis-aligned buildings on a ground
plane, a camera loop over the scene, exact analytic depth images, uniformly
sampled ground-truth surface clouds, and a seeded noise model that turns the
ground-truth trajectory into drifting odometry and clean depth into noisy
depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depth_filter import (
    EMPTY,
    CameraIntrinsics,
    DepthImage,
    Keyframe,
    read_depth,
    write_depth,
)
from .geometry import Pose, matrix_to_quat, quat_from_rotvec, quat_multiply
from .pose_graph import OdometryMeasurement, load_trajectory, save_trajectory
from . import ply

DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box, named so scene edits can refer to it."""

    name: str
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValueError(f"box {self.name!r} must have positive volume")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p > self.min_corner - margin)
                    and np.all(p < self.max_corner + margin))

    def clearance(self, p) -> float:
        """Distance from p to the box surface (0 inside)."""
        p = np.asarray(p, dtype=np.float64)
        d = np.maximum(self.min_corner - p, p - self.max_corner)
        outside = np.linalg.norm(np.maximum(d, 0.0))
        return float(outside)


@dataclass(frozen=True)
class Scene:
    """Boxes over a rectangular ground plane at z = 0."""

    name: str
    boxes: tuple[Box, ...]
    ground_min: np.ndarray  # (x, y) of the ground rectangle
    ground_max: np.ndarray
    height: float = 20.0

    def __post_init__(self):
        gmin = np.asarray(self.ground_min, dtype=np.float64).reshape(2)
        gmax = np.asarray(self.ground_max, dtype=np.float64).reshape(2)
        object.__setattr__(self, "ground_min", gmin)
        object.__setattr__(self, "ground_max", gmax)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if (np.any(b.min_corner[:2] < gmin - 1e-9)
                    or np.any(b.max_corner[:2] > gmax + 1e-9)
                    or b.max_corner[2] > self.height + 1e-9):
                raise ValueError(f"box {b.name!r} outside the scene bounds")

    def box(self, name: str) -> Box:
        for b in self.boxes:
            if b.name == name:
                return b
        raise KeyError(f"no box named {name!r} in scene {self.name!r}")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space AABB of the whole scene volume."""
        lo = np.array([self.ground_min[0], self.ground_min[1], 0.0])
        hi = np.array([self.ground_max[0], self.ground_max[1], self.height])
        return lo, hi


@dataclass(frozen=True)
class SceneEdit:
    """One edit step: drop a named box and/or add a new one."""

    remove: str | None = None
    add: Box | None = None


@dataclass(frozen=True)
class EditManifest:
    """Record of an applied edit, invertible."""

    removed_box: Box | None
    added_box: Box | None

    def inverse(self) -> SceneEdit:
        return SceneEdit(
            remove=self.added_box.name if self.added_box else None,
            add=self.removed_box,
        )


def apply_edit(scene: Scene, edit: SceneEdit, name: str | None = None) -> tuple[Scene, EditManifest]:
    boxes = list(scene.boxes)
    removed = None
    if edit.remove is not None:
        removed = scene.box(edit.remove)  # raises KeyError when absent
        boxes = [b for b in boxes if b.name != edit.remove]
    if edit.add is not None:
        if any(b.name == edit.add.name for b in boxes):
            raise ValueError(f"box name {edit.add.name!r} already present")
        boxes.append(edit.add)
    changed = Scene(name=name or scene.name + "_changed", boxes=tuple(boxes),
                    ground_min=scene.ground_min, ground_max=scene.ground_max,
                    height=scene.height)
    return changed, EditManifest(removed_box=removed, added_box=edit.add)


def make_scene_pair(scene: Scene, edit: SceneEdit) -> tuple[Scene, Scene, EditManifest]:
    """Original scene plus its edited variant and the manifest of the edit."""
    changed, manifest = apply_edit(scene, edit)
    return scene, changed, manifest


def default_scene(seed: int = 0) -> tuple[Scene, SceneEdit]:
    """Stock 80 x 80 m urban block with ~10 buildings and one swap edit.

    Laid out so the default aerial loop (inset rectangle at 16 m height)
    observes every building and most of the ground: an outer ring of
    buildings around the loop plus one tall block in its center. The removed
    and added buildings face the loop from opposite sides.
    """
    rng = np.random.default_rng(seed)
    # heights stay under ~2x the change threshold so every wall point is
    # within th_ch of a mapped roof or ground-skirt point; taller buildings
    # leave never-viewed mid-wall bands that read as phantom removals
    boxes = [
        Box("s", (44, 30, 0), (56, 38, 5.5)),
        Box("n", (44, 62, 0), (56, 70, 5.0)),
        Box("w", (30, 44, 0), (38, 56, 5.5)),
        Box("e", (62, 44, 0), (70, 56, 5.0)),
        # outer-corner blocks enrich the geometry seen from the loop corners,
        # which keeps window registrations constrained off the ground plane
        Box("osw", (10, 10, 0), (20, 18, 5.0)),
        Box("ose", (80, 12, 0), (90, 20, 4.5)),
        Box("one", (80, 80, 0), (88, 88, 5.0)),
        Box("onw", (12, 80, 0), (22, 88, 4.5)),
    ]
    # jitter footprints a little so different seeds give different worlds
    jittered = []
    for b in boxes:
        d = rng.uniform(-1.0, 1.0, size=2)
        lo = b.min_corner + np.array([d[0], d[1], 0.0])
        hi = b.max_corner + np.array([d[0], d[1], 0.0])
        jittered.append(Box(b.name, lo, hi))
    scene = Scene(name="block", boxes=tuple(jittered),
                  ground_min=(0, 0), ground_max=(100, 100), height=20.0)
    # the east building disappears; the new one takes the empty northwest
    # slot, so both edits sit inside the loop where every wall gets observed
    edit = SceneEdit(remove="e", add=Box("new0", (32, 60, 0), (40, 68, 6.0)))
    return scene, edit


def default_intrinsics() -> CameraIntrinsics:
    """Stock 90-degree-HFOV pinhole camera for rendered datasets."""
    return CameraIntrinsics(fx=48.0, fy=48.0, cx=47.5, cy=35.5, width=96, height=72)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def _sample_rect(rng, origin, edge_u, edge_v, count):
    uv = rng.random((count, 2))
    return origin + uv[:, :1] * edge_u + uv[:, 1:] * edge_v


def sample_surface(scene: Scene, density: float, seed: int = 0):
    """Uniform surface cloud of the scene's exposed surfaces.

    ``density`` is points per square meter; the per-face count is
    round(area * density). Deterministic for a fixed seed.

    Only surfaces a scanner could ever see are sampled: a box resting on the
    ground contributes no bottom face, and ground patches under a box
    footprint are skipped. Points landing inside another box are dropped too.
    Interior points would otherwise poison change detection, since no mapping
    run can ever confirm them.
    """
    from .geometry import PointCloud

    if density <= 0:
        raise ValueError("sampling density must be positive")
    rng = np.random.default_rng(seed)
    grounded = [b for b in scene.boxes if b.min_corner[2] <= 1e-9]

    def exposed(pts, skip=None):
        keep = np.ones(len(pts), dtype=bool)
        for b in scene.boxes:
            if b is skip:
                continue
            inside = np.all((pts > b.min_corner) & (pts < b.max_corner), axis=1)
            keep &= ~inside
        return pts[keep]

    chunks = []
    gsize = scene.ground_max - scene.ground_min
    n_ground = int(round(gsize[0] * gsize[1] * density))
    ground = _sample_rect(rng,
                          np.array([scene.ground_min[0], scene.ground_min[1], 0.0]),
                          np.array([gsize[0], 0.0, 0.0]),
                          np.array([0.0, gsize[1], 0.0]),
                          n_ground)
    under = np.zeros(len(ground), dtype=bool)
    for b in grounded:
        under |= ((ground[:, 0] > b.min_corner[0]) & (ground[:, 0] < b.max_corner[0])
                  & (ground[:, 1] > b.min_corner[1]) & (ground[:, 1] < b.max_corner[1]))
    chunks.append(ground[~under])
    for b in scene.boxes:
        lo, hi = b.min_corner, b.max_corner
        ex, ey, ez = hi - lo
        faces = [
            ((lo[0], lo[1], hi[2]), (ex, 0, 0), (0, ey, 0)),   # top
            (lo, (ex, 0, 0), (0, 0, ez)),                      # y = lo
            ((lo[0], hi[1], lo[2]), (ex, 0, 0), (0, 0, ez)),   # y = hi
            (lo, (0, ey, 0), (0, 0, ez)),                      # x = lo
            ((hi[0], lo[1], lo[2]), (0, ey, 0), (0, 0, ez)),   # x = hi
        ]
        if b not in grounded:
            faces.append((lo, (ex, 0, 0), (0, ey, 0)))         # bottom
        for origin, eu, ev in faces:
            area = np.linalg.norm(np.cross(eu, ev))
            n = int(round(area * density))
            if n:
                pts = _sample_rect(rng, np.asarray(origin, dtype=np.float64),
                                   np.asarray(eu, dtype=np.float64),
                                   np.asarray(ev, dtype=np.float64), n)
                chunks.append(exposed(pts, skip=b))
    return PointCloud(np.vstack(chunks), frame_id="world")


# ---------------------------------------------------------------------------
# Analytic depth rendering
# ---------------------------------------------------------------------------

def render_depth(scene: Scene, pose: Pose, intrinsics: CameraIntrinsics) -> DepthImage:
    """Exact per-pixel z-depth of the nearest surface, EMPTY where none.

    The camera must be outside every box. Because pixel rays are scaled to
    z = 1 in the camera frame, the ray parameter of a hit equals its z-depth.
    """
    for b in scene.boxes:
        if b.contains(pose.t):
            raise ValueError(f"camera pose inside box {b.name!r}")
    rays_cam = intrinsics.pixel_rays().reshape(-1, 3)
    dirs = rays_cam @ pose.rotation_matrix().T
    origin = pose.t
    n = dirs.shape[0]
    depth = np.full(n, np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for b in scene.boxes:
            t1 = (b.min_corner - origin) * inv
            t2 = (b.max_corner - origin) * inv
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-9)
            depth[hit] = np.minimum(depth[hit], tmin[hit])
        # ground plane z = 0, bounded by the scene's ground rectangle
        dz = dirs[:, 2]
        t_g = np.where(dz != 0.0, -origin[2] / dz, np.inf)
        px = origin[0] + t_g * dirs[:, 0]
        py = origin[1] + t_g * dirs[:, 1]
        ok = ((t_g > 1e-9) & np.isfinite(t_g)
              & (px >= scene.ground_min[0]) & (px <= scene.ground_max[0])
              & (py >= scene.ground_min[1]) & (py <= scene.ground_max[1]))
        depth[ok] = np.minimum(depth[ok], t_g[ok])

    depth[~np.isfinite(depth)] = EMPTY
    return DepthImage(depth.reshape(intrinsics.height, intrinsics.width).astype(np.float32))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Timed camera poses at a fixed rate."""

    timestamps: np.ndarray
    poses: tuple[Pose, ...]
    height: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses must have equal length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)


def _rounded_rect_path(lo, hi, radius):
    """Arc-length parametrized rounded rectangle in the z = 0 plane.

    Returns (total_length, position_fn(s) -> (x, y)).
    """
    w = hi[0] - lo[0]
    h = hi[1] - lo[1]
    r = min(radius, 0.49 * w, 0.49 * h)
    sx = w - 2 * r
    sy = h - 2 * r
    quarter = 0.5 * np.pi * r
    # segments: +x edge, corner, +y edge, corner, -x edge, corner, -y edge, corner
    lengths = [sx, quarter, sy, quarter, sx, quarter, sy, quarter]
    total = sum(lengths)
    cx0, cy0 = lo[0] + r, lo[1] + r
    cx1, cy1 = hi[0] - r, hi[1] - r

    def pos(s):
        s = s % total
        for seg, length in enumerate(lengths):
            if s <= length or seg == 7:
                break
            s -= length
        if seg == 0:
            return (cx0 + s, lo[1])
        if seg == 1:
            a = s / r
            return (cx1 + r * np.sin(a), cy0 - r * np.cos(a))
        if seg == 2:
            return (hi[0], cy0 + s)
        if seg == 3:
            a = s / r
            return (cx1 + r * np.cos(a), cy1 + r * np.sin(a))
        if seg == 4:
            return (cx1 - s, hi[1])
        if seg == 5:
            a = s / r
            return (cx0 - r * np.sin(a), cy1 + r * np.cos(a))
        if seg == 6:
            return (lo[0], cy1 - s)
        a = s / r
        return (cx0 - r * np.cos(a), cy0 - r * np.sin(a))

    return total, pos


def camera_pose(position, yaw: float, pitch_down: float) -> Pose:
    """Camera-in-world pose looking along ``yaw`` with a downward pitch.

    Image x points to the flight's right, image y roughly downward, optical
    axis forward/down.
    """
    cp, sp = np.cos(pitch_down), np.sin(pitch_down)
    cy, sy = np.cos(yaw), np.sin(yaw)
    view = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(view, right)
    rot = np.stack([right, down, view], axis=1)
    return Pose(t=np.asarray(position, dtype=np.float64), q=matrix_to_quat(rot))


def generate_trajectory(scene: Scene, height: float = 16.0, speed: float = 4.0,
                        rate: float = 5.0, pitch_down_deg: float = 45.0,
                        margin_fraction: float = 0.25,
                        corner_radius: float = 8.0) -> Trajectory:
    """One smooth loop around the scene interior with yaw tangent to the path.

    The ground track is a rounded rectangle inset from the scene bounds by
    ``margin_fraction`` per side; changing ``height`` changes only z. The
    defaults fly above the stock scene's rooftops looking steeply down, which
    keeps free-probe rays away from unseen ground and roofs in view.
    """
    if speed <= 0 or rate <= 0:
        raise ValueError("speed and rate must be positive")
    gmin, gmax = scene.ground_min, scene.ground_max
    size = gmax - gmin
    lo = gmin + margin_fraction * size
    hi = gmax - margin_fraction * size
    if np.any(hi - lo < 1e-6):
        raise ValueError("scene too small for the requested loop")
    total, pos = _rounded_rect_path(lo, hi, corner_radius)
    n = int(np.floor(total / speed * rate))
    if n < 2:
        raise ValueError("requested loop is degenerate (fewer than 2 keyframes)")
    pitch = np.deg2rad(pitch_down_deg)
    timestamps = np.arange(n) / rate
    poses = []
    ds = 1e-4 * total
    for k in range(n):
        s = speed * timestamps[k]
        x, y = pos(s)
        x2, y2 = pos(s + ds)
        yaw = np.arctan2(y2 - y, x2 - x)
        p = np.array([x, y, height])
        pose = camera_pose(p, yaw, pitch)
        for b in scene.boxes:
            if b.contains(pose.t):
                raise ValueError(f"trajectory collides with box {b.name!r} at t={timestamps[k]:.2f}")
        poses.append(pose)
    return Trajectory(timestamps=timestamps, poses=tuple(poses), height=height)


def render_trajectory(scene: Scene, trajectory: Trajectory,
                      intrinsics: CameraIntrinsics) -> list[DepthImage]:
    return [render_depth(scene, pose, intrinsics) for pose in trajectory.poses]


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise densities driving the odometry and depth corruption.

    sigma_g / sigma_a are gyro / accelerometer white-noise densities,
    sigma_bg / sigma_ba the corresponding bias random walks, sigma_img the
    relative depth noise scale (std = sigma_img * depth).
    """

    sigma_g: float = 0.0
    sigma_a: float = 0.0
    sigma_bg: float = 0.0
    sigma_ba: float = 0.0
    sigma_img: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "sigma_img"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


ZERO_NOISE = NoiseSpec()
SMALL_NOISE = NoiseSpec(sigma_g=4.0e-4, sigma_a=3.0e-3, sigma_bg=4.0e-5,
                        sigma_ba=3.0e-4, sigma_img=0.02)
BIG_NOISE = NoiseSpec(sigma_g=4.0e-3, sigma_a=3.0e-2, sigma_bg=4.0e-4,
                      sigma_ba=3.0e-3, sigma_img=0.04)

NOISE_REGIMES = {"none": ZERO_NOISE, "small": SMALL_NOISE, "big": BIG_NOISE}

# cap on information diagonals so zero-noise runs stay finite
_MAX_INFORMATION = 1e12


def corrupt(trajectory: Trajectory, depth_stream: list[DepthImage],
            noise: NoiseSpec) -> tuple[list[OdometryMeasurement], list[DepthImage]]:
    """Noisy odometry edges and depth images from ground truth.

    The relative pose of each consecutive keyframe pair is perturbed by
    integrated white noise plus a random-walk bias over the inter-frame
    interval; depth pixels get zero-mean Gaussian noise with std
    sigma_img * depth. Deterministic per seed.
    """
    rng = np.random.default_rng(noise.seed)
    ts = trajectory.timestamps
    poses = trajectory.poses
    edges = []
    bias_g = np.zeros(3)
    bias_a = np.zeros(3)
    for k in range(1, len(poses)):
        dt = ts[k] - ts[k - 1]
        elapsed = ts[k] - ts[0]
        rel = poses[k - 1].inverse() * poses[k]
        bias_g = bias_g + noise.sigma_bg * np.sqrt(dt) * rng.standard_normal(3)
        bias_a = bias_a + noise.sigma_ba * np.sqrt(dt) * rng.standard_normal(3)
        dtheta = noise.sigma_g * np.sqrt(dt) * rng.standard_normal(3) + bias_g * dt
        dp = noise.sigma_a * dt ** 1.5 * rng.standard_normal(3) + 0.5 * bias_a * dt * dt
        z = Pose(t=rel.t + dp, q=quat_multiply(rel.q, quat_from_rotvec(dtheta)))
        var_theta = noise.sigma_g ** 2 * dt + (noise.sigma_bg ** 2 * elapsed) * dt ** 2
        var_p = noise.sigma_a ** 2 * dt ** 3 + 0.25 * (noise.sigma_ba ** 2 * elapsed) * dt ** 4
        info = np.diag(np.concatenate([
            np.full(3, min(1.0 / max(var_theta, 1e-300), _MAX_INFORMATION)),
            np.full(3, min(1.0 / max(var_p, 1e-300), _MAX_INFORMATION)),
        ]))
        edges.append(OdometryMeasurement(i=k - 1, j=k, relative=z, information=info))

    noisy_depths = []
    for img in depth_stream:
        if noise.sigma_img == 0.0:
            noisy_depths.append(img)
            continue
        d = img.data.astype(np.float64)
        pert = rng.standard_normal(d.shape)
        noisy = np.where(d != EMPTY,
                         np.maximum(d + noise.sigma_img * d * pert, 1e-3),
                         EMPTY)
        noisy_depths.append(DepthImage(noisy.astype(np.float32)))
    return edges, noisy_depths


def integrate_odometry(start: Pose, edges: list[OdometryMeasurement]) -> list[Pose]:
    """Chain relative measurements into an absolute trajectory from ``start``."""
    poses = [start]
    for e in edges:
        poses.append(poses[-1] * e.relative)
    return poses


def _information_only(timestamps, noise: NoiseSpec):
    ts = np.asarray(timestamps, dtype=np.float64)
    edges = []
    for k in range(1, len(ts)):
        dt = ts[k] - ts[k - 1]
        elapsed = ts[k] - ts[0]
        var_theta = noise.sigma_g ** 2 * dt + (noise.sigma_bg ** 2 * elapsed) * dt ** 2
        var_p = noise.sigma_a ** 2 * dt ** 3 + 0.25 * (noise.sigma_ba ** 2 * elapsed) * dt ** 4
        info = np.diag(np.concatenate([
            np.full(3, min(1.0 / max(var_theta, 1e-300), _MAX_INFORMATION)),
            np.full(3, min(1.0 / max(var_p, 1e-300), _MAX_INFORMATION)),
        ]))
        edges.append(OdometryMeasurement(i=k - 1, j=k, relative=Pose(), information=info))
    return edges, None


# ---------------------------------------------------------------------------
# Structured depth corruptions (mirror-like ghosts, low-light dropout)
# ---------------------------------------------------------------------------

def corrupt_depth_ghost(img: DepthImage, rng: np.random.Generator,
                        patch_fraction: float = 0.15) -> DepthImage:
    """Replace one random patch with reflected (doubled) depth, like a mirror."""
    h, w = img.data.shape
    ph = max(1, int(h * patch_fraction))
    pw = max(1, int(w * patch_fraction))
    r0 = int(rng.integers(0, h - ph + 1))
    c0 = int(rng.integers(0, w - pw + 1))
    d = img.data.copy()
    patch = d[r0:r0 + ph, c0:c0 + pw]
    d[r0:r0 + ph, c0:c0 + pw] = np.where(patch != EMPTY, patch * 2.0, EMPTY)
    return DepthImage(d)


def corrupt_depth_dropout(img: DepthImage, rng: np.random.Generator,
                          drop_rate: float = 0.5) -> DepthImage:
    """Randomly blank a fraction of valid pixels, like a dark scene."""
    d = img.data.copy()
    drop = rng.random(d.shape) < drop_rate
    d[drop] = EMPTY
    return DepthImage(d)


# ---------------------------------------------------------------------------
# Pose corruption for sensitivity studies
# ---------------------------------------------------------------------------

def perturb_poses_drift(poses, scale: float, seed: int = 0,
                        yaw_scale_deg: float = 2.0) -> list[Pose]:
    """Smooth random-walk pose corruption of ~``scale`` meters magnitude.

    The walk is rescaled so its mean 3D displacement norm over the trajectory
    matches the typical norm of a zero-mean Gaussian offset with per-axis
    standard deviation ``scale`` (about 1.6 * scale); the accompanying yaw
    walk is normalized to a mean magnitude of ``yaw_scale_deg``. Models
    slowly accumulating estimation error with a seed-independent amplitude.
    """
    n = len(poses)
    rng = np.random.default_rng(seed)
    walk = np.cumsum(rng.standard_normal((n, 3)), axis=0)
    # gravity keeps height well observed, so drift is mostly horizontal + yaw
    walk[:, 2] *= 0.2
    norms = np.linalg.norm(walk, axis=1)
    mean_norm = norms.mean() if norms.mean() > 0 else 1.0
    walk *= (1.5958 * scale) / mean_norm
    yaw_walk = np.cumsum(rng.standard_normal(n))
    yaw_mean = np.abs(yaw_walk).mean() or 1.0
    yaw_walk *= np.deg2rad(yaw_scale_deg) / yaw_mean
    out = []
    for k, pose in enumerate(poses):
        dq = quat_from_rotvec([0.0, 0.0, yaw_walk[k]])
        out.append(Pose(t=pose.t + walk[k], q=quat_multiply(dq, pose.q)))
    return out


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------

def _box_to_json(b: Box) -> dict:
    return {"name": b.name, "min": b.min_corner.tolist(), "max": b.max_corner.tolist()}


def _box_from_json(d) -> Box:
    return Box(d["name"], d["min"], d["max"])


def _scene_to_json(s: Scene) -> dict:
    return {
        "name": s.name,
        "ground_min": s.ground_min.tolist(),
        "ground_max": s.ground_max.tolist(),
        "height": s.height,
        "boxes": [_box_to_json(b) for b in s.boxes],
    }


def _scene_from_json(d) -> Scene:
    return Scene(name=d["name"], boxes=tuple(_box_from_json(b) for b in d["boxes"]),
                 ground_min=d["ground_min"], ground_max=d["ground_max"],
                 height=d["height"])


@dataclass
class Dataset:
    """In-memory view of one generated dataset directory."""

    root: Path
    original: Scene
    changed: Scene
    manifest: EditManifest
    intrinsics: CameraIntrinsics
    noise: NoiseSpec
    timestamps: np.ndarray
    gt_poses: list[Pose]
    odom_poses: list[Pose]
    prior_cloud: object
    changed_cloud: object

    def keyframes(self, poses=None) -> list[Keyframe]:
        """Keyframes with depth loaded from disk; poses default to ground truth."""
        poses = list(poses) if poses is not None else self.gt_poses
        frames = []
        for k, ts in enumerate(self.timestamps):
            depth = read_depth(self.root / "depth" / f"{k:06d}.bin")
            frames.append(Keyframe(id=k, timestamp=float(ts), pose=poses[k],
                                   depth=depth, intrinsics=self.intrinsics))
        return frames

    def odometry_edges(self) -> list[OdometryMeasurement]:
        """Relative odometry measurements re-derived from the stored trajectory."""
        edges = []
        info_edges, _ = _information_only(self.timestamps, self.noise)
        for k in range(1, len(self.odom_poses)):
            rel = self.odom_poses[k - 1].inverse() * self.odom_poses[k]
            edges.append(OdometryMeasurement(i=k - 1, j=k, relative=rel,
                                             information=info_edges[k - 1].information))
        return edges


def write_dataset(root, original: Scene, changed: Scene, manifest: EditManifest,
                  trajectory: Trajectory, intrinsics: CameraIntrinsics,
                  depths: list[DepthImage], odom_poses, prior_cloud,
                  changed_cloud, noise: NoiseSpec, extra_meta: dict | None = None) -> Path:
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    scene_doc = {
        "original": _scene_to_json(original),
        "changed": _scene_to_json(changed),
        "edit": {
            "removed": _box_to_json(manifest.removed_box) if manifest.removed_box else None,
            "added": _box_to_json(manifest.added_box) if manifest.added_box else None,
        },
    }
    (root / "scene.json").write_text(json.dumps(scene_doc, indent=2, sort_keys=True))
    meta = {
        "version": DATASET_VERSION,
        "intrinsics": {"fx": intrinsics.fx, "fy": intrinsics.fy,
                       "cx": intrinsics.cx, "cy": intrinsics.cy,
                       "width": intrinsics.width, "height": intrinsics.height},
        "noise": {"sigma_g": noise.sigma_g, "sigma_a": noise.sigma_a,
                  "sigma_bg": noise.sigma_bg, "sigma_ba": noise.sigma_ba,
                  "sigma_img": noise.sigma_img, "seed": noise.seed},
        "keyframes": len(trajectory),
        "height": trajectory.height,
    }
    meta.update(extra_meta or {})
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    ply.write_ply(root / "prior.ply", prior_cloud)
    ply.write_ply(root / "changed.ply", changed_cloud)
    save_trajectory(root / "traj_gt.txt", trajectory.timestamps, trajectory.poses)
    save_trajectory(root / "odometry.txt", trajectory.timestamps, odom_poses)
    for k, img in enumerate(depths):
        write_depth(root / "depth" / f"{k:06d}.bin", img)
    return root


def generate_dataset(root, seed: int = 0, noise: NoiseSpec | str = "none",
                     density: float = 4.0, height: float = 16.0,
                     speed: float = 4.0, rate: float = 5.0,
                     pitch_down_deg: float = 45.0, variant: str = "none",
                     intrinsics: CameraIntrinsics | None = None,
                     scene_seed: int | None = None) -> Path:
    """Generate one complete dataset directory.

    The camera flies the changed world; the original scene's surface cloud
    becomes the (outdated) prior map. Everything is deterministic in
    ``seed``: scene jitter, surface sampling, sensor noise, and the optional
    structured depth corruption (``variant``: none | mirror | dark).
    """
    if isinstance(noise, str):
        noise = NOISE_REGIMES[noise]
    if variant not in ("none", "mirror", "dark"):
        raise ValueError(f"unknown variant {variant!r}")
    intrinsics = intrinsics or default_intrinsics()
    streams = np.random.SeedSequence(seed).spawn(4)
    scene, edit = default_scene(seed if scene_seed is None else scene_seed)
    original, changed, manifest = make_scene_pair(scene, edit)
    trajectory = generate_trajectory(changed, height=height, speed=speed,
                                     rate=rate, pitch_down_deg=pitch_down_deg)
    depths = render_trajectory(changed, trajectory, intrinsics)
    noise = NoiseSpec(sigma_g=noise.sigma_g, sigma_a=noise.sigma_a,
                      sigma_bg=noise.sigma_bg, sigma_ba=noise.sigma_ba,
                      sigma_img=noise.sigma_img,
                      seed=int(streams[0].generate_state(1)[0] % (2 ** 31)))
    edges, noisy_depths = corrupt(trajectory, depths, noise)
    if variant != "none":
        rng = np.random.default_rng(streams[3])
        out = []
        for k, img in enumerate(noisy_depths):
            if variant == "mirror" and k % 5 == 0:
                img = corrupt_depth_ghost(img, rng)
            elif variant == "dark":
                img = corrupt_depth_dropout(img, rng, drop_rate=0.4)
            out.append(img)
        noisy_depths = out
    odom_poses = integrate_odometry(trajectory.poses[0], edges)
    prior_cloud = sample_surface(original, density,
                                 seed=int(streams[1].generate_state(1)[0] % (2 ** 31)))
    changed_cloud = sample_surface(changed, density,
                                   seed=int(streams[2].generate_state(1)[0] % (2 ** 31)))
    return write_dataset(root, original, changed, manifest, trajectory,
                         intrinsics, noisy_depths, odom_poses, prior_cloud,
                         changed_cloud, noise,
                         extra_meta={"seed": seed, "variant": variant,
                                     "density": density, "rate": rate,
                                     "speed": speed,
                                     "pitch_down_deg": pitch_down_deg})


def load_dataset(root) -> Dataset:
    root = Path(root)
    scene_doc = json.loads((root / "scene.json").read_text())
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("version") != DATASET_VERSION:
        raise ValueError(f"{root}: unsupported dataset version {meta.get('version')}")
    original = _scene_from_json(scene_doc["original"])
    changed = _scene_from_json(scene_doc["changed"])
    manifest = EditManifest(
        removed_box=_box_from_json(scene_doc["edit"]["removed"]) if scene_doc["edit"]["removed"] else None,
        added_box=_box_from_json(scene_doc["edit"]["added"]) if scene_doc["edit"]["added"] else None,
    )
    mi = meta["intrinsics"]
    intrinsics = CameraIntrinsics(fx=mi["fx"], fy=mi["fy"], cx=mi["cx"], cy=mi["cy"],
                                  width=mi["width"], height=mi["height"])
    mn = meta["noise"]
    noise = NoiseSpec(sigma_g=mn["sigma_g"], sigma_a=mn["sigma_a"],
                      sigma_bg=mn["sigma_bg"], sigma_ba=mn["sigma_ba"],
                      sigma_img=mn["sigma_img"], seed=mn["seed"])
    ts_gt, gt_poses = load_trajectory(root / "traj_gt.txt")
    _, odom_poses = load_trajectory(root / "odometry.txt")
    prior_cloud = ply.read_ply(root / "prior.ply", frame_id="world")
    changed_cloud = ply.read_ply(root / "changed.ply", frame_id="world")
    return Dataset(root=root, original=original, changed=changed, manifest=manifest,
                   intrinsics=intrinsics, noise=noise, timestamps=ts_gt,
                   gt_poses=gt_poses, odom_poses=odom_poses,
                   prior_cloud=prior_cloud, changed_cloud=changed_cloud)


def validate_dataset(root) -> list[str]:
    """Structural check of a dataset directory; returns a list of problems."""
    root = Path(root)
    problems = []
    for name in ("scene.json", "meta.json", "prior.ply", "changed.ply",
                 "traj_gt.txt", "odometry.txt"):
        if not (root / name).is_file():
            problems.append(f"missing {name}")
    if problems:
        return problems
    try:
        ds = load_dataset(root)
    except Exception as exc:
        return [f"unreadable dataset: {exc}"]
    n = len(ds.timestamps)
    depth_files = sorted((root / "depth").glob("*.bin"))
    if len(depth_files) != n:
        problems.append(f"expected {n} depth files, found {len(depth_files)}")
    if len(ds.odom_poses) != n:
        problems.append("odometry length differs from ground truth")
    if ds.prior_cloud.is_empty() or ds.changed_cloud.is_empty():
        problems.append("empty prior or changed cloud")
    return problems
