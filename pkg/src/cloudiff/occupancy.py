"""Three-state voxel map with camera ray casting; realizes the observed area.

Voxels are UNKNOWN until touched by a ray. Rays mark every voxel they pass
through FREE and, for surface returns, their endpoint voxel OCCUPIED.
OCCUPIED always wins over FREE, which makes the final state independent of
the order rays are cast in. The observed area is the set of non-UNKNOWN
voxels.

Traversal is an exact incremental grid walk (step to the nearest voxel
boundary per iteration), vectorized over all rays of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .depth_filter import Keyframe
from .geometry import Pose

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is optional
    njit = None
    _HAVE_NUMBA = False


class VoxelState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


class RayKind(IntEnum):
    FREE_PROBE = 0   # synthetic endpoint, marks free space only
    SURFACE = 1      # depth return, endpoint voxel is occupied


@dataclass(frozen=True)
class RayBatch:
    """A bundle of rays sharing one origin (a camera center)."""

    origin: np.ndarray
    endpoints: np.ndarray
    kinds: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        endpoints = np.asarray(self.endpoints, dtype=np.float64).reshape(-1, 3)
        kinds = np.asarray(self.kinds, dtype=np.int8).reshape(-1)
        if len(kinds) != len(endpoints):
            raise ValueError("one kind per endpoint required")
        if not (np.all(np.isfinite(origin)) and np.all(np.isfinite(endpoints))):
            raise ValueError("ray origin and endpoints must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "endpoints", endpoints)
        object.__setattr__(self, "kinds", kinds)

    def __len__(self) -> int:
        return len(self.endpoints)


class OccupancyMap:
    """Axis-aligned voxel lattice over a bounding region at fixed resolution."""

    def __init__(self, resolution: float, min_corner, max_corner):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        lo = np.asarray(min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(max_corner, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValueError("bounding region must have positive volume")
        self.resolution = float(resolution)
        self.min_corner = lo
        self.max_corner = hi
        self.shape = np.maximum(np.ceil((hi - lo) / resolution - 1e-9), 1).astype(np.int64)
        self.states = np.zeros(tuple(self.shape), dtype=np.uint8)

    # -- voxel addressing ---------------------------------------------------

    def voxel_of(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((pts - self.min_corner) / self.resolution).astype(np.int64)

    def in_grid(self, voxels) -> np.ndarray:
        v = np.asarray(voxels).reshape(-1, 3)
        return np.all((v >= 0) & (v < self.shape), axis=1)

    def voxel_centers(self, voxels) -> np.ndarray:
        return self.min_corner + (np.asarray(voxels, dtype=np.float64) + 0.5) * self.resolution

    # -- queries ------------------------------------------------------------

    def state_of(self, points) -> np.ndarray:
        vox = self.voxel_of(points)
        ok = self.in_grid(vox)
        out = np.zeros(len(vox), dtype=np.uint8)
        if ok.any():
            v = vox[ok]
            out[ok] = self.states[v[:, 0], v[:, 1], v[:, 2]]
        return out

    def contains_points(self, points) -> np.ndarray:
        """True where the point's voxel has been observed (FREE or OCCUPIED)."""
        return self.state_of(points) != VoxelState.UNKNOWN

    def observed_count(self) -> int:
        return int(np.count_nonzero(self.states))

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.states == VoxelState.OCCUPIED))

    def observed_voxels(self) -> np.ndarray:
        return np.argwhere(self.states != VoxelState.UNKNOWN)

    # -- updates ------------------------------------------------------------

    def _mark_free(self, voxels: np.ndarray) -> None:
        if len(voxels) == 0:
            return
        v = voxels[self.in_grid(voxels)]
        idx = (v[:, 0], v[:, 1], v[:, 2])
        np.maximum.at(self.states, idx, np.uint8(VoxelState.FREE))

    def _mark_occupied(self, voxels: np.ndarray) -> None:
        if len(voxels) == 0:
            return
        v = voxels[self.in_grid(voxels)]
        self.states[v[:, 0], v[:, 1], v[:, 2]] = np.uint8(VoxelState.OCCUPIED)


def _clip_to_box(origin, deltas, lo, hi):
    """Largest segment parameter (cap 1) keeping origin + s*delta inside [lo, hi]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (lo - origin) / deltas
        s2 = (hi - origin) / deltas
        s_far = np.where(np.isnan(s1), np.inf, np.maximum(s1, s2))
    s_exit = s_far.min(axis=1)
    return np.minimum(1.0, np.nan_to_num(s_exit, nan=np.inf, posinf=np.inf))


if _HAVE_NUMBA:
    @njit(cache=True)
    def _walk_kernel(states, s0, s1, s2, end_cell, step, tmax, tdelta):
        nx, ny, nz = states.shape
        for r in range(end_cell.shape[0]):
            cx, cy, cz = s0, s1, s2
            ex, ey, ez = end_cell[r, 0], end_cell[r, 1], end_cell[r, 2]
            if cx == ex and cy == ey and cz == ez:
                continue
            if states[cx, cy, cz] == 0:
                states[cx, cy, cz] = 1
            tx, ty, tz = tmax[r, 0], tmax[r, 1], tmax[r, 2]
            while True:
                if tx <= ty:
                    axis = 0 if tx <= tz else 2
                else:
                    axis = 1 if ty <= tz else 2
                if axis == 0:
                    if tx > 1.0 + 1e-12:
                        break
                    cx += step[r, 0]
                    tx += tdelta[r, 0]
                elif axis == 1:
                    if ty > 1.0 + 1e-12:
                        break
                    cy += step[r, 1]
                    ty += tdelta[r, 1]
                else:
                    if tz > 1.0 + 1e-12:
                        break
                    cz += step[r, 2]
                    tz += tdelta[r, 2]
                if cx == ex and cy == ey and cz == ez:
                    break
                if cx < 0 or cy < 0 or cz < 0 or cx >= nx or cy >= ny or cz >= nz:
                    break
                if states[cx, cy, cz] == 0:
                    states[cx, cy, cz] = 1


def _walk_numpy(states, start_cell, end_cell, step, tmax, tdelta):
    n = len(end_cell)
    cur = np.tile(start_cell, (n, 1))
    active = np.any(cur != end_cell, axis=1)
    passed: list[np.ndarray] = []
    if active.any():
        passed.append(start_cell.reshape(1, 3))
    max_steps = int(np.abs(end_cell - start_cell).sum(axis=1).max() if n else 0) + 3
    for _ in range(max_steps):
        if not active.any():
            break
        ids = np.nonzero(active)[0]
        # rays with no boundary crossing left inside the segment are finished
        exhausted = tmax[ids].min(axis=1) > 1.0 + 1e-12
        active[ids[exhausted]] = False
        ids = ids[~exhausted]
        if len(ids) == 0:
            break
        axis = np.argmin(tmax[ids], axis=1)
        cur[ids, axis] += step[ids, axis]
        tmax[ids, axis] += tdelta[ids, axis]
        arrived = np.all(cur[ids] == end_cell[ids], axis=1)
        if (~arrived).any():
            passed.append(cur[ids[~arrived]].copy())
        active[ids[arrived]] = False
    if passed:
        cells = np.unique(np.vstack(passed), axis=0)
        ok = np.all((cells >= 0) & (cells < states.shape), axis=1)
        cells = cells[ok]
        idx = (cells[:, 0], cells[:, 1], cells[:, 2])
        np.maximum.at(states, idx, np.uint8(1))


def cast_rays(grid: OccupancyMap, batch: RayBatch, engine: str = "auto") -> OccupancyMap:
    """Mark every voxel each ray passes through; updates the map in place.

    Pass-through voxels become FREE unless already OCCUPIED. SURFACE endpoints
    mark their voxel OCCUPIED; FREE_PROBE endpoints mark it FREE. Rays leaving
    the bounding region are clipped at the boundary (a clipped surface return
    marks nothing occupied since the surface lies outside the map).

    ``engine`` picks the traversal implementation: "auto" uses the compiled
    kernel when available, "numpy" forces the vectorized fallback; both walk
    the identical boundary sequence.
    """
    if len(batch) == 0:
        return grid
    origin = batch.origin
    if not bool(np.all((origin >= grid.min_corner) & (origin <= grid.max_corner))):
        raise ValueError("ray origin must lie inside the map's bounding region")

    deltas = batch.endpoints - origin
    s_end = _clip_to_box(origin, deltas, grid.min_corner, grid.max_corner)
    clipped = s_end < 1.0
    # pull clipped ends a hair inside so their voxel index stays in range
    s_eff = np.where(clipped, np.maximum(s_end - 1e-9, 0.0), 1.0)
    ends = origin + deltas * s_eff[:, None]

    res = grid.resolution
    lo = grid.min_corner
    start_cell = np.floor((origin - lo) / res).astype(np.int64)
    np.clip(start_cell, 0, grid.shape - 1, out=start_cell)
    end_cell = np.floor((ends - lo) / res).astype(np.int64)
    np.clip(end_cell, 0, grid.shape - 1, out=end_cell)

    seg = ends - origin
    step = np.sign(seg).astype(np.int64)
    with np.errstate(divide="ignore"):
        inv = np.where(seg != 0.0, 1.0 / seg, np.inf)
    next_boundary = lo + (start_cell + (step > 0)) * res
    tmax = np.where(step != 0, (next_boundary - origin) * inv, np.inf)
    tdelta = np.abs(res * inv)

    if engine == "auto" and _HAVE_NUMBA:
        _walk_kernel(grid.states, int(start_cell[0]), int(start_cell[1]),
                     int(start_cell[2]), end_cell, step,
                     np.ascontiguousarray(tmax), np.ascontiguousarray(tdelta))
    else:
        _walk_numpy(grid.states, start_cell, end_cell, step, tmax, tdelta)

    surface = (batch.kinds == RayKind.SURFACE) & ~clipped
    grid._mark_free(end_cell[~surface])
    grid._mark_occupied(end_cell[surface])
    return grid


def keyframe_ray_batch(frame: Keyframe, pose: Pose | None = None,
                       th_d: float = 30.0, th_f: float = 20.0) -> RayBatch:
    """Rays of one keyframe: surface returns under th_d, free probes elsewhere.

    Pixels without depth, or with depth at or beyond th_d, probe free space at
    depth th_f along their viewing ray.
    """
    pose = pose if pose is not None else frame.pose
    dirs_cam = frame.intrinsics.pixel_rays().reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation_matrix().T
    depth = frame.depth.data.reshape(-1).astype(np.float64)
    surface = (depth > 0) & (depth < th_d)
    reach = np.where(surface, depth, th_f)
    endpoints = pose.t + dirs * reach[:, None]
    kinds = np.where(surface, np.int8(RayKind.SURFACE), np.int8(RayKind.FREE_PROBE))
    return RayBatch(origin=pose.t, endpoints=endpoints, kinds=kinds)


def build_observed_area(keyframes: Sequence[Keyframe], poses: Sequence[Pose] | None,
                        th_d: float, th_f: float, resolution: float,
                        min_corner, max_corner) -> OccupancyMap:
    """Cast every keyframe's rays into a fresh map; poses override the frames'."""
    grid = OccupancyMap(resolution, min_corner, max_corner)
    for k, frame in enumerate(keyframes):
        pose = poses[k] if poses is not None else frame.pose
        cast_rays(grid, keyframe_ray_batch(frame, pose, th_d=th_d, th_f=th_f))
    return grid


def contains(grid: OccupancyMap, p) -> bool:
    """True iff p's voxel is FREE or OCCUPIED (inside the observed area)."""
    return bool(grid.contains_points(np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


class TransformedView:
    """Observed-area membership for points expressed in another frame.

    Queries are moved by ``map_from_query`` before the voxel lookup, so the
    map itself never needs rebuilding after an alignment step.
    """

    def __init__(self, grid: OccupancyMap, map_from_query: Pose = Pose()):
        self.grid = grid
        self.map_from_query = map_from_query

    def contains_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        return self.grid.contains_points(self.map_from_query.apply(pts))


def save_voxels(path, grid: OccupancyMap) -> None:
    """Dump observed voxels as `x y z state` lines (voxel centers)."""
    vox = grid.observed_voxels()
    centers = grid.voxel_centers(vox)
    states = grid.states[vox[:, 0], vox[:, 1], vox[:, 2]]
    with open(path, "w") as f:
        for (x, y, z), s in zip(centers, states):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {VoxelState(s).name}\n")
