"""Change detection between an accumulated global cloud and an outdated prior.

Four steps: accumulate the global cloud from filtered depth and poses, align
it to the prior map, build the observed prior cloud (a prior point counts as
observed when its voxel was swept by camera rays or when the global cloud has
a point within th_ch of it), then classify: global points far (>= th_ch) from
the observed prior are new, observed prior points far from the global cloud
are removed.

Boundary behavior is asymmetric on purpose: the observed test uses <= th_ch
while the change test uses >= th_ch, so a point at exactly th_ch is both
observed and changed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ply
from .depth_filter import Keyframe, depth_to_cloud
from .geometry import Pose, PointCloud, SpatialIndex, transform_cloud, voxel_downsample
from .occupancy import OccupancyMap, TransformedView, build_observed_area
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    RegistrationTarget,
    register_gicp,
)


@dataclass(frozen=True)
class ChangeConfig:
    th_ch: float = 3.2      # change distance threshold (m)
    rho_p: float = 0.8      # cloud downsample resolution (m)
    rho_o: float = 0.8      # observed-area voxel resolution (m)
    th_d: float = 30.0      # max depth for surface rays / cloud points (m)
    th_f: float = 20.0      # free-probe ray depth (m)

    def __post_init__(self):
        for name in ("th_ch", "rho_p", "rho_o", "th_d", "th_f"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.th_ch <= self.rho_p:
            raise ValueError("th_ch must exceed the downsample resolution rho_p")


@dataclass
class ChangeReport:
    global_cloud: PointCloud
    observed_prior: PointCloud
    new_points: PointCloud
    removed_points: PointCloud
    alignment: RegistrationResult | None
    aligned: bool
    area_view: object | None = None

    def summary(self) -> dict:
        out = {
            "n_global": len(self.global_cloud),
            "n_observed_prior": len(self.observed_prior),
            "n_new": len(self.new_points),
            "n_removed": len(self.removed_points),
            "aligned": self.aligned,
        }
        if self.alignment is not None:
            w, x, y, z = self.alignment.transform.q
            out["alignment"] = {
                "translation": self.alignment.transform.t.tolist(),
                "quaternion_wxyz": [w, x, y, z],
                "fitness": self.alignment.fitness,
                "converged": self.alignment.converged,
                "accepted": self.alignment.accepted,
            }
        return out


def build_global_cloud(keyframes: Sequence[Keyframe],
                       poses: Sequence[Pose] | None,
                       rho_p: float, th_d: float = 30.0) -> PointCloud:
    """Union of all keyframes' world-frame clouds, voxel-downsampled at rho_p."""
    chunks = []
    for k, frame in enumerate(keyframes):
        if poses is not None:
            frame = Keyframe(id=frame.id, timestamp=frame.timestamp,
                             pose=poses[k], depth=frame.depth,
                             intrinsics=frame.intrinsics)
        cloud = depth_to_cloud(frame, th_d)
        if len(cloud):
            chunks.append(cloud.points)
    if not chunks:
        return PointCloud.empty(frame_id="world")
    return voxel_downsample(PointCloud(np.vstack(chunks), frame_id="world"), rho_p)


def align_global_to_prior(global_cloud: PointCloud,
                          prior: PointCloud | RegistrationTarget,
                          config: RegistrationConfig = RegistrationConfig(),
                          ) -> tuple[PointCloud, RegistrationResult]:
    """GICP-align the global cloud onto the prior from an identity guess.

    On a failed validation the cloud is returned untransformed; callers check
    ``result.accepted``.
    """
    result = register_gicp(global_cloud, prior, Pose(), config)
    if result.accepted:
        return transform_cloud(global_cloud, result.transform), result
    return global_cloud, result


def build_observed_prior(prior: PointCloud, global_cloud: PointCloud | SpatialIndex,
                         area, th_ch: float) -> PointCloud:
    """Prior points observed by the run: inside the swept area or near the
    global cloud (nearest distance <= th_ch). Order follows the prior cloud.

    ``area`` is anything with ``contains_points``; an empty global cloud makes
    the distance clause vacuously false.
    """
    if prior.is_empty():
        return prior
    in_area = area.contains_points(prior.points) if area is not None \
        else np.zeros(len(prior), dtype=bool)
    index = global_cloud if isinstance(global_cloud, SpatialIndex) else \
        (SpatialIndex(global_cloud) if len(global_cloud) else None)
    if index is not None and len(index):
        near = index.nearest_distances(prior.points) <= th_ch
    else:
        near = np.zeros(len(prior), dtype=bool)
    return prior.select(in_area | near)


def classify_changes(global_cloud: PointCloud, observed_prior: PointCloud,
                     th_ch: float) -> tuple[PointCloud, PointCloud]:
    """New = global points >= th_ch from the observed prior; removed = observed
    prior points >= th_ch from the global cloud. An empty opposing cloud means
    every point is changed."""
    if global_cloud.is_empty():
        new_points = global_cloud
    elif observed_prior.is_empty():
        new_points = global_cloud
    else:
        d = SpatialIndex(observed_prior).nearest_distances(global_cloud.points)
        new_points = global_cloud.select(d >= th_ch)
    if observed_prior.is_empty():
        removed = observed_prior
    elif global_cloud.is_empty():
        removed = observed_prior
    else:
        d = SpatialIndex(global_cloud).nearest_distances(observed_prior.points)
        removed = observed_prior.select(d >= th_ch)
    return new_points, removed


def detect(keyframes: Sequence[Keyframe], poses: Sequence[Pose] | None,
           prior: PointCloud, config: ChangeConfig = ChangeConfig(),
           registration: RegistrationConfig = RegistrationConfig(),
           bounds: tuple | None = None,
           align: bool = True) -> ChangeReport:
    """Run the full four-step pipeline and assemble a report.

    ``bounds`` is the (min_corner, max_corner) of the observed-area map;
    when omitted it is grown from the prior cloud's extent.
    """
    try:
        global_cloud = build_global_cloud(keyframes, poses, config.rho_p, config.th_d)
    except Exception as exc:
        raise RuntimeError(f"change detection failed while building the global cloud: {exc}") from exc

    prior_ds = voxel_downsample(prior, config.rho_p)

    alignment = None
    aligned = False
    if align and not global_cloud.is_empty():
        try:
            global_cloud, alignment = align_global_to_prior(global_cloud, prior_ds, registration)
            aligned = alignment.accepted
        except Exception as exc:
            raise RuntimeError(f"change detection failed while aligning to the prior: {exc}") from exc

    try:
        if bounds is None:
            lo = prior.points.min(axis=0) - 2 * config.rho_o
            hi = prior.points.max(axis=0) + 2 * config.rho_o
        else:
            lo, hi = bounds
        area = build_observed_area(keyframes, poses, config.th_d, config.th_f,
                                   config.rho_o, lo, hi)
    except Exception as exc:
        raise RuntimeError(f"change detection failed while building the observed area: {exc}") from exc

    # prior points live in the prior frame; the map was built in the pose
    # frame, so area queries go through the inverse alignment
    map_from_prior = alignment.transform.inverse() if aligned else Pose()
    area_view = TransformedView(area, map_from_prior)

    try:
        observed_prior = build_observed_prior(prior_ds, global_cloud, area_view,
                                              config.th_ch)
        new_points, removed = classify_changes(global_cloud, observed_prior,
                                               config.th_ch)
    except Exception as exc:
        raise RuntimeError(f"change detection failed while classifying points: {exc}") from exc

    return ChangeReport(global_cloud=global_cloud, observed_prior=observed_prior,
                        new_points=new_points, removed_points=removed,
                        alignment=alignment, aligned=aligned, area_view=area_view)


def write_report(outdir, report: ChangeReport) -> None:
    """One PLY per constituent cloud plus a JSON summary."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ply.write_ply(outdir / "global.ply", report.global_cloud)
    ply.write_ply(outdir / "observed_prior.ply", report.observed_prior)
    ply.write_ply(outdir / "new.ply", report.new_points)
    ply.write_ply(outdir / "removed.ply", report.removed_points)
    (outdir / "summary.json").write_text(json.dumps(report.summary(), indent=2,
                                                    sort_keys=True))
