"""Ground-truth change construction and recall/precision scoring.

Ground truth reuses the detector's own classification rule on the prior
clouds of the changed and original scenes, then restricts both ground-truth
change clouds to what the run could actually observe. True positives are
collected by mutual proximity (within th_ch) between detection and ground
truth; each metric divides a TP count by its source-cloud count.

Every input cloud is re-downsampled at rho_p before scoring so detections and
ground truth are always compared at the same resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .change_detect import ChangeReport, build_observed_prior, classify_changes
from .geometry import PointCloud, SpatialIndex, voxel_downsample

NOT_APPLICABLE = None


@dataclass(frozen=True)
class GroundTruthChanges:
    """Prior new/removed clouds and their observed subsets."""

    new: PointCloud
    removed: PointCloud
    new_observed: PointCloud
    removed_observed: PointCloud


@dataclass(frozen=True)
class MetricsReport:
    """The four change-detection scores plus every count behind them.

    A metric whose denominator is zero is NOT_APPLICABLE (None) rather than
    a silent 0 or 1; the counts still tell the whole story.
    """

    recall_new: float | None
    precision_new: float | None
    recall_removed: float | None
    precision_removed: float | None
    n_gt_new_observed: int
    n_gt_new_tp: int
    n_new: int
    n_new_tp: int
    n_gt_removed_observed: int
    n_gt_removed_tp: int
    n_removed: int
    n_removed_tp: int

    def as_dict(self) -> dict:
        return {
            "R_new": self.recall_new, "P_new": self.precision_new,
            "R_rm": self.recall_removed, "P_rm": self.precision_removed,
            "n_gt_new_obs": self.n_gt_new_observed, "n_gt_new_tp": self.n_gt_new_tp,
            "n_new": self.n_new, "n_new_tp": self.n_new_tp,
            "n_gt_rm_obs": self.n_gt_removed_observed, "n_gt_rm_tp": self.n_gt_removed_tp,
            "n_rm": self.n_removed, "n_rm_tp": self.n_removed_tp,
        }


def build_ground_truth(original_prior: PointCloud, changed_prior: PointCloud,
                       th_ch: float) -> tuple[PointCloud, PointCloud]:
    """Ground-truth new/removed clouds from the two scenes' prior clouds.

    Same rule as the detector: changed-scene points far from the original
    scene are new, original-scene points far from the changed scene are
    removed. Inputs are expected at a common downsample resolution.
    """
    return classify_changes(changed_prior, original_prior, th_ch)


def restrict_to_observed(gt_new: PointCloud, gt_removed: PointCloud,
                         global_cloud: PointCloud, area, th_ch: float,
                         ) -> tuple[PointCloud, PointCloud]:
    """Observed subsets of the ground-truth clouds, by the detector's own
    observed-prior rule (same swept area and global cloud)."""
    index = SpatialIndex(global_cloud) if len(global_cloud) else global_cloud
    return (build_observed_prior(gt_new, index, area, th_ch),
            build_observed_prior(gt_removed, index, area, th_ch))


def _proximity_subset(cloud: PointCloud, other: PointCloud, th_ch: float) -> PointCloud:
    """Points of ``cloud`` whose nearest point in ``other`` is within th_ch."""
    if cloud.is_empty() or other.is_empty():
        return PointCloud.empty(frame_id=cloud.frame_id)
    d = SpatialIndex(other).nearest_distances(cloud.points)
    return cloud.select(d <= th_ch)


def build_tp_clouds(gt_removed_observed: PointCloud, gt_new_observed: PointCloud,
                    removed: PointCloud, new: PointCloud, th_ch: float,
                    ) -> tuple[PointCloud, PointCloud, PointCloud, PointCloud]:
    """True-positive clouds by mutual proximity.

    Returns (gt_removed_tp, gt_new_tp, removed_tp, new_tp): each ground-truth
    point within th_ch of the matching detection cloud and vice versa.
    """
    return (
        _proximity_subset(gt_removed_observed, removed, th_ch),
        _proximity_subset(gt_new_observed, new, th_ch),
        _proximity_subset(removed, gt_removed_observed, th_ch),
        _proximity_subset(new, gt_new_observed, th_ch),
    )


def _ratio(tp: int, denom: int) -> float | None:
    if denom == 0:
        return NOT_APPLICABLE
    return tp / denom


def compute_metrics(gt_removed_observed: PointCloud, gt_new_observed: PointCloud,
                    removed: PointCloud, new: PointCloud,
                    th_ch: float) -> MetricsReport:
    """Recall and precision of the new and removed classes."""
    gt_rm_tp, gt_new_tp, rm_tp, new_tp = build_tp_clouds(
        gt_removed_observed, gt_new_observed, removed, new, th_ch)
    return MetricsReport(
        recall_new=_ratio(len(gt_new_tp), len(gt_new_observed)),
        precision_new=_ratio(len(new_tp), len(new)),
        recall_removed=_ratio(len(gt_rm_tp), len(gt_removed_observed)),
        precision_removed=_ratio(len(rm_tp), len(removed)),
        n_gt_new_observed=len(gt_new_observed), n_gt_new_tp=len(gt_new_tp),
        n_new=len(new), n_new_tp=len(new_tp),
        n_gt_removed_observed=len(gt_removed_observed), n_gt_removed_tp=len(gt_rm_tp),
        n_removed=len(removed), n_removed_tp=len(rm_tp),
    )


def evaluate_detection(report: ChangeReport, original_prior: PointCloud,
                       changed_prior: PointCloud, th_ch: float,
                       rho_p: float) -> tuple[MetricsReport, GroundTruthChanges]:
    """Score a detection run against the two scenes' ground-truth clouds.

    All clouds (ground truth and detections) are re-downsampled at rho_p
    before any distance test.
    """
    orig_ds = voxel_downsample(original_prior, rho_p)
    changed_ds = voxel_downsample(changed_prior, rho_p)
    gt_new, gt_removed = build_ground_truth(orig_ds, changed_ds, th_ch)
    gt_new_obs, gt_removed_obs = restrict_to_observed(
        gt_new, gt_removed, report.global_cloud, report.area_view, th_ch)
    new_ds = voxel_downsample(report.new_points, rho_p)
    removed_ds = voxel_downsample(report.removed_points, rho_p)
    metrics = compute_metrics(gt_removed_obs, gt_new_obs, removed_ds, new_ds, th_ch)
    gt = GroundTruthChanges(new=gt_new, removed=gt_removed,
                            new_observed=gt_new_obs, removed_observed=gt_removed_obs)
    return metrics, gt


# ---------------------------------------------------------------------------
# CSV row emission (consumed by the CLI's sweep plotter)
# ---------------------------------------------------------------------------

CSV_FIELDS = ["trajectory", "noise", "th_f", "th_ch",
              "R_new", "P_new", "R_rm", "P_rm",
              "n_gt_new_obs", "n_gt_new_tp", "n_new", "n_new_tp",
              "n_gt_rm_obs", "n_gt_rm_tp", "n_rm", "n_rm_tp"]


def metrics_csv_row(trajectory: str, noise: str, th_f: float, th_ch: float,
                    metrics: MetricsReport) -> dict:
    def fmt(v):
        return "na" if v is None else f"{v:.6f}"

    return {
        "trajectory": trajectory, "noise": noise,
        "th_f": f"{th_f:g}", "th_ch": f"{th_ch:g}",
        "R_new": fmt(metrics.recall_new), "P_new": fmt(metrics.precision_new),
        "R_rm": fmt(metrics.recall_removed), "P_rm": fmt(metrics.precision_removed),
        "n_gt_new_obs": metrics.n_gt_new_observed, "n_gt_new_tp": metrics.n_gt_new_tp,
        "n_new": metrics.n_new, "n_new_tp": metrics.n_new_tp,
        "n_gt_rm_obs": metrics.n_gt_removed_observed, "n_gt_rm_tp": metrics.n_gt_removed_tp,
        "n_rm": metrics.n_removed, "n_rm_tp": metrics.n_removed_tp,
    }
