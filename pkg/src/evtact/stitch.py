"""Point-cloud assembly of per-window depth maps into one surface.

Consecutive window clouds are registered with trimmed point-to-point ICP,
seeded with the known roller translation between the reference views, then
concatenated in the base frame. Evaluation compares point heights against
the analytic membrane model of the scanned surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .emvs import DepthMap
from .errors import AlignmentError, DataError, MetricError
from .geometry import CameraIntrinsics, PoseSE3, relative_pose
from .surfaces import INDENT_MAX_MM, MEMBRANE_DEPTH_MM, SurfaceModel


@dataclass
class PointCloud:
    """3D points in mm with an optional per-point scalar."""

    points: np.ndarray
    scalar: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.scalar is not None:
            self.scalar = np.asarray(self.scalar, dtype=np.float64).reshape(-1)
            if self.scalar.shape[0] != self.points.shape[0]:
                raise ValueError("scalar length must match point count")

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: PoseSE3) -> "PointCloud":
        return PointCloud(points=pose.apply(self.points), scalar=self.scalar)


@dataclass
class AlignmentResult:
    transform: PoseSE3
    rms_mm: float
    iterations: int
    converged: bool
    n_correspondences: int = 0


def depth_to_cloud(zmap: DepthMap, k: CameraIntrinsics, pose: PoseSE3 | None = None) -> PointCloud:
    """One 3D point per valid pixel, posed into the base frame."""
    vy, vx = np.nonzero(zmap.valid)
    if not vy.size:
        raise DataError("depth map has no valid pixels: empty cloud")
    z = zmap.depth[vy, vx]
    pts = np.empty((vy.size, 3))
    pts[:, 0] = (vx - k.cx) / k.fx * z
    pts[:, 1] = (vy - k.cy) / k.fy * z
    pts[:, 2] = z
    if pose is not None:
        pts = pose.apply(pts)
    return PointCloud(points=pts, scalar=z.copy())


def _best_fit_transform(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid (R, t) aligning src onto dst."""
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt[-1, :] *= -1
        r = vt.T @ u.T
    t = c_dst - r @ c_src
    return r, t


def icp_align(
    src: PointCloud,
    dst: PointCloud,
    init: PoseSE3 | None = None,
    max_corr_mm: float = 2.0,
    trim_quantile: float = 0.9,
    tol_mm: float = 1e-4,
    max_iterations: int = 50,
    min_correspondences: int = 10,
) -> AlignmentResult:
    """Trimmed point-to-point ICP refining ``init`` (src -> dst).

    Correspondences farther than ``max_corr_mm`` are rejected outright and
    the rest trimmed at the ``trim_quantile`` distance; fewer than
    ``min_correspondences`` surviving pairs raises AlignmentError. Only
    iterations that do not increase the RMS residual are accepted.
    """
    if init is None:
        init = PoseSE3.identity()
    if len(src) == 0 or len(dst) == 0:
        raise AlignmentError("cannot align empty clouds")
    tree = cKDTree(dst.points)
    r_tot = init.rotation
    t_tot = init.translation.copy()
    best_rms = np.inf
    best_r, best_t = r_tot.copy(), t_tot.copy()
    n_corr = 0
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        moved = src.points @ r_tot.T + t_tot
        dist, idx = tree.query(moved, k=1)
        keep = dist <= max_corr_mm
        if keep.sum() < min_correspondences:
            raise AlignmentError(
                f"only {int(keep.sum())} correspondences within {max_corr_mm} mm "
                f"(need {min_correspondences}); bad initial pose or no overlap"
            )
        cutoff = np.quantile(dist[keep], trim_quantile)
        keep &= dist <= cutoff
        n_corr = int(keep.sum())
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        if rms > best_rms:
            break  # would worsen; keep the best accepted state
        improved = best_rms - rms
        best_rms, best_r, best_t = rms, r_tot.copy(), t_tot.copy()
        if improved < tol_mm:
            converged = True
            break
        r_step, t_step = _best_fit_transform(moved[keep], dst.points[idx[keep]])
        r_tot = r_step @ r_tot
        t_tot = r_step @ t_tot + t_step
    else:
        converged = False
    return AlignmentResult(
        transform=PoseSE3.from_rotation_translation(best_r, best_t),
        rms_mm=best_rms,
        iterations=iterations,
        converged=converged,
        n_correspondences=n_corr,
    )


def voxel_downsample(cloud: PointCloud, voxel_mm: float) -> PointCloud:
    """Keep the first point per occupied voxel (deterministic order)."""
    if voxel_mm <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_mm).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    scalar = cloud.scalar[first] if cloud.scalar is not None else None
    return PointCloud(points=cloud.points[first], scalar=scalar)


def assemble(
    maps: list[DepthMap],
    k: CameraIntrinsics,
    use_icp: bool = True,
    voxel_mm: float | None = None,
    **icp_kwargs,
) -> PointCloud:
    """Chain consecutive window clouds into one base-frame cloud.

    Each map's cloud lives in its reference camera frame; the relative pose
    between consecutive reference views (the roller translation over one
    window) seeds ICP. With ``use_icp=False`` the chained priors alone are
    used, which equals plain concatenation when the poses are exact.
    """
    if not maps:
        raise DataError("assemble needs at least one window")
    clouds = [depth_to_cloud(m, k) for m in maps]
    base_t_ref = maps[0].ref_pose
    merged_pts = [clouds[0].transformed(base_t_ref).points]
    scalars = [clouds[0].scalar]
    accumulated = base_t_ref
    for i in range(1, len(maps)):
        prior = relative_pose(maps[i - 1].ref_pose, maps[i].ref_pose)
        if use_icp:
            try:
                result = icp_align(clouds[i], clouds[i - 1], init=prior, **icp_kwargs)
                step = result.transform
            except AlignmentError as exc:
                raise AlignmentError(f"window {i}: {exc}") from exc
        else:
            step = prior
        accumulated = accumulated.compose(step)
        merged_pts.append(clouds[i].transformed(accumulated).points)
        scalars.append(clouds[i].scalar)
    cloud = PointCloud(points=np.vstack(merged_pts), scalar=np.concatenate(scalars))
    if voxel_mm:
        cloud = voxel_downsample(cloud, voxel_mm)
    return cloud


def evaluate_surface(
    cloud: PointCloud,
    surface: SurfaceModel,
    membrane_mm: float = MEMBRANE_DEPTH_MM,
    region_margin_mm: float = 0.0,
) -> dict:
    """Height error of every point against the analytic membrane model.

    Reports MAE/RMSE of ``z - z_model`` plus the standard deviation of the
    reconstructed depth inside each flat top-surface region the surface
    declares (a uniformity measure: identical-height regions should come
    out at constant depth).
    """
    if len(cloud) == 0:
        raise MetricError("empty cloud: surface metrics undefined")
    pts = cloud.points
    indent = np.clip(surface.height(pts[:, 0], pts[:, 1]), 0.0, INDENT_MAX_MM)
    z_model = membrane_mm - indent
    err = pts[:, 2] - z_model
    metrics = {
        "mae_mm": float(np.mean(np.abs(err))),
        "rmse_mm": float(np.sqrt(np.mean(err**2))),
        "std_mm": float(np.std(err)),
        "n_points": int(len(cloud)),
        "per_region": [],
    }
    for region in surface.regions():
        x0, x1 = region["x0"] + region_margin_mm, region["x1"] - region_margin_mm
        y0, y1 = region["y0"] + region_margin_mm, region["y1"] - region_margin_mm
        sel = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        if sel.sum() >= 2:
            metrics["per_region"].append(
                {
                    "name": region["name"],
                    "std_mm": float(np.std(pts[sel, 2])),
                    "mean_depth_mm": float(np.mean(pts[sel, 2])),
                    "n_points": int(sel.sum()),
                }
            )
    return metrics
