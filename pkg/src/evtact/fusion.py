"""Warping of semi-dense depth maps to a common view and weighted fusion.

A valid source pixel is back-projected with its depth, moved through the
relative pose into the target view, re-projected, and splatted onto the
nearest integer pixel; splat collisions keep the smallest depth (nearest
surface wins). Fusion averages the warped maps per pixel with weights
renormalized over the subset of maps that are valid there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emvs import DepthMap
from .errors import ConfigError
from .geometry import CameraIntrinsics, PoseSE3, relative_pose

TABLE_WEIGHTS = (0.445, 0.333, 0.222)  # calibrated start/mid/end defaults


@dataclass(frozen=True)
class FusionWeights:
    """Per-reference fusion weights on the unit simplex."""

    w_s: float = TABLE_WEIGHTS[0]
    w_m: float = TABLE_WEIGHTS[1]
    w_e: float = TABLE_WEIGHTS[2]

    def __post_init__(self):
        w = self.as_array()
        if np.any(w < 0) or np.any(w > 1):
            raise ConfigError(f"fusion weights must lie in [0, 1], got {tuple(w)}")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"fusion weights must sum to 1, got {w.sum()!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_s, self.w_m, self.w_e], dtype=np.float64)

    @classmethod
    def normalized(cls, w_s: float, w_m: float, w_e: float) -> "FusionWeights":
        total = w_s + w_m + w_e
        if total <= 0:
            raise ConfigError("fusion weights must have a positive sum")
        return cls(w_s / total, w_m / total, w_e / total)


@dataclass
class WarpedDepthMap:
    """A depth map expressed in the common reference view.

    ``source_t_us`` records which reference view it came from; ``dropped``
    counts splats that landed outside the image or behind the camera.
    """

    depth: np.ndarray
    valid: np.ndarray
    ref_pose: PoseSE3
    source_t_us: int
    dropped: int = 0

    @property
    def shape(self):
        return self.depth.shape


def warp_depth(
    zmap: DepthMap, pose_i: PoseSE3, pose_m: PoseSE3, k: CameraIntrinsics
) -> WarpedDepthMap:
    """Warp ``zmap`` (referenced at pose_i) into the view at pose_m."""
    h, w = zmap.shape
    buf = np.full(h * w, np.inf, dtype=np.float64)
    dropped = 0
    vy, vx = np.nonzero(zmap.valid)
    if vy.size:
        z = zmap.depth[vy, vx]
        pts = np.empty((vy.size, 3))
        pts[:, 0] = (vx - k.cx) / k.fx * z
        pts[:, 1] = (vy - k.cy) / k.fy * z
        pts[:, 2] = z
        m_t_i = relative_pose(pose_m, pose_i)
        pm = m_t_i.apply(pts)
        zm = pm[:, 2]
        front = zm > 0
        dropped += int((~front).sum())
        pm, zm = pm[front], zm[front]
        u = np.floor(k.fx * pm[:, 0] / zm + k.cx + 0.5).astype(np.int64)
        v = np.floor(k.fy * pm[:, 1] / zm + k.cy + 0.5).astype(np.int64)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        dropped += int((~inside).sum())
        np.minimum.at(buf, v[inside] * w + u[inside], zm[inside])
    depth = buf.reshape(h, w)
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    return WarpedDepthMap(
        depth=depth,
        valid=valid,
        ref_pose=pose_m,
        source_t_us=zmap.ref_pose.t_us,
        dropped=dropped,
    )


def _fuse(maps, weights) -> DepthMap:
    if not maps:
        raise ConfigError("fusion needs at least one map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ConfigError(f"fusion resolution mismatch: {m.shape} vs {shape}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != len(maps):
        raise ConfigError("one weight per map required")
    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    for m, wgt in zip(maps, weights):
        num += wgt * m.valid * m.depth
        den += wgt * m.valid
    valid = den > 0
    depth = np.zeros(shape, dtype=np.float64)
    depth[valid] = num[valid] / den[valid]
    ref = maps[0].ref_pose
    t_us = [getattr(m, "source_t_us", ref.t_us) for m in maps]
    return DepthMap(depth=depth, valid=valid, ref_pose=ref, t_s=min(t_us), t_e=max(t_us))


def fuse_bma(maps, w: FusionWeights) -> DepthMap:
    """Weighted average of the start/mid/end maps in the common view.

    Weights renormalize per pixel over the maps valid there; a pixel is
    invalid only where no map contributes.
    """
    if len(maps) != 3:
        raise ConfigError("fuse_bma expects the three start/mid/end maps")
    return _fuse(list(maps), w.as_array())


def fuse_left_right(map_s, map_e) -> DepthMap:
    """Equal-weight fusion of just the start and end maps."""
    return _fuse([map_s, map_e], np.array([0.5, 0.5]))
