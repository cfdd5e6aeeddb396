"""Space-sweep depth estimation from event streams.

Each event's viewing ray (camera center at the event time, through the
event pixel) is intersected with a stack of fronto-parallel depth planes in
a reference view; the voxel containing each intersection is incremented.
Per-pixel ray-count maxima along depth, adaptively thresholded and median
filtered, give a semi-dense depth map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import _kernels
from .errors import ConfigError
from .geometry import CameraIntrinsics, PoseSE3, interpolate_pose, interpolate_poses

DEFAULT_WINDOW_US = 20_000
DEFAULT_Z_MIN_MM = 40.0
DEFAULT_Z_MAX_MM = 50.0
DEFAULT_N_PLANES = 64


@dataclass(frozen=True)
class EventWindow:
    """Time-sorted slice of an event stream over [t_s, t_e)."""

    t_s: int
    t_e: int
    events: np.ndarray

    def __post_init__(self):
        if self.t_e <= self.t_s:
            raise ValueError("window must have positive duration")
        if len(self.events):
            t = self.events["t"]
            if t[0] < self.t_s or t[-1] > self.t_e:
                raise ValueError("events outside window bounds")

    @property
    def t_m(self) -> int:
        return (self.t_s + self.t_e) // 2

    def __len__(self) -> int:
        return len(self.events)


def make_windows(
    events: np.ndarray, window_us: int = DEFAULT_WINDOW_US, t_start=None, t_end=None
) -> list[EventWindow]:
    """Tile the stream into consecutive non-overlapping windows."""
    if window_us <= 0:
        raise ConfigError("window length must be positive")
    if not len(events) and t_start is None:
        return []
    t = events["t"]
    t0 = int(t_start if t_start is not None else t[0])
    t1 = int(t_end if t_end is not None else t[-1] + 1)
    out = []
    for ws in range(t0, t1, int(window_us)):
        we = ws + int(window_us)
        lo = int(np.searchsorted(t, ws, side="left"))
        hi = int(np.searchsorted(t, we, side="left"))
        out.append(EventWindow(t_s=ws, t_e=we, events=events[lo:hi]))
    return out


def inverse_depth_planes(
    z_min: float = DEFAULT_Z_MIN_MM, z_max: float = DEFAULT_Z_MAX_MM, n_z: int = DEFAULT_N_PLANES
) -> np.ndarray:
    """Depth planes spaced linearly in inverse depth, ascending in depth."""
    if n_z < 2:
        raise ConfigError("need at least 2 depth planes")
    if not (0 < z_min < z_max):
        raise ConfigError("require 0 < z_min < z_max")
    planes = 1.0 / np.linspace(1.0 / z_min, 1.0 / z_max, int(n_z))
    planes[0] = z_min
    planes[-1] = z_max
    return planes


@dataclass
class DSI:
    """Ray-count volume referenced to one viewpoint.

    ``counts[j, v, u]`` is the number of event rays whose intersection with
    depth plane ``planes[j]`` lands in reference pixel (u, v). ``bounds`` is
    the (u_min, u_max, v_min, v_max) box of voted pixels, or None if empty.
    """

    counts: np.ndarray
    ref_pose: PoseSE3
    planes: np.ndarray
    t_s: int
    t_e: int
    bounds: tuple[int, int, int, int] | None = None
    n_events: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape


@dataclass
class DepthMap:
    """Per-pixel depth in mm with a validity mask, tied to a reference pose."""

    depth: np.ndarray
    valid: np.ndarray
    ref_pose: PoseSE3
    t_s: int = 0
    t_e: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def n_valid(self) -> int:
        return int(self.valid.sum())


def build_dsi(
    window: EventWindow,
    trajectory: list[PoseSE3],
    k: CameraIntrinsics,
    ref_time_us: int,
    planes: np.ndarray,
    threads: int = 1,
    ref_pose: PoseSE3 | None = None,
) -> DSI:
    """Vote every event ray of the window into the reference depth volume.

    ``ref_pose`` overrides the interpolated pose at ``ref_time_us`` (used to
    study pose-error sensitivity); event rays always use interpolated poses.
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 1 or planes.size < 2 or np.any(np.diff(planes) <= 0):
        raise ConfigError("planes must be a strictly increasing 1D array")
    if ref_pose is None:
        ref_pose = interpolate_pose(trajectory, ref_time_us)
    n_z = planes.size
    counts = np.zeros((n_z, k.height, k.width), dtype=np.int32)
    dsi = DSI(
        counts=counts,
        ref_pose=ref_pose,
        planes=planes,
        t_s=window.t_s,
        t_e=window.t_e,
        n_events=len(window),
    )
    if not len(window):
        return dsi

    ev = window.events
    trans, rots = interpolate_poses(trajectory, ev["t"])
    pix = np.stack(
        [
            (ev["x"].astype(np.float64) - k.cx) / k.fx,
            (ev["y"].astype(np.float64) - k.cy) / k.fy,
            np.ones(len(ev)),
        ],
        axis=1,
    )
    r_ref_inv = PoseSE3(quat=ref_pose.quat).inverse()
    origins = r_ref_inv.apply(trans - ref_pose.translation)
    dirs = r_ref_inv.apply(rots.apply(pix))

    dz = dirs[:, 2]
    keep = dz != 0.0
    origins, dirs, dz = origins[keep], dirs[keep], dz[keep]
    if not origins.shape[0]:
        return dsi

    u0 = k.cx + k.fx * dirs[:, 0] / dz
    u1 = k.fx * (origins[:, 0] - dirs[:, 0] * origins[:, 2] / dz)
    v0 = k.cy + k.fy * dirs[:, 1] / dz
    v1 = k.fy * (origins[:, 1] - dirs[:, 1] * origins[:, 2] / dz)
    oz = origins[:, 2]

    vote = _kernels.vote_kernel()
    threads = max(1, int(threads))
    if threads == 1 or not _kernels.USE_NUMBA:
        bounds = np.array([k.width, -1, k.height, -1], dtype=np.int64)
        vote(u0, u1, v0, v1, oz, dz, planes, counts, 0, n_z, k.width, k.height, bounds)
        all_bounds = [bounds]
    else:
        # disjoint plane slabs: no shared writes, bit-identical at any thread count
        slabs = [(int(s[0]), int(s[-1]) + 1) for s in np.array_split(np.arange(n_z), threads) if s.size]
        all_bounds = [np.array([k.width, -1, k.height, -1], dtype=np.int64) for _ in slabs]
        with ThreadPoolExecutor(max_workers=len(slabs)) as pool:
            futs = [
                pool.submit(
                    vote, u0, u1, v0, v1, oz, dz, planes, counts, lo, hi, k.width, k.height, b
                )
                for (lo, hi), b in zip(slabs, all_bounds)
            ]
            for f in futs:
                f.result()
    u_min = int(min(b[0] for b in all_bounds))
    u_max = int(max(b[1] for b in all_bounds))
    v_min = int(min(b[2] for b in all_bounds))
    v_max = int(max(b[3] for b in all_bounds))
    if u_max >= 0:
        dsi.bounds = (u_min, u_max, v_min, v_max)
    return dsi


def depth_to_confidence(dsi: DSI) -> np.ndarray:
    """Per-pixel maximum ray count along the depth axis."""
    return dsi.counts.max(axis=0)


def _validate_extraction_params(c: float, g_f: int) -> None:
    if not (5 <= c <= 20):
        raise ConfigError(f"threshold constant C={c} outside [5, 20]")
    if g_f % 2 == 0 or not (11 <= g_f <= 91):
        raise ConfigError(f"filter size G_f={g_f} must be odd and within [11, 91]")


def extract_depth(dsi: DSI, c: float, g_f: int) -> DepthMap:
    """Adaptive-Gaussian-threshold the confidence image and median filter.

    A pixel is valid when its peak ray count stands at least ``c`` above the
    Gaussian-weighted local mean (window ``g_f``, sigma ``g_f/6``): a local
    ray-density maximum. Its depth is the argmax plane (ties to the nearest
    plane), median filtered over valid neighbours in a ``g_f`` window.
    """
    _validate_extraction_params(c, int(g_f))
    g_f = int(g_f)
    n_z, h, w = dsi.counts.shape
    depth = np.zeros((h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    out = DepthMap(depth=depth, valid=valid, ref_pose=dsi.ref_pose, t_s=dsi.t_s, t_e=dsi.t_e)
    if dsi.bounds is None:
        return out

    u_min, u_max, v_min, v_max = dsi.bounds
    x0, x1 = max(0, u_min - g_f), min(w, u_max + 1 + g_f)
    y0, y1 = max(0, v_min - g_f), min(h, v_max + 1 + g_f)
    sub = np.ascontiguousarray(dsi.counts[:, y0:y1, x0:x1])

    best_idx = np.zeros(sub.shape[1:], dtype=np.int32)
    best_cnt = np.zeros(sub.shape[1:], dtype=np.int32)
    _kernels.argmax_kernel()(sub, best_idx, best_cnt)

    conf = best_cnt.astype(np.float64)
    local_mean = cv2.GaussianBlur(conf, (g_f, g_f), sigmaX=g_f / 6.0, sigmaY=g_f / 6.0)
    valid_sub = (conf > local_mean + c) & (best_cnt > 0)

    med_idx = np.full(best_idx.shape, -1, dtype=np.int32)
    _kernels.masked_median_kernel()(best_idx, valid_sub, g_f, n_z, med_idx)

    depth_sub = np.zeros(best_idx.shape, dtype=np.float64)
    depth_sub[valid_sub] = dsi.planes[med_idx[valid_sub]]
    depth[y0:y1, x0:x1] = depth_sub
    valid[y0:y1, x0:x1] = valid_sub
    return out
