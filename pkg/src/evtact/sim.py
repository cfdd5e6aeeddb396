"""Synthetic roller scans: membrane rendering and event stream generation.

The camera sits at the roller axis looking down +z; the membrane rests at
``membrane_mm`` (roller radius) and objects indent it toward the camera.
Shading uses an edge-emphasizing proxy, ``L = log(i0 + gain * |grad depth|)``,
so events fire where depth gradients sweep across pixels, which is the
signal the space-sweep reconstruction consumes.

Event generation is an integrate-and-fire process on L sampled at >= 10 kHz:
a pixel fires when |L - L_ref| reaches the contrast threshold, with the
crossing time linearly interpolated inside the sample step, after which
L_ref is reset to the current L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .emvs import DepthMap
from .errors import ConfigError
from .geometry import CameraIntrinsics, PoseSE3
from .io import EVENT_DTYPE, concat_events, empty_events, make_events
from .surfaces import INDENT_MAX_MM, MEMBRANE_DEPTH_MM, SurfaceModel

MIN_SAMPLE_RATE_HZ = 10_000.0
V_ROLLER_MAX_MM_S = 500.0


@dataclass
class ScanConfig:
    """Parameters of one simulated rolling pass."""

    v_mm_s: float = 300.0
    scan_len_mm: float = 20.0
    c_sim: float = 0.25
    noise_rate: float = 0.0  # background events / pixel / second
    seed: int = 0
    sample_rate_hz: float = MIN_SAMPLE_RATE_HZ
    i0: float = 1.0
    gain: float = 30.0
    y_mm: float = 0.0
    membrane_mm: float = MEMBRANE_DEPTH_MM
    render: str = "exact"  # "exact" ray casting or "fast" fixed-magnification

    def __post_init__(self):
        if self.c_sim <= 0:
            raise ConfigError("contrast threshold c_sim must be positive")
        if not (0.0 <= self.v_mm_s <= V_ROLLER_MAX_MM_S):
            raise ConfigError(f"v_mm_s={self.v_mm_s} outside supported range [0, 500] mm/s")
        if self.noise_rate < 0 or self.scan_len_mm < 0:
            raise ConfigError("noise rate and scan length must be non-negative")
        if self.render not in ("exact", "fast"):
            raise ConfigError("render mode must be 'exact' or 'fast'")


def scan_trajectory(cfg: ScanConfig, t0_us: int = 0, step_us: int = 1000) -> list[PoseSE3]:
    """Constant-velocity pass along +x, centered over the surface origin."""
    if cfg.v_mm_s <= 0:
        raise ConfigError("scan trajectory needs a positive roller speed")
    duration_us = int(round(cfg.scan_len_mm / cfg.v_mm_s * 1e6))
    from .geometry import constant_velocity_trajectory

    return constant_velocity_trajectory(
        (-0.5 * cfg.scan_len_mm, cfg.y_mm, 0.0),
        (cfg.v_mm_s, 0.0, 0.0),
        duration_us,
        step_us=step_us,
        t0_us=t0_us,
    )


# ---------------------------------------------------------------------------
# rendering


def _ray_cast_depth(
    surface: SurfaceModel,
    cam: np.ndarray,
    dirs_x: np.ndarray,
    dirs_y: np.ndarray,
    dirs_z: np.ndarray,
    membrane_mm: float,
    tol: float = 1e-12,
    max_fp_iter: int = 40,
    bisect_iters: int = 48,
) -> np.ndarray:
    """Ray/membrane intersection: returns the ray parameter s (camera depth).

    Fixed-point iteration over the still-unconverged subset (flat regions
    drop out after a sweep or two), with a bisection fallback for pixels on
    steep patches where the iteration oscillates.
    """
    span = membrane_mm - cam[2]
    if span <= 0:
        raise ValueError("membrane surface is behind the camera")
    shape = dirs_x.shape
    dx = dirs_x.reshape(-1)
    dy = dirs_y.reshape(-1)
    dz = dirs_z.reshape(-1)
    s = np.full(dx.shape, span, dtype=np.float64) / dz
    active = np.arange(s.size)
    for _ in range(max_fp_iter):
        sa = s[active]
        indent = surface.indentation(cam[0] + sa * dx[active], cam[1] + sa * dy[active])
        s_new = (membrane_mm - indent - cam[2]) / dz[active]
        moved = np.abs(s_new - sa) >= tol
        s[active] = s_new
        active = active[moved]
        if not active.size:
            break
    if active.size:
        dxa, dya, dza = dx[active], dy[active], dz[active]
        lo = (membrane_mm - INDENT_MAX_MM - 0.01 - cam[2]) / dza
        hi = (membrane_mm + 0.01 - cam[2]) / dza
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            zray = cam[2] + mid * dza
            zsurf = membrane_mm - surface.indentation(cam[0] + mid * dxa, cam[1] + mid * dya)
            below = zray >= zsurf
            hi = np.where(below, mid, hi)
            lo = np.where(below, lo, mid)
        s[active] = 0.5 * (lo + hi)
    return s.reshape(shape)


def render_depth(
    surface: SurfaceModel,
    pose: PoseSE3,
    k: CameraIntrinsics,
    membrane_mm: float = MEMBRANE_DEPTH_MM,
    roi: tuple[int, int, int, int] | None = None,
    mode: str = "exact",
) -> np.ndarray:
    """Per-pixel camera depth (mm) of the indented membrane.

    ``roi`` is (x0, x1, y0, y1), half-open; ``mode='fast'`` skips the
    perspective correction inside the indentation (grid sampling at the
    nominal membrane depth), which is adequate for flow/appearance fixtures
    but not for parallax-accurate reconstruction inputs.
    """
    x0, x1, y0, y1 = roi if roi is not None else (0, k.width, 0, k.height)
    us = np.arange(x0, x1, dtype=np.float64)
    vs = np.arange(y0, y1, dtype=np.float64)
    cam = pose.translation
    rot = pose.rotation
    if not np.allclose(rot, np.eye(3), atol=1e-12):
        a, b = np.meshgrid((us - k.cx) / k.fx, (vs - k.cy) / k.fy)
        d = np.stack([a, b, np.ones_like(a)], axis=-1) @ rot.T
        return _ray_cast_depth(surface, cam, d[..., 0], d[..., 1], d[..., 2], membrane_mm)
    if mode == "fast":
        if membrane_mm - cam[2] <= 0:
            raise ValueError("membrane surface is behind the camera")
        span = membrane_mm - cam[2]
        x_w = cam[0] + (us - k.cx) / k.fx * span
        y_w = cam[1] + (vs - k.cy) / k.fy * span
        if hasattr(surface, "height_grid"):
            h = surface.height_grid(x_w, y_w)
        else:
            xg, yg = np.meshgrid(x_w, y_w)
            h = surface.height(xg, yg)
        return (membrane_mm - np.clip(h, 0.0, INDENT_MAX_MM)) - cam[2]
    a, b = np.meshgrid((us - k.cx) / k.fx, (vs - k.cy) / k.fy)
    return _ray_cast_depth(surface, cam, a, b, np.ones_like(a), membrane_mm)


def ground_truth_depth(
    surface: SurfaceModel,
    pose: PoseSE3,
    k: CameraIntrinsics,
    membrane_mm: float = MEMBRANE_DEPTH_MM,
) -> DepthMap:
    """Dense reference depth of the indented membrane seen from ``pose``."""
    depth = render_depth(surface, pose, k, membrane_mm=membrane_mm)
    return DepthMap(
        depth=depth,
        valid=np.ones(depth.shape, dtype=bool),
        ref_pose=pose,
        t_s=pose.t_us,
        t_e=pose.t_us,
    )


def log_intensity_from_depth(depth: np.ndarray, i0: float = 1.0, gain: float = 30.0) -> np.ndarray:
    gy, gx = np.gradient(depth)
    return np.log(i0 + gain * np.hypot(gx, gy))


def render_log_intensity(
    surface: SurfaceModel,
    pose: PoseSE3,
    k: CameraIntrinsics,
    membrane_mm: float = MEMBRANE_DEPTH_MM,
    i0: float = 1.0,
    gain: float = 30.0,
) -> np.ndarray:
    """Edge-emphasizing shading proxy of the rendered membrane."""
    return log_intensity_from_depth(
        render_depth(surface, pose, k, membrane_mm=membrane_mm), i0=i0, gain=gain
    )


# ---------------------------------------------------------------------------
# event generation


def _merge_intervals(spans: list[tuple[int, int]], gap: int = 8) -> list[tuple[int, int]]:
    if not spans:
        return []
    spans = sorted(spans)
    out = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= out[-1][1] + gap:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [(lo, hi) for lo, hi in out]


def _pixel_interval(w_lo, w_hi, cam_xy, zs, c_px, f_px, size, pad=6):
    """Conservative pixel span covering world interval [w_lo, w_hi]."""
    cands = [c_px + f_px * (w - cam_xy) / z for w in (w_lo, w_hi) for z in zs]
    lo = int(math.floor(min(cands))) - pad
    hi = int(math.ceil(max(cands))) + pad + 1
    return max(lo, 0), min(hi, size)


def _identity_rotations(trajectory: list[PoseSE3]) -> bool:
    return all(np.allclose(p.quat, [0, 0, 0, 1], atol=1e-12) for p in trajectory)


def generate_events(
    surface: SurfaceModel,
    cfg: ScanConfig,
    trajectory: list[PoseSE3],
    k: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Simulate the event stream of a rolling pass over ``surface``.

    Deterministic given (surface, cfg, trajectory, seed). The trajectory
    must be translation-only (the roller slides, it does not tilt).
    """
    k = k or CameraIntrinsics()
    if not trajectory:
        raise ConfigError("generate_events needs a trajectory")
    if not _identity_rotations(trajectory):
        raise ConfigError("only translation trajectories are supported by the simulator")

    key_t = np.array([p.t_us for p in trajectory], dtype=np.float64)
    key_xyz = np.stack([p.translation for p in trajectory])
    t0, t1 = key_t[0], key_t[-1]
    rate = max(cfg.sample_rate_hz, MIN_SAMPLE_RATE_HZ)
    dt_us = 1e6 / rate
    n_steps = max(int(math.ceil((t1 - t0) / dt_us)), 0)
    times = t0 + np.arange(n_steps + 1) * dt_us
    times[-1] = t1
    cams = np.stack([np.interp(times, key_t, key_xyz[:, i]) for i in range(3)], axis=1)

    l0 = np.log(cfg.i0)
    l_ref = np.full((k.height, k.width), l0, dtype=np.float64)
    l_prev = np.full((k.height, k.width), l0, dtype=np.float64)

    x_spans = surface.edge_intervals_x()
    y_span = surface.edge_interval_y()
    rng = np.random.default_rng(cfg.seed) if cfg.noise_rate > 0 else None
    n_px = k.width * k.height

    def rois(cam: np.ndarray) -> list[tuple[int, int, int, int]]:
        if not x_spans or y_span is None:
            return []
        span = cfg.membrane_mm - cam[2]
        if cfg.render == "fast":
            zs = (span,)  # fixed magnification: no depth-range inflation
        else:
            zs = (span - INDENT_MAX_MM - 0.2, span + 0.2)
        v0, v1 = _pixel_interval(y_span[0], y_span[1], cam[1], zs, k.cy, k.fy, k.height)
        if v0 >= v1:
            return []
        u_spans = _merge_intervals(
            [_pixel_interval(a, b, cam[0], zs, k.cx, k.fx, k.width) for a, b in x_spans]
        )
        return [(u0, u1, v0, v1) for u0, u1 in u_spans if u0 < u1]

    def patch_log_intensity(cam: np.ndarray, box) -> tuple[np.ndarray, tuple]:
        u0, u1, v0, v1 = box
        pu0, pu1 = max(u0 - 1, 0), min(u1 + 1, k.width)
        pv0, pv1 = max(v0 - 1, 0), min(v1 + 1, k.height)
        depth = render_depth(
            surface,
            PoseSE3.from_translation(cam),
            k,
            membrane_mm=cfg.membrane_mm,
            roi=(pu0, pu1, pv0, pv1),
            mode=cfg.render,
        )
        lp = log_intensity_from_depth(depth, i0=cfg.i0, gain=cfg.gain)
        return lp[v0 - pv0 : v1 - pv0, u0 - pu0 : u1 - pu0], (u0, u1, v0, v1)

    # initialize reference levels from the true first view
    for box in rois(cams[0]):
        lp, (u0, u1, v0, v1) = patch_log_intensity(cams[0], box)
        l_ref[v0:v1, u0:u1] = lp
        l_prev[v0:v1, u0:u1] = lp

    chunks = []
    for i in range(1, len(times)):
        t_a, t_b = times[i - 1], times[i]
        step = t_b - t_a
        if step <= 0:
            continue
        step_chunks = []
        for box in rois(cams[i]):
            lp, (u0, u1, v0, v1) = patch_log_intensity(cams[i], box)
            ref = l_ref[v0:v1, u0:u1]
            prev = l_prev[v0:v1, u0:u1]
            diff = lp - ref
            fired = np.abs(diff) >= cfg.c_sim
            if fired.any():
                fy, fx = np.nonzero(fired)
                d_cur = diff[fy, fx]
                d_prev = prev[fy, fx] - ref[fy, fx]
                pol = np.where(d_cur > 0, 1, -1).astype(np.int8)
                thr = cfg.c_sim * pol
                denom = d_cur - d_prev
                with np.errstate(divide="ignore", invalid="ignore"):
                    alpha = np.where(np.abs(denom) > 1e-300, (thr - d_prev) / denom, 1.0)
                alpha = np.clip(alpha, 0.0, 1.0)
                t_ev = np.rint(t_a + alpha * step).astype(np.int64)
                step_chunks.append(
                    make_events((fx + u0).astype(np.uint16), (fy + v0).astype(np.uint16), t_ev, pol)
                )
                ref[fired] = lp[fired]
            prev[:] = lp
        if rng is not None:
            lam = cfg.noise_rate * n_px * step * 1e-6
            n_noise = int(rng.poisson(lam))
            if n_noise:
                step_chunks.append(
                    make_events(
                        rng.integers(0, k.width, n_noise).astype(np.uint16),
                        rng.integers(0, k.height, n_noise).astype(np.uint16),
                        np.rint(t_a + rng.random(n_noise) * step).astype(np.int64),
                        np.where(rng.random(n_noise) < 0.5, -1, 1).astype(np.int8),
                    )
                )
        if step_chunks:
            ev = concat_events(step_chunks)
            order = np.lexsort((ev["x"], ev["y"], ev["t"]))
            chunks.append(ev[order])
    if not chunks:
        return empty_events()
    return concat_events(chunks)
