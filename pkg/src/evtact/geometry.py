"""Camera model and rigid-body poses.

Conventions used everywhere in this package:

* lengths are millimeters, timestamps are integer microseconds;
* the camera looks down its +z axis, image u grows with x, v with y;
* a pose maps points from its own (camera) frame into the parent frame:
  ``p_parent = R @ p_local + t``.

Points and pixels are plain numpy arrays (``(3,)``/``(N, 3)`` and
``(2,)``/``(N, 2)``); poses store the rotation as a unit quaternion and
produce matrices on demand.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import ConfigError

DEFAULT_WIDTH = 640
DEFAULT_HEIGHT = 480
DEFAULT_FOCAL_PX = 600.0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (focal lengths and principal point in pixels)."""

    fx: float = DEFAULT_FOCAL_PX
    fy: float = DEFAULT_FOCAL_PX
    cx: float = DEFAULT_WIDTH / 2
    cy: float = DEFAULT_HEIGHT / 2
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} sensor"
            )

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def k_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


def _as_points(p) -> tuple[np.ndarray, bool]:
    """Return (``(N, 3)`` float array, was_single_point)."""
    a = np.asarray(p, dtype=np.float64)
    if a.ndim == 1:
        return a.reshape(1, 3), True
    return a, False


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform with an optional timestamp.

    Rotation is stored as a scalar-last unit quaternion; the matrix form is
    built on demand. Instances are immutable values.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_us: int = 0

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be non-zero and finite")
        q = q / n
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "t_us", int(self.t_us))

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls, t_us: int = 0) -> "PoseSE3":
        return cls(t_us=t_us)

    @classmethod
    def from_translation(cls, xyz, t_us: int = 0) -> "PoseSE3":
        return cls(translation=np.asarray(xyz, dtype=np.float64), t_us=t_us)

    @classmethod
    def from_rotation_translation(cls, rotation: np.ndarray, translation, t_us: int = 0) -> "PoseSE3":
        q = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
        return cls(quat=q, translation=translation, t_us=t_us)

    @classmethod
    def from_matrix(cls, m: np.ndarray, t_us: int = 0) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 homogeneous matrix, got {m.shape}")
        return cls.from_rotation_translation(m[:3, :3], m[:3, 3], t_us=t_us)

    # -- views -------------------------------------------------------------

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    # -- group operations --------------------------------------------------

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply ``other`` first, then ``self``."""
        r_self = Rotation.from_quat(self.quat)
        q = (r_self * Rotation.from_quat(other.quat)).as_quat()
        t = r_self.apply(other.translation) + self.translation
        return PoseSE3(quat=q, translation=t, t_us=other.t_us)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        r_inv = Rotation.from_quat(self.quat).inv()
        return PoseSE3(quat=r_inv.as_quat(), translation=-r_inv.apply(self.translation), t_us=self.t_us)

    def apply(self, points) -> np.ndarray:
        """Transform point(s) from this pose's frame into the parent frame."""
        pts, single = _as_points(points)
        out = Rotation.from_quat(self.quat).apply(pts) + self.translation
        return out[0] if single else out

    def with_timestamp(self, t_us: int) -> "PoseSE3":
        return PoseSE3(quat=self.quat, translation=self.translation, t_us=t_us)

    def is_close(self, other: "PoseSE3", tol: float = 1e-9) -> bool:
        dr = np.abs(self.rotation - other.rotation).max()
        dt = np.abs(self.translation - other.translation).max()
        return dr < tol and dt < tol


# ---------------------------------------------------------------------------
# projection


def project(points, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole-project camera-frame point(s) to pixel coordinates.

    Raises ValueError for non-positive depth.
    """
    pts, single = _as_points(points)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise ValueError("cannot project point(s) at non-positive depth")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = k.fx * pts[:, 0] / z + k.cx
    uv[:, 1] = k.fy * pts[:, 1] / z + k.cy
    return uv[0] if single else uv


def back_project(pixels, depth, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) at the given depth(s) back to camera-frame 3D points."""
    px = np.asarray(pixels, dtype=np.float64)
    single = px.ndim == 1
    px = px.reshape(-1, 2)
    d = np.broadcast_to(np.asarray(depth, dtype=np.float64), (px.shape[0],))
    if np.any(d <= 0):
        raise ValueError("back-projection requires positive depth")
    out = np.empty((px.shape[0], 3))
    out[:, 0] = (px[:, 0] - k.cx) / k.fx * d
    out[:, 1] = (px[:, 1] - k.cy) / k.fy * d
    out[:, 2] = d
    return out[0] if single else out


def transform_point(points, pose: PoseSE3) -> np.ndarray:
    return pose.apply(points)


def relative_pose(pose_ref: PoseSE3, pose_other: PoseSE3) -> PoseSE3:
    """Pose of ``other`` expressed in ``ref``'s frame: ref_T_other."""
    return pose_ref.inverse().compose(pose_other)


def hand_eye_compose(base_t_effector: PoseSE3, effector_t_camera: PoseSE3) -> PoseSE3:
    """Chain the end-effector pose with the fixed hand-eye transform."""
    return base_t_effector.compose(effector_t_camera)


# ---------------------------------------------------------------------------
# trajectories


def interpolate_pose(trajectory: list[PoseSE3], t_us) -> PoseSE3:
    """Linear translation / slerp rotation interpolation at time ``t_us``.

    The trajectory must be sorted by timestamp; querying outside its span
    raises ValueError.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    times = np.array([p.t_us for p in trajectory], dtype=np.float64)
    t = float(t_us)
    if t < times[0] or t > times[-1]:
        raise ValueError(f"time {t_us} outside trajectory span [{times[0]:.0f}, {times[-1]:.0f}]")
    idx = int(np.searchsorted(times, t, side="right")) - 1
    idx = min(max(idx, 0), len(trajectory) - 2) if len(trajectory) > 1 else 0
    p0 = trajectory[idx]
    if len(trajectory) == 1 or times[idx] == t:
        return p0.with_timestamp(int(round(t)))
    p1 = trajectory[idx + 1]
    span = times[idx + 1] - times[idx]
    alpha = (t - times[idx]) / span
    trans = (1.0 - alpha) * p0.translation + alpha * p1.translation
    rots = Rotation.from_quat(np.stack([p0.quat, p1.quat]))
    q = Slerp([0.0, 1.0], rots)(alpha).as_quat()
    return PoseSE3(quat=q, translation=trans, t_us=int(round(t)))


def interpolate_poses(trajectory: list[PoseSE3], times_us) -> tuple[np.ndarray, Rotation]:
    """Vectorized pose interpolation: translations ``(N, 3)`` plus rotations.

    All query times must lie within the trajectory span.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    t = np.asarray(times_us, dtype=np.float64).reshape(-1)
    keys = np.array([p.t_us for p in trajectory], dtype=np.float64)
    if t.size and (t.min() < keys[0] or t.max() > keys[-1]):
        raise ValueError(
            f"query times [{t.min():.0f}, {t.max():.0f}] outside trajectory span "
            f"[{keys[0]:.0f}, {keys[-1]:.0f}]"
        )
    quats = np.stack([p.quat for p in trajectory])
    trans_keys = np.stack([p.translation for p in trajectory])
    if len(trajectory) == 1:
        trans = np.broadcast_to(trans_keys[0], (t.size, 3)).copy()
        rots = Rotation.from_quat(np.broadcast_to(quats[0], (t.size, 4)))
        return trans, rots
    trans = np.stack([np.interp(t, keys, trans_keys[:, i]) for i in range(3)], axis=1)
    if np.allclose(quats, quats[0], atol=1e-15):
        rots = Rotation.from_quat(np.broadcast_to(quats[0], (max(t.size, 1), 4)))
    else:
        rots = Slerp(keys, Rotation.from_quat(quats))(t)
    return trans, rots


TRAJECTORY_HEADER = ["t_us", "x_mm", "y_mm", "z_mm", "qx", "qy", "qz", "qw"]


def save_trajectory_csv(path, trajectory: list[PoseSE3]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for p in trajectory:
            w.writerow(
                [p.t_us]
                + [f"{v:.9f}" for v in p.translation]
                + [f"{v:.12f}" for v in p.quat]
            )


def load_trajectory_csv(path) -> list[PoseSE3]:
    from .errors import DataError

    path = Path(path)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        out = []
        for i, row in enumerate(r):
            if not row:
                continue
            if len(row) != 8:
                raise DataError(f"{path}: row {i + 2} has {len(row)} fields, expected 8")
            try:
                t_us = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: row {i + 2}: {exc}") from exc
            out.append(PoseSE3(quat=vals[3:7], translation=vals[0:3], t_us=t_us))
    if any(b.t_us < a.t_us for a, b in zip(out, out[1:])):
        raise DataError(f"{path}: timestamps are not sorted")
    return out


def constant_velocity_trajectory(
    start_xyz, velocity_mm_s, duration_us: int, step_us: int = 1000, t0_us: int = 0
) -> list[PoseSE3]:
    """Straight-line constant-velocity trajectory sampled every ``step_us``."""
    start = np.asarray(start_xyz, dtype=np.float64)
    vel = np.asarray(velocity_mm_s, dtype=np.float64)
    times = np.arange(t0_us, t0_us + duration_us + step_us, step_us, dtype=np.int64)
    times[-1] = min(times[-1], t0_us + duration_us)
    return [
        PoseSE3.from_translation(start + vel * ((t - t0_us) * 1e-6), t_us=int(t))
        for t in times
    ]


# ---------------------------------------------------------------------------
# config loading


def load_camera_config(path) -> tuple[CameraIntrinsics, PoseSE3]:
    """Read intrinsics plus hand-eye transform from a JSON config file.

    Expected keys: fx, fy, cx, cy, width, height and ``hand_eye`` as a 4x4
    row-major matrix (nested lists or a flat list of 16).
    """
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        k = CameraIntrinsics(
            fx=float(cfg["fx"]),
            fy=float(cfg["fy"]),
            cx=float(cfg["cx"]),
            cy=float(cfg["cy"]),
            width=int(cfg["width"]),
            height=int(cfg["height"]),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing intrinsics key {exc}") from exc
    he = np.asarray(cfg.get("hand_eye", np.eye(4).tolist()), dtype=np.float64)
    if he.size != 16:
        raise ConfigError(f"{path}: hand_eye must have 16 entries, got {he.size}")
    try:
        hand_eye = PoseSE3.from_matrix(he.reshape(4, 4))
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid hand_eye matrix: {exc}") from exc
    return k, hand_eye
