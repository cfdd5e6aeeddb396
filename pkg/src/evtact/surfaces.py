"""Analytic test surfaces scanned by the simulated roller.

Every surface exposes ``height(x, y)``: how far the object protrudes into
the membrane at a world position, in mm. The membrane indentation is
``clip(height, 0, INDENT_MAX_MM)`` and the membrane sits at a nominal
camera depth (47 mm by default), so the rendered depth of a point is
``membrane_mm - indentation``.

Objects carry slightly chamfered edges (``edge_smooth_mm``): a soft
membrane cannot follow a perfectly vertical face, and an instantaneous
height step would make the reconstructed depth at the step ambiguous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

INDENT_MAX_MM = 4.5
MEMBRANE_DEPTH_MM = 47.0


def _ramp(dist_inside: np.ndarray, smooth: float) -> np.ndarray:
    """0 outside, 1 at ``smooth`` inside the boundary, linear in between."""
    if smooth <= 0:
        return (dist_inside > 0).astype(np.float64)
    return np.clip(dist_inside / smooth, 0.0, 1.0)


class SurfaceModel:
    """Base class; concrete surfaces implement ``height``."""

    kind = "flat"

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.zeros_like(x)

    def indentation(self, x, y) -> np.ndarray:
        return np.clip(self.height(np.asarray(x, float), np.asarray(y, float)), 0.0, INDENT_MAX_MM)

    def edge_intervals_x(self) -> list[tuple[float, float]]:
        """World-x intervals that can contain non-zero height gradient."""
        return []

    def edge_interval_y(self) -> tuple[float, float] | None:
        return None

    def regions(self) -> list[dict]:
        """Named axis-aligned footprints of flat top surfaces, if any."""
        return []

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    @staticmethod
    def from_dict(spec: dict) -> "SurfaceModel":
        kinds = {
            "flat": SurfaceModel,
            "sphere": SphereSurface,
            "stairs": StairsSurface,
            "sparse_sphere": SparseSphereSurface,
            "line_array": LineArraySurface,
            "braille_plate": BraillePlateSurface,
            "heightfield": HeightfieldSurface,
        }
        kind = spec.get("kind")
        if kind not in kinds:
            raise ConfigError(f"unknown surface kind: {kind!r}")
        args = {k: v for k, v in spec.items() if k != "kind"}
        try:
            return kinds[kind](**args) if kind != "flat" else SurfaceModel()
        except TypeError as exc:
            raise ConfigError(f"bad parameters for surface {kind!r}: {exc}") from exc

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def load_json(path) -> "SurfaceModel":
        try:
            spec = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return SurfaceModel.from_dict(spec)


@dataclass
class SphereSurface(SurfaceModel):
    """Rigid sphere pressed ``press_mm`` into the membrane at ``center``."""

    radius_mm: float = 4.0
    press_mm: float = 0.6
    center: tuple[float, float] = (0.0, 0.0)
    kind = "sphere"

    def __post_init__(self):
        if not (0 < self.press_mm <= self.radius_mm):
            raise ConfigError("press_mm must be in (0, radius_mm]")

    @property
    def contact_radius_mm(self) -> float:
        r2 = self.radius_mm**2 - (self.radius_mm - self.press_mm) ** 2
        return float(np.sqrt(r2))

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rho2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        cap = np.sqrt(np.maximum(self.radius_mm**2 - rho2, 0.0))
        h = self.press_mm - self.radius_mm + cap
        return np.where(rho2 < self.radius_mm**2, np.maximum(h, 0.0), 0.0)

    def edge_intervals_x(self):
        r = self.contact_radius_mm
        return [(self.center[0] - r, self.center[0] + r)]

    def edge_interval_y(self):
        r = self.contact_radius_mm
        return (self.center[1] - r, self.center[1] + r)

    def to_dict(self):
        return {
            "kind": self.kind,
            "radius_mm": self.radius_mm,
            "press_mm": self.press_mm,
            "center": list(self.center),
        }


@dataclass
class StairsSurface(SurfaceModel):
    """Staircase rising along +x, centered on the origin."""

    step_height_mm: float = 0.1
    step_width_mm: float = 4.0
    n_steps: int = 5
    length_y_mm: float = 12.0
    edge_smooth_mm: float = 0.15
    kind = "stairs"

    def __post_init__(self):
        if self.n_steps < 1 or self.step_height_mm <= 0 or self.step_width_mm <= 0:
            raise ConfigError("stairs need positive step size and at least one step")

    @property
    def x_start(self) -> float:
        return -0.5 * self.n_steps * self.step_width_mm

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        s = self.edge_smooth_mm
        # ramped staircase: each step boundary contributes one smooth rise
        rel = x - self.x_start
        h = np.zeros_like(rel)
        for kstep in range(self.n_steps):
            h += self.step_height_mm * _ramp(rel - kstep * self.step_width_mm, s)
        # trailing edge back to zero
        h *= _ramp(self.n_steps * self.step_width_mm - rel + s, s)
        h *= _ramp(0.5 * self.length_y_mm - np.abs(y), s)
        return h

    def edge_intervals_x(self):
        s = max(self.edge_smooth_mm, 0.05)
        out = []
        for kstep in range(self.n_steps + 1):
            xk = self.x_start + kstep * self.step_width_mm
            out.append((xk - 2 * s, xk + 2 * s))
        return out

    def edge_interval_y(self):
        half = 0.5 * self.length_y_mm
        return (-half, half)

    def regions(self):
        out = []
        s = self.edge_smooth_mm
        half = 0.5 * self.length_y_mm - 3 * s
        for kstep in range(self.n_steps):
            x0 = self.x_start + kstep * self.step_width_mm + 3 * s
            x1 = self.x_start + (kstep + 1) * self.step_width_mm - 3 * s
            out.append(
                {
                    "name": f"step{kstep}",
                    "x0": x0,
                    "x1": x1,
                    "y0": -half,
                    "y1": half,
                    "height_mm": (kstep + 1) * self.step_height_mm,
                }
            )
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "step_height_mm": self.step_height_mm,
            "step_width_mm": self.step_width_mm,
            "n_steps": self.n_steps,
            "length_y_mm": self.length_y_mm,
            "edge_smooth_mm": self.edge_smooth_mm,
        }


@dataclass
class SparseSphereSurface(SurfaceModel):
    """Concentric raised rings sampled from a pressed-sphere cap profile."""

    ring_radii_mm: tuple = (0.8, 1.6)
    ring_width_mm: float = 0.4
    sphere_radius_mm: float = 4.0
    press_mm: float = 0.6
    center: tuple[float, float] = (0.0, 0.0)
    kind = "sparse_sphere"

    def _cap(self, rho):
        cap = np.sqrt(np.maximum(self.sphere_radius_mm**2 - rho**2, 0.0))
        return np.maximum(self.press_mm - self.sphere_radius_mm + cap, 0.0)

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rho = np.sqrt((x - self.center[0]) ** 2 + (y - self.center[1]) ** 2)
        h = np.zeros_like(rho)
        half = 0.5 * self.ring_width_mm
        for r in self.ring_radii_mm:
            bump = np.clip(1.0 - np.abs(rho - r) / half, 0.0, 1.0)
            h = np.maximum(h, self._cap(np.full_like(rho, r)) * bump)
        return h

    def edge_intervals_x(self):
        rmax = max(self.ring_radii_mm) + self.ring_width_mm
        return [(self.center[0] - rmax, self.center[0] + rmax)]

    def edge_interval_y(self):
        rmax = max(self.ring_radii_mm) + self.ring_width_mm
        return (self.center[1] - rmax, self.center[1] + rmax)

    def to_dict(self):
        return {
            "kind": self.kind,
            "ring_radii_mm": list(self.ring_radii_mm),
            "ring_width_mm": self.ring_width_mm,
            "sphere_radius_mm": self.sphere_radius_mm,
            "press_mm": self.press_mm,
            "center": list(self.center),
        }


@dataclass
class LineArraySurface(SurfaceModel):
    """Parallel raised bars (long axis along y), spaced along x."""

    heights_mm: tuple = (0.6, 0.6, 0.6)
    line_width_mm: float = 2.0
    pitch_mm: float = 6.0
    length_y_mm: float = 12.0
    edge_smooth_mm: float = 0.15
    kind = "line_array"

    def __post_init__(self):
        if not self.heights_mm or min(self.heights_mm) <= 0:
            raise ConfigError("line array needs positive heights")
        if self.line_width_mm <= 2 * self.edge_smooth_mm:
            raise ConfigError("line width must exceed twice the edge chamfer")

    def line_centers(self) -> np.ndarray:
        n = len(self.heights_mm)
        return (np.arange(n) - (n - 1) / 2.0) * self.pitch_mm

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        s = self.edge_smooth_mm
        h = np.zeros_like(x, dtype=np.float64)
        ramp_y = _ramp(0.5 * self.length_y_mm - np.abs(y), s)
        for xc, hk in zip(self.line_centers(), self.heights_mm):
            inside = 0.5 * self.line_width_mm - np.abs(x - xc)
            h = np.maximum(h, hk * _ramp(inside, s))
        return h * ramp_y

    def edge_intervals_x(self):
        half = 0.5 * self.line_width_mm
        return [(xc - half, xc + half) for xc in self.line_centers()]

    def edge_interval_y(self):
        half = 0.5 * self.length_y_mm
        return (-half, half)

    def regions(self):
        # full footprint plus a small margin: semi-dense reconstructions
        # concentrate at the bar edges, which belong to the bar
        out = []
        margin = 2 * self.edge_smooth_mm + 0.2
        half_y = 0.5 * self.length_y_mm - 1.0
        for i, (xc, hk) in enumerate(zip(self.line_centers(), self.heights_mm)):
            half = 0.5 * self.line_width_mm + margin
            out.append(
                {
                    "name": f"line{i}",
                    "x0": xc - half,
                    "x1": xc + half,
                    "y0": -half_y,
                    "y1": half_y,
                    "height_mm": hk,
                }
            )
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "heights_mm": list(self.heights_mm),
            "line_width_mm": self.line_width_mm,
            "pitch_mm": self.pitch_mm,
            "length_y_mm": self.length_y_mm,
            "edge_smooth_mm": self.edge_smooth_mm,
        }


@dataclass
class BraillePlateSurface(SurfaceModel):
    """A row of Braille cells spelling ``text``; dots are hemispheres."""

    text: str = "abc"
    dot_radius_mm: float = 0.635
    dot_spacing_mm: float = 2.54
    cell_pitch_mm: float = 7.2
    kind = "braille_plate"

    _dots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        from .braille import encode_pattern

        if min(self.dot_radius_mm, self.dot_spacing_mm, self.cell_pitch_mm) <= 0:
            raise ConfigError("braille plate dimensions must be positive")
        centers = self.cell_centers()
        s = self.dot_spacing_mm
        dots = []
        for ci, ch in enumerate(self.text):
            bits = encode_pattern(ch)
            # bit order: rows top to bottom, columns left to right
            for row in range(3):
                for col in range(2):
                    if bits[2 * row + col]:
                        dots.append((centers[ci] + (col - 0.5) * s, (row - 1) * s))
        self._dots = np.array(dots, dtype=np.float64).reshape(-1, 2)

    def cell_centers(self) -> np.ndarray:
        n = len(self.text)
        return (np.arange(n) - (n - 1) / 2.0) * self.cell_pitch_mm

    def dot_positions(self) -> np.ndarray:
        return self._dots.copy()

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.zeros_like(x, dtype=np.float64)
        r2 = self.dot_radius_mm**2
        if not self._dots.size:
            return h
        # dots are sparse; only dots near the queried x-range matter
        x_lo = float(np.min(x)) - self.dot_radius_mm
        x_hi = float(np.max(x)) + self.dot_radius_mm
        sel = (self._dots[:, 0] >= x_lo) & (self._dots[:, 0] <= x_hi)
        for dx, dy in self._dots[sel]:
            rho2 = (x - dx) ** 2 + (y - dy) ** 2
            h = np.maximum(h, np.sqrt(np.maximum(r2 - rho2, 0.0)))
        return h

    def height_grid(self, x_vec: np.ndarray, y_vec: np.ndarray) -> np.ndarray:
        """Separable-grid evaluation touching only per-dot blocks."""
        x_vec = np.asarray(x_vec, dtype=np.float64)
        y_vec = np.asarray(y_vec, dtype=np.float64)
        h = np.zeros((y_vec.size, x_vec.size), dtype=np.float64)
        if not self._dots.size or not h.size:
            return h
        r = self.dot_radius_mm
        sel = (self._dots[:, 0] >= x_vec[0] - r) & (self._dots[:, 0] <= x_vec[-1] + r)
        for dx, dy in self._dots[sel]:
            i0 = int(np.searchsorted(x_vec, dx - r))
            i1 = int(np.searchsorted(x_vec, dx + r, side="right"))
            j0 = int(np.searchsorted(y_vec, dy - r))
            j1 = int(np.searchsorted(y_vec, dy + r, side="right"))
            if i0 >= i1 or j0 >= j1:
                continue
            rho2 = (x_vec[i0:i1][None, :] - dx) ** 2 + (y_vec[j0:j1][:, None] - dy) ** 2
            cap = np.sqrt(np.maximum(r * r - rho2, 0.0))
            np.maximum(h[j0:j1, i0:i1], cap, out=h[j0:j1, i0:i1])
        return h

    def edge_intervals_x(self):
        xs = np.unique(np.round(self._dots[:, 0], 6))
        return [(x - self.dot_radius_mm, x + self.dot_radius_mm) for x in xs]

    def edge_interval_y(self):
        if not self._dots.size:
            return None
        r = self.dot_radius_mm
        return (float(self._dots[:, 1].min()) - r, float(self._dots[:, 1].max()) + r)

    def to_dict(self):
        return {
            "kind": self.kind,
            "text": self.text,
            "dot_radius_mm": self.dot_radius_mm,
            "dot_spacing_mm": self.dot_spacing_mm,
            "cell_pitch_mm": self.cell_pitch_mm,
        }


@dataclass
class HeightfieldSurface(SurfaceModel):
    """Bilinear heightfield on a regular grid centered at the origin."""

    grid_mm: list = field(default_factory=lambda: [[0.0]])
    spacing_mm: float = 0.5
    kind = "heightfield"

    def __post_init__(self):
        self._z = np.asarray(self.grid_mm, dtype=np.float64)
        if self._z.ndim != 2 or self.spacing_mm <= 0:
            raise ConfigError("heightfield needs a 2D grid and positive spacing")

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ny, nx = self._z.shape
        gx = x / self.spacing_mm + (nx - 1) / 2.0
        gy = y / self.spacing_mm + (ny - 1) / 2.0
        i0 = np.clip(np.floor(gx).astype(np.int64), 0, nx - 2 if nx > 1 else 0)
        j0 = np.clip(np.floor(gy).astype(np.int64), 0, ny - 2 if ny > 1 else 0)
        fx = np.clip(gx - i0, 0.0, 1.0)
        fy = np.clip(gy - j0, 0.0, 1.0)
        if nx == 1 or ny == 1:
            return np.broadcast_to(self._z[0, 0], x.shape).copy()
        z00 = self._z[j0, i0]
        z01 = self._z[j0, i0 + 1]
        z10 = self._z[j0 + 1, i0]
        z11 = self._z[j0 + 1, i0 + 1]
        inside = (gx >= 0) & (gx <= nx - 1) & (gy >= 0) & (gy <= ny - 1)
        val = (1 - fy) * ((1 - fx) * z00 + fx * z01) + fy * ((1 - fx) * z10 + fx * z11)
        return np.where(inside, val, 0.0)

    def edge_intervals_x(self):
        half = 0.5 * (self._z.shape[1] - 1) * self.spacing_mm
        return [(-half - self.spacing_mm, half + self.spacing_mm)]

    def edge_interval_y(self):
        half = 0.5 * (self._z.shape[0] - 1) * self.spacing_mm
        return (-half - self.spacing_mm, half + self.spacing_mm)

    def to_dict(self):
        return {"kind": self.kind, "grid_mm": self._z.tolist(), "spacing_mm": self.spacing_mm}
