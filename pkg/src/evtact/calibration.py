"""Sphere-contact calibration of thresholding and fusion parameters.

Ground truth: pressing a sphere of known radius leaves a circular contact
patch. With the patch radius r and center (x_b, y_b) in pixels and the
sphere radius converted to pixels through the mm-per-pixel scale factor,
every contact pixel depth follows the sphere equation, giving an analytic
indentation map. The five parameters {C, G_f, w_s, w_m, w_e} are then grid
searched to minimize the masked mean absolute error of the fused map.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .emvs import DepthMap
from .errors import ConfigError, DataError, MetricError
from .fusion import FusionWeights, fuse_bma
from .surfaces import MEMBRANE_DEPTH_MM

logger = logging.getLogger(__name__)

DEFAULT_SCALE_F_MM_PER_PX = 0.0422
DEFAULT_SPHERE_RADIUS_MM = 4.0
WEIGHT_LATTICE_DENOM = 18  # simplex step 1/18 reproduces the shipped optima


@dataclass(frozen=True)
class ContactCircle:
    """Detected contact patch: radius and center in pixel coordinates."""

    r: float
    x: float
    y: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("contact circle radius must be positive")


@dataclass(frozen=True)
class CalibParams:
    """The calibrated parameter set {C, G_f, fusion weights}."""

    c: int = 16
    g_f: int = 45
    weights: FusionWeights = field(default_factory=FusionWeights)

    def __post_init__(self):
        if not (5 <= self.c <= 20):
            raise ConfigError(f"C={self.c} outside [5, 20]")
        if self.g_f % 2 == 0 or not (11 <= self.g_f <= 91):
            raise ConfigError(f"G_f={self.g_f} must be odd and within [11, 91]")

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "g_f": self.g_f,
            "w_s": self.weights.w_s,
            "w_m": self.weights.w_m,
            "w_e": self.weights.w_e,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibParams":
        try:
            return cls(
                c=int(d["c"]),
                g_f=int(d["g_f"]),
                weights=FusionWeights.normalized(float(d["w_s"]), float(d["w_m"]), float(d["w_e"])),
            )
        except KeyError as exc:
            raise ConfigError(f"calibration dict missing key {exc}") from exc


DEFAULT_CALIB = CalibParams()


def save_calibration(path, params: CalibParams, mae_mm=None, coverage=None, grid_spec=None) -> None:
    payload = params.to_dict()
    payload.update(
        {
            "mae_mm": mae_mm,
            "coverage": coverage,
            "grid_spec": grid_spec,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
    )
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_calibration(path) -> CalibParams:
    try:
        return CalibParams.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# contact geometry


def detect_contact_circle(
    zmap: DepthMap, min_indent_mm: float = 0.0, membrane_mm: float = MEMBRANE_DEPTH_MM
) -> ContactCircle:
    """Minimum enclosing circle of the largest connected contact component.

    ``min_indent_mm > 0`` restricts the mask to pixels actually indented by
    at least that much, rejecting the evidence band outside the rim.
    """
    mask = zmap.valid
    if min_indent_mm > 0:
        mask = mask & (zmap.depth < membrane_mm - min_indent_mm)
    if not mask.any():
        raise DataError("no contact pixels: cannot detect a contact circle")
    n, labels, stats, _ = cv2.connectedComponentsWithStats(mask.astype(np.uint8), connectivity=8)
    best = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    ys, xs = np.nonzero(labels == best)
    pts = np.column_stack([xs, ys]).astype(np.float32)
    (cx, cy), r = cv2.minEnclosingCircle(pts)
    return ContactCircle(r=float(r), x=float(cx), y=float(cy))


def sphere_center_depth(r_px: float, sphere_radius_px: float) -> float:
    """Depth of the sphere center below the contact plane, in pixel units."""
    if r_px < 0 or r_px > sphere_radius_px:
        raise ValueError(
            f"contact radius {r_px} px exceeds sphere radius {sphere_radius_px} px"
        )
    return -float(np.sqrt(sphere_radius_px**2 - r_px**2))


@dataclass
class GroundTruthDepth:
    """Analytic sphere-contact depth map plus the mask it is defined on."""

    zmap: DepthMap
    mask: np.ndarray
    circle: ContactCircle
    sphere_radius_px: float
    f_mm_per_px: float
    membrane_mm: float

    def indentation_px(self) -> np.ndarray:
        """Recover the indentation above the contact plane in pixel units."""
        return (self.membrane_mm - self.zmap.depth) / self.f_mm_per_px


def sphere_ground_truth(
    circle: ContactCircle,
    sphere_radius_mm: float,
    f_mm_per_px: float,
    shape: tuple[int, int],
    membrane_mm: float = MEMBRANE_DEPTH_MM,
) -> GroundTruthDepth:
    """Solve the sphere equation for every pixel inside the contact circle.

    The camera-near branch is taken (deepest indentation at the center);
    indentation goes to zero continuously at the rim. Output depths are in
    mm, referenced from the camera like every other depth map.
    """
    if f_mm_per_px <= 0:
        raise ConfigError("scale factor must be positive")
    r_sphere_px = sphere_radius_mm / f_mm_per_px
    z_b = sphere_center_depth(circle.r, r_sphere_px)  # raises if r too large
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    rho2 = (xs - circle.x) ** 2 + (ys - circle.y) ** 2
    mask = rho2 <= circle.r**2
    indent_px = np.zeros((h, w), dtype=np.float64)
    indent_px[mask] = np.sqrt(r_sphere_px**2 - rho2[mask]) + z_b
    depth = np.full((h, w), membrane_mm, dtype=np.float64)
    depth -= indent_px * f_mm_per_px
    zmap = DepthMap(depth=depth, valid=mask.copy(), ref_pose=None, t_s=0, t_e=0)
    return GroundTruthDepth(
        zmap=zmap,
        mask=mask,
        circle=circle,
        sphere_radius_px=r_sphere_px,
        f_mm_per_px=f_mm_per_px,
        membrane_mm=membrane_mm,
    )


def masked_mae(
    zmap: DepthMap, gt: GroundTruthDepth, strict: bool = False
) -> tuple[float, float]:
    """Mean absolute depth error over the contact mask; returns (mae, coverage).

    By default only pixels valid in ``zmap`` enter the mean. With
    ``strict=True`` every masked pixel counts and missing ones are scored
    as if the map reported the undeformed membrane.
    """
    if zmap.shape != gt.mask.shape:
        raise ConfigError(f"resolution mismatch: {zmap.shape} vs {gt.mask.shape}")
    inter = gt.mask & zmap.valid
    n_mask = int(gt.mask.sum())
    n_inter = int(inter.sum())
    if n_mask == 0 or (n_inter == 0 and not strict):
        raise MetricError("empty mask/valid intersection: MAE undefined")
    coverage = n_inter / n_mask
    err_sum = float(np.abs(zmap.depth[inter] - gt.zmap.depth[inter]).sum())
    if strict:
        missing = gt.mask & ~zmap.valid
        err_sum += float(np.abs(gt.membrane_mm - gt.zmap.depth[missing]).sum())
        return err_sum / n_mask, coverage
    return err_sum / n_inter, coverage


# ---------------------------------------------------------------------------
# grid search


def weight_lattice(denom: int = WEIGHT_LATTICE_DENOM) -> list[FusionWeights]:
    """All weight triples on the simplex lattice with step 1/denom."""
    if denom < 1:
        raise ConfigError("weight lattice denominator must be >= 1")
    out = []
    for a in range(denom + 1):
        for b in range(denom + 1 - a):
            out.append(FusionWeights(a / denom, b / denom, (denom - a - b) / denom))
    return out


@dataclass
class CalibGrid:
    """Grid-search space over C, G_f and the weight simplex."""

    c_values: tuple = (5, 8, 11, 14, 17, 20)
    g_values: tuple = (11, 27, 43, 59, 75, 91)
    weight_denom: int = WEIGHT_LATTICE_DENOM

    def __post_init__(self):
        if not self.c_values or not self.g_values:
            raise ConfigError("calibration grid must be non-empty")
        for c in self.c_values:
            if not (5 <= c <= 20):
                raise ConfigError(f"grid C value {c} outside [5, 20]")
        for g in self.g_values:
            if g % 2 == 0 or not (11 <= g <= 91):
                raise ConfigError(f"grid G_f value {g} must be odd in [11, 91]")

    def describe(self) -> dict:
        return {
            "c_values": list(self.c_values),
            "g_values": list(self.g_values),
            "weight_step": f"1/{self.weight_denom}",
        }


@dataclass
class GridSearchResult:
    params: CalibParams
    mae_mm: float
    coverage: float
    evaluations: list  # (CalibParams, mae, coverage) for every evaluated point


def grid_search(extract_maps, gt: GroundTruthDepth, grid: CalibGrid, strict: bool = False) -> GridSearchResult:
    """Exhaustive search minimizing the masked MAE of the fused map.

    ``extract_maps(c, g_f)`` must return the three warped start/mid/end maps
    in the common reference view; the (much cheaper) weight sweep then only
    redoes fusion and the error metric. Failures at a grid point are logged
    and skipped. Ties break toward smaller C, then smaller G_f, then
    lexicographically smaller weights, so results are reproducible.
    """
    weights = weight_lattice(grid.weight_denom)
    # crop to the mask's bounding box: fusion + MAE only matter there
    ys, xs = np.nonzero(gt.mask)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    gt_crop = GroundTruthDepth(
        zmap=DepthMap(
            depth=gt.zmap.depth[y0:y1, x0:x1],
            valid=gt.zmap.valid[y0:y1, x0:x1],
            ref_pose=gt.zmap.ref_pose,
        ),
        mask=gt.mask[y0:y1, x0:x1],
        circle=gt.circle,
        sphere_radius_px=gt.sphere_radius_px,
        f_mm_per_px=gt.f_mm_per_px,
        membrane_mm=gt.membrane_mm,
    )

    best = None
    evaluations = []
    for c in sorted(grid.c_values):
        for g_f in sorted(grid.g_values):
            try:
                maps = extract_maps(int(c), int(g_f))
            except Exception as exc:  # a bad grid point must not kill the search
                logger.warning("grid point C=%s G_f=%s failed: %s", c, g_f, exc)
                continue
            cropped = [
                DepthMap(
                    depth=m.depth[y0:y1, x0:x1], valid=m.valid[y0:y1, x0:x1], ref_pose=m.ref_pose
                )
                for m in maps
            ]
            for wgt in weights:
                params = CalibParams(c=int(c), g_f=int(g_f), weights=wgt)
                try:
                    fused = fuse_bma(cropped, wgt)
                    mae, cov = masked_mae(fused, gt_crop, strict=strict)
                except MetricError as exc:
                    logger.warning("grid point %s failed: %s", params, exc)
                    continue
                evaluations.append((params, mae, cov))
                if best is None or mae < best[1]:
                    best = (params, mae, cov)
    if best is None:
        raise MetricError("every grid point failed: no calibration found")
    return GridSearchResult(
        params=best[0], mae_mm=best[1], coverage=best[2], evaluations=evaluations
    )


def cross_validate(objects, candidates: list[CalibParams]):
    """Average each candidate parameter set across every object's metric.

    ``objects`` maps names to callables ``theta -> mae``; returns (table,
    best_index) where table rows are (candidate, per-object maes, mean).
    """
    if not objects or not candidates:
        raise ConfigError("cross-validation needs objects and candidates")
    table = []
    for cand in candidates:
        maes = [float(fn(cand)) for _, fn in objects]
        table.append((cand, maes, float(np.mean(maes))))
    best_idx = int(np.argmin([row[2] for row in table]))
    return table, best_idx
