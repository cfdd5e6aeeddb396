"""Command-line pipeline driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 metric
threshold failure. The default worker count comes from EVTACT_THREADS.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .braille import BraillePlateSpec, read_plate, wpm_metric
from .calibration import (
    CalibGrid,
    DEFAULT_CALIB,
    DEFAULT_SCALE_F_MM_PER_PX,
    DEFAULT_SPHERE_RADIUS_MM,
    load_calibration,
    save_calibration,
)
from .errors import ConfigError, DataError, MetricError
from .geometry import CameraIntrinsics, load_camera_config, load_trajectory_csv, save_trajectory_csv
from .io import load_events, read_ply, save_events, save_events_csv, write_pfm, write_pgm, write_ply
from .pipeline import PipelineConfig, ScanResult, bench_window, best_window, calibrate_scan, reconstruct_scan, window_mae
from .sim import ScanConfig, generate_events, scan_trajectory
from .stitch import evaluate_surface
from .surfaces import SurfaceModel

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_METRIC = 4


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("EVTACT_THREADS", "1")))
    except ValueError:
        return 1


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except MetricError as exc:
            click.echo(f"metric failure: {exc}", err=True)
            sys.exit(EXIT_METRIC)

    return wrapper


def _load_inputs(events_paths, poses_path):
    from .io import concat_events

    chunks = []
    width = height = None
    for p in events_paths:
        ev, w, h = load_events(p)
        if width is None:
            width, height = w, h
        elif (w, h) != (width, height):
            raise DataError(f"{p}: sensor size {w}x{h} differs from {width}x{height}")
        chunks.append(ev)
    events = concat_events(chunks)
    trajectory = load_trajectory_csv(poses_path)
    return events, trajectory, width, height


def _pipeline_config(camera, calib, window_us, z_min, z_max, n_planes, method, threads) -> PipelineConfig:
    if camera:
        intrinsics, _ = load_camera_config(camera)
    else:
        intrinsics = CameraIntrinsics()
    if calib:
        params = load_calibration(calib)
    else:
        click.echo("no calibration file given; using shipped defaults", err=True)
        params = DEFAULT_CALIB
    return PipelineConfig(
        intrinsics=intrinsics,
        calib=params,
        window_us=window_us,
        z_min_mm=z_min,
        z_max_mm=z_max,
        n_planes=n_planes,
        method=method,
        threads=threads,
    )


def _write_report(out_dir: Path, name: str, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _save_scan_artifacts(out_dir: Path, result: ScanResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, wres in enumerate(result.windows):
        for ref, zmap in wres.maps.items():
            write_pfm(out_dir / f"win{i:03d}_z{ref}.pfm", zmap.depth)
            write_pgm(out_dir / f"win{i:03d}_z{ref}_valid.pgm", (zmap.valid * 255).astype(np.uint8))
        write_pfm(out_dir / f"win{i:03d}_fused.pfm", wres.fused.depth)
        write_pgm(out_dir / f"win{i:03d}_fused_valid.pgm", (wres.fused.valid * 255).astype(np.uint8))
    if result.cloud is not None:
        write_ply(out_dir / "surface.ply", result.cloud.points, result.cloud.scalar)


@click.group()
@click.version_option(version=__version__)
def main():
    """Roller tactile scanning with an event camera."""


@main.command()
@click.option("--surface", "surface_path", type=click.Path(exists=True), required=True, help="surface spec JSON")
@click.option("--v-mm-s", type=float, default=300.0, show_default=True)
@click.option("--scan-len-mm", type=float, default=20.0, show_default=True)
@click.option("--contrast", type=float, default=0.25, show_default=True, help="simulator contrast threshold")
@click.option("--gain", type=float, default=30.0, show_default=True, help="shading gradient gain")
@click.option("--noise-rate", type=float, default=0.0, show_default=True, help="events/px/s background noise")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--render", type=click.Choice(["exact", "fast"]), default="exact", show_default=True)
@click.option("--csv", "also_csv", is_flag=True, help="emit the CSV debug stream too")
@click.option("--out-dir", type=click.Path(), required=True)
@_handle_errors
def simulate(surface_path, v_mm_s, scan_len_mm, contrast, gain, noise_rate, seed, render, also_csv, out_dir):
    """Generate a synthetic scan: events, poses and the surface spec."""
    surface = SurfaceModel.load_json(surface_path)
    cfg = ScanConfig(
        v_mm_s=v_mm_s,
        scan_len_mm=scan_len_mm,
        c_sim=contrast,
        gain=gain,
        noise_rate=noise_rate,
        seed=seed,
        render=render,
    )
    k = CameraIntrinsics()
    trajectory = scan_trajectory(cfg)
    t0 = time.perf_counter()
    events = generate_events(surface, cfg, trajectory, k)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_events(out / "events.bin", events, k.width, k.height)
    if also_csv:
        save_events_csv(out / "events.csv", events)
    save_trajectory_csv(out / "poses.csv", trajectory)
    surface.save_json(out / "surface.json")
    _write_report(
        out,
        "simulate_report.json",
        {
            "version": __version__,
            "n_events": int(len(events)),
            "duration_us": int(trajectory[-1].t_us - trajectory[0].t_us),
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "config": {
                "v_mm_s": v_mm_s,
                "scan_len_mm": scan_len_mm,
                "contrast": contrast,
                "gain": gain,
                "noise_rate": noise_rate,
                "seed": seed,
                "render": render,
            },
        },
    )
    click.echo(f"wrote {len(events)} events to {out / 'events.bin'}")


def _common_recon_options(fn):
    fn = click.option("--events", "events_paths", type=click.Path(exists=True), multiple=True, required=True)(fn)
    fn = click.option("--poses", "poses_path", type=click.Path(exists=True), required=True)(fn)
    fn = click.option("--camera", type=click.Path(exists=True), default=None, help="intrinsics JSON")(fn)
    fn = click.option("--calib", type=click.Path(exists=True), default=None, help="calibration JSON")(fn)
    fn = click.option("--window-us", type=int, default=20000, show_default=True)(fn)
    fn = click.option("--z-min", type=float, default=40.0, show_default=True)(fn)
    fn = click.option("--z-max", type=float, default=50.0, show_default=True)(fn)
    fn = click.option("--n-planes", type=int, default=64, show_default=True)(fn)
    fn = click.option("--threads", type=int, default=None, help="defaults to EVTACT_THREADS or 1")(fn)
    return fn


@main.command()
@_common_recon_options
@click.option("--method", type=click.Choice(["emvs", "lr", "bma"]), default="bma", show_default=True)
@click.option("--no-icp", is_flag=True, help="stitch with pose priors only")
@click.option("--voxel-mm", type=float, default=None, help="downsample voxel size")
@click.option("--out-dir", type=click.Path(), required=True)
@_handle_errors
def reconstruct(events_paths, poses_path, camera, calib, window_us, z_min, z_max, n_planes, threads, method, no_icp, voxel_mm, out_dir):
    """Per-window depth maps plus the stitched cloud."""
    events, trajectory, _, _ = _load_inputs(events_paths, poses_path)
    cfg = _pipeline_config(camera, calib, window_us, z_min, z_max, n_planes, method, threads or _default_threads())
    result = reconstruct_scan(events, trajectory, cfg, use_icp=not no_icp, voxel_mm=voxel_mm)
    out = Path(out_dir)
    _save_scan_artifacts(out, result)
    result.report["config"] = {
        "method": method,
        "window_us": window_us,
        "z_min": z_min,
        "z_max": z_max,
        "n_planes": n_planes,
        "threads": cfg.threads,
        "calib": cfg.calib.to_dict(),
    }
    _write_report(out, "report.json", result.report)
    click.echo(f"reconstructed {result.report['n_windows']} windows -> {out}")


@main.command()
@_common_recon_options
@click.option("--sphere-radius-mm", type=float, default=DEFAULT_SPHERE_RADIUS_MM, show_default=True)
@click.option("--scale-f", type=float, default=DEFAULT_SCALE_F_MM_PER_PX, show_default=True, help="mm per pixel")
@click.option("--c-values", default="5,8,11,14,17,20", show_default=True)
@click.option("--g-values", default="11,27,43,59,75,91", show_default=True)
@click.option("--weight-step", type=int, default=18, show_default=True, help="simplex lattice denominator")
@click.option("--strict-mask", is_flag=True, help="score missing pixels against the full mask")
@click.option("--out", "out_path", type=click.Path(), required=True)
@_handle_errors
def calibrate(events_paths, poses_path, camera, calib, window_us, z_min, z_max, n_planes, threads, sphere_radius_mm, scale_f, c_values, g_values, weight_step, strict_mask, out_path):
    """Grid-search {C, G_f, w_s, w_m, w_e} on a sphere scan."""
    events, trajectory, _, _ = _load_inputs(events_paths, poses_path)
    cfg = _pipeline_config(camera, calib, window_us, z_min, z_max, n_planes, "bma", threads or _default_threads())
    try:
        grid = CalibGrid(
            c_values=tuple(int(v) for v in c_values.split(",")),
            g_values=tuple(int(v) for v in g_values.split(",")),
            weight_denom=weight_step,
        )
    except ValueError as exc:
        raise ConfigError(f"bad grid spec: {exc}") from exc
    outcome = calibrate_scan(
        events, trajectory, cfg, sphere_radius_mm, scale_f, grid=grid, strict_mask=strict_mask
    )
    save_calibration(
        out_path,
        outcome.params,
        mae_mm=outcome.mae_mm,
        coverage=outcome.coverage,
        grid_spec=grid.describe(),
    )
    click.echo(
        f"calibrated C={outcome.params.c} G_f={outcome.params.g_f} "
        f"w=({outcome.params.weights.w_s:.3f},{outcome.params.weights.w_m:.3f},{outcome.params.weights.w_e:.3f}) "
        f"MAE={outcome.mae_mm:.4f} mm coverage={outcome.coverage:.2f}"
    )


@main.command()
@_common_recon_options
@click.option("--no-icp", is_flag=True)
@click.option("--voxel-mm", type=float, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True, help="output PLY")
@_handle_errors
def stitch(events_paths, poses_path, camera, calib, window_us, z_min, z_max, n_planes, threads, no_icp, voxel_mm, out_path):
    """Stitch all windows into one point cloud."""
    events, trajectory, _, _ = _load_inputs(events_paths, poses_path)
    cfg = _pipeline_config(camera, calib, window_us, z_min, z_max, n_planes, "bma", threads or _default_threads())
    result = reconstruct_scan(events, trajectory, cfg, use_icp=not no_icp, voxel_mm=voxel_mm)
    if result.cloud is None:
        raise DataError("no valid pixels anywhere: nothing to stitch")
    write_ply(out_path, result.cloud.points, result.cloud.scalar)
    click.echo(f"wrote {len(result.cloud)} points to {out_path}")


@main.command()
@click.option("--events", "events_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--v-mm-s", type=float, default=500.0, show_default=True)
@click.option("--pitch-mm", type=float, default=7.2, show_default=True)
@click.option("--dot-radius-mm", type=float, default=0.635, show_default=True)
@click.option("--dot-spacing-mm", type=float, default=2.54, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@_handle_errors
def braille(events_paths, v_mm_s, pitch_mm, dot_radius_mm, dot_spacing_mm, out_path):
    """Read a Braille plate scan into text."""
    from .io import concat_events

    chunks = []
    for p in events_paths:
        ev, _, _ = load_events(p)
        chunks.append(ev)
    events = concat_events(chunks)
    spec = BraillePlateSpec(
        dot_radius_mm=dot_radius_mm, dot_spacing_mm=dot_spacing_mm, cell_pitch_mm=pitch_mm
    )
    readout = read_plate(events, v_mm_s, spec)
    payload = {
        "text": readout.text,
        "per_cell": readout.cells,
        "wpm": round(wpm_metric(v_mm_s, pitch_mm), 1),
        "n_frames": readout.n_frames,
        "n_events": readout.n_events,
    }
    Path(out_path).write_text(json.dumps(payload, indent=2) + "\n")
    click.echo(f"read {len(readout.cells)} cells: {readout.text!r}")


@main.command()
@_common_recon_options
@click.option("--out", "out_path", type=click.Path(), required=True)
@_handle_errors
def bench(events_paths, poses_path, camera, calib, window_us, z_min, z_max, n_planes, threads, out_path):
    """Throughput of voting + extraction + fusion on the densest window."""
    events, trajectory, _, _ = _load_inputs(events_paths, poses_path)
    cfg = _pipeline_config(camera, calib, window_us, z_min, z_max, n_planes, "bma", threads or _default_threads())
    window, _ = best_window(events, trajectory, cfg)
    stats = bench_window(window, trajectory, cfg)
    Path(out_path).write_text(json.dumps(stats, indent=2) + "\n")
    click.echo(
        f"{stats['n_events']} events: vote {stats['vote_s'] * 1e3:.1f} ms, "
        f"window {stats['window_s'] * 1e3:.1f} ms"
    )


@main.command("eval")
@click.option("--cloud", "cloud_path", type=click.Path(exists=True), required=True, help="PLY point cloud")
@click.option("--surface", "surface_path", type=click.Path(exists=True), required=True, help="surface spec JSON")
@click.option("--max-mae", type=float, default=None, help="fail (exit 4) above this MAE")
@click.option("--out", "out_path", type=click.Path(), default=None)
@_handle_errors
def eval_cmd(cloud_path, surface_path, max_mae, out_path):
    """Compare a stitched cloud against an analytic surface."""
    from .stitch import PointCloud

    pts, scalar = read_ply(cloud_path)
    surface = SurfaceModel.load_json(surface_path)
    metrics = evaluate_surface(PointCloud(points=pts, scalar=scalar), surface)
    if out_path:
        Path(out_path).write_text(json.dumps(metrics, indent=2) + "\n")
    click.echo(json.dumps(metrics, indent=2))
    if max_mae is not None and metrics["mae_mm"] > max_mae:
        raise MetricError(f"MAE {metrics['mae_mm']:.4f} mm exceeds threshold {max_mae} mm")


if __name__ == "__main__":
    main()
