"""Command line interface: simulate, reconstruct, evaluate, bench, ablate.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure.  Runs are bit-reproducible for a fixed seed and worker count:
points are processed in fixed chunks with accumulators reduced in thread
order.  ``--threads`` caps the worker count (0 = auto, at most two);
``--strict-deterministic`` pins a single worker so outputs are comparable
across any machine with the same binary.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import io as mio
from .core import Volume
from .errors import MGaussError, NonFiniteLoss
from .metrics import evaluate_volumes
from .render import render_points, render_points_dense
from .simdata import (
    acquire_stack,
    build_slice_grids,
    devoxelize,
    fuse_trilinear,
    make_phantom,
    normalized_transforms,
)
from .spatial import build
from .train import Trainer

ORIENTATIONS = ("axial", "coronal", "sagittal")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, names):
    lines = [f"{_sha256(os.path.join(out_dir, n))}  {n}" for n in sorted(names)]
    mio.atomic_write(os.path.join(out_dir, "manifest.txt"),
                     ("\n".join(lines) + "\n").encode())


def _load_bundle(args):
    if args.config:
        bundle = mio.load_config(args.config)
    else:
        bundle = mio.parse_config_text("")
    if getattr(args, "seed", None) is not None:
        bundle.train.seed = args.seed
    return bundle


def simulate_stacks(sim, seed):
    """Phantom plus one stack per orientation, seeded deterministically."""
    gt = make_phantom(sim.phantom, (sim.phantom_dims,) * 3, seed=seed,
                      spacing=sim.phantom_spacing)
    stacks = [
        acquire_stack(
            gt,
            orientation,
            in_plane_spacing=sim.in_plane_spacing,
            thickness=sim.slice_thickness,
            motion_sigma=sim.motion_sigma,
            noise_sigma=sim.noise_sigma,
            seed=seed + 1000 + k,
            reg_error_sigma=sim.reg_error_sigma,
        )
        for k, orientation in enumerate(ORIENTATIONS)
    ]
    return gt, stacks


def cmd_simulate(args):
    bundle = _load_bundle(args)
    os.makedirs(args.out, exist_ok=True)
    gt, stacks = simulate_stacks(bundle.sim, bundle.train.seed)
    mio.write_volume(os.path.join(args.out, "gt.nii"), gt, descrip="ground truth")
    names = mio.save_stacks(args.out, stacks)
    _write_manifest(args.out, ["gt.nii"] + names)
    print(f"wrote ground truth + {len(stacks)} stacks to {args.out}")
    return 0


def _target_grid(stacks, recon):
    """Derive the inference voxel grid (dims, spacing, origin) in world mm."""
    lo = np.min([st.world_min for st in stacks], axis=0)
    extent = np.max([st.world_min + st.extent for st in stacks], axis=0) - lo
    spacing = recon.target_spacing
    if spacing <= 0:
        spacing = min(st.in_plane_spacing for st in stacks)
    if recon.target_dims > 0:
        dims = (recon.target_dims,) * 3
    else:
        dims = tuple(int(np.floor(e / spacing + 1e-9)) for e in extent)
    return dims, np.full(3, spacing), lo + 0.5 * spacing


def run_reconstruction(stacks, bundle, iters=None, resume_state=None,
                       progress=None):
    """Train on the given stacks and sample the reconstructed volume.

    Returns (volume_world_units, trainer, runtime_seconds).
    """
    cfg = bundle.train
    cloud = devoxelize(stacks, bundle.sim.foreground_threshold)
    transforms = normalized_transforms(stacks, cloud.world_map, "estimated")
    grids = build_slice_grids(stacks, cloud.world_map, cloud.intensity_scale)
    trainer = Trainer(cloud, transforms, cfg, slice_grids=grids)
    if resume_state is not None:
        trainer.load_state_dict(resume_state["trainer"])
    total = trainer.config.total_iters if iters is None else iters
    t0 = time.perf_counter()
    while trainer.iteration < total:
        report = trainer.step()
        if progress is not None:
            progress(report)
    runtime = time.perf_counter() - t0

    dims, spacing, origin = _target_grid(stacks, bundle.recon)
    first = cloud.world_map.to_normalized(origin)
    last = cloud.world_map.to_normalized(origin + (np.array(dims) - 1) * spacing)
    vol = trainer.render_volume(dims, bounds=(first, last))
    world_vol = Volume(
        data=vol.data * cloud.intensity_scale,
        spacing=spacing,
        origin=origin,
    )
    return world_vol, trainer, runtime


def cmd_reconstruct(args):
    bundle = _load_bundle(args)
    os.makedirs(args.out, exist_ok=True)
    stacks = mio.read_stacks(args.stacks)
    resume_state = mio.load_checkpoint(args.resume) if args.resume else None

    log_lines = []

    def progress(report):
        log_lines.append(report.to_line())

    volume, trainer, runtime = run_reconstruction(
        stacks, bundle, iters=args.iters, resume_state=resume_state,
        progress=progress,
    )
    recon_path = os.path.join(args.out, "recon.nii")
    mio.write_volume(recon_path, volume, descrip="reconstruction")
    mio.save_checkpoint(os.path.join(args.out, "checkpoint.mgss"),
                        {"trainer": trainer.state_dict()})
    mio.atomic_write(os.path.join(args.out, "loss_log.txt"),
                     ("\n".join(log_lines) + "\n").encode() if log_lines else b"")

    lines = [f"iterations = {trainer.iteration}", f"runtime_seconds = {runtime:.3f}"]
    if args.gt:
        gt_vol, _ = mio.read_volume(args.gt)
        pred_vol, _ = mio.read_volume(recon_path)
        report = evaluate_volumes(pred_vol.data.astype(np.float64),
                                  gt_vol.data.astype(np.float64),
                                  runtime_seconds=runtime)
        mio.atomic_write(os.path.join(args.out, "metrics.txt"),
                         report.to_text().encode())
        mio.atomic_write(os.path.join(args.out, "metrics.json"),
                         report.to_json().encode())
        lines.append(f"psnr_db = {report.psnr_db:.6f}")
    mio.atomic_write(os.path.join(args.out, "run.txt"),
                     ("\n".join(lines) + "\n").encode())
    print("\n".join(lines))
    return 0


def cmd_evaluate(args):
    t0 = time.perf_counter()
    pred, _ = mio.read_volume(args.pred)
    gt, _ = mio.read_volume(args.gt)
    report = evaluate_volumes(pred.data.astype(np.float64),
                              gt.data.astype(np.float64))
    report.runtime_seconds = time.perf_counter() - t0
    if args.out:
        mio.atomic_write(args.out, report.to_json().encode())
    sys.stdout.write(report.to_text())
    return 0


def _psnr_vs_gt(volume, gt):
    from .metrics import psnr

    return psnr(volume.data.astype(np.float32).astype(np.float64),
                gt.data.astype(np.float32).astype(np.float64))


def bench_radius_sweep(bundle, radii=(3, 4, 5, 6, 7)):
    """Quality/runtime per block radius (desk-scale Table analogue)."""
    gt, stacks = simulate_stacks(bundle.sim, bundle.train.seed)
    rows = []
    for radius in radii:
        b2 = mio.ConfigBundle(
            train=replace(bundle.train, block_radius=int(radius)),
            sim=bundle.sim,
            recon=bundle.recon,
        )
        volume, _, runtime = run_reconstruction(stacks, b2)
        from .metrics import ssim3d

        rows.append(
            {
                "block_radius": int(radius),
                "psnr_db": _psnr_vs_gt(volume, gt),
                "ssim": ssim3d(volume.data.astype(np.float64),
                               gt.data.astype(np.float64)),
                "runtime_seconds": runtime,
            }
        )
    return rows


def bench_resolution_sweep(bundle, resolutions=(16, 24, 32, 40, 48)):
    """Quality/runtime at fixed lattice resolutions (no progressive growth)."""
    gt, stacks = simulate_stacks(bundle.sim, bundle.train.seed)
    rows = []
    for res in resolutions:
        b2 = mio.ConfigBundle(
            train=replace(
                bundle.train,
                use_progressive=False,
                resolution_schedule=((0, int(res)),),
            ),
            sim=bundle.sim,
            recon=bundle.recon,
        )
        volume, _, runtime = run_reconstruction(stacks, b2)
        from .metrics import ssim3d

        rows.append(
            {
                "resolution": int(res),
                "psnr_db": _psnr_vs_gt(volume, gt),
                "ssim": ssim3d(volume.data.astype(np.float64),
                               gt.data.astype(np.float64)),
                "runtime_seconds": runtime,
            }
        )
    return rows


def bench_speedup(num_primitives=216000, num_points=1_000_000, grid_resolution=70,
                  radius=5, dense_sample=10000, seed=0, exact_dense=False):
    """Block-partitioned vs all-primitive rendering throughput.

    The dense reference is timed on ``dense_sample`` points and scaled to
    the full point count (its per-point cost is constant); pass
    ``exact_dense=True`` to time every point instead.
    """
    from .core import uniform_lattice_field

    rng = np.random.default_rng(seed)
    side = int(round(num_primitives ** (1.0 / 3.0)))
    field = uniform_lattice_field(side)
    field.positions[:] = rng.uniform(-0.98, 0.98, size=field.positions.shape)
    field.intensity_logits[:] = rng.normal(0.0, 1.0, field.count)
    field.log_scales[:] = np.log(1.0 / grid_resolution)
    grid = build(field, grid_resolution, block_radius=radius)
    points = rng.uniform(-1.0, 1.0, size=(num_points, 3))

    # warm both kernels before timing
    render_points(field, grid, None, points[:128], radius=radius)
    render_points_dense(field, points[:128])

    t0 = time.perf_counter()
    render_points(field, grid, None, points, radius=radius)
    block_time = time.perf_counter() - t0

    n_dense = num_points if exact_dense else min(dense_sample, num_points)
    t0 = time.perf_counter()
    render_points_dense(field, points[:n_dense])
    dense_time = (time.perf_counter() - t0) * (num_points / n_dense)

    return {
        "num_primitives": field.count,
        "num_points": num_points,
        "grid_resolution": grid_resolution,
        "block_radius": radius,
        "block_seconds": block_time,
        "dense_seconds_total": dense_time,
        "dense_points_timed": n_dense,
        "speedup": dense_time / block_time,
    }


def _format_table(rows, columns):
    header = "  ".join(f"{c:>16s}" for c in columns)
    lines = [header]
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            cells.append(f"{v:>16.4f}" if isinstance(v, float) else f"{v:>16d}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    bundle = _load_bundle(args)
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    if args.mode in ("radius", "all"):
        radii = [int(r) for r in args.radii.split(",")]
        rows = bench_radius_sweep(bundle, radii)
        text = _format_table(rows, ["block_radius", "psnr_db", "ssim", "runtime_seconds"])
        sys.stdout.write(text)
        outputs["radius_sweep"] = rows
        mio.atomic_write(os.path.join(args.out, "bench_radius.txt"), text.encode())
    if args.mode in ("resolution", "all"):
        resolutions = [int(r) for r in args.resolutions.split(",")]
        rows = bench_resolution_sweep(bundle, resolutions)
        text = _format_table(rows, ["resolution", "psnr_db", "ssim", "runtime_seconds"])
        sys.stdout.write(text)
        outputs["resolution_sweep"] = rows
        mio.atomic_write(os.path.join(args.out, "bench_resolution.txt"), text.encode())
    if args.mode in ("speedup", "all"):
        row = bench_speedup(
            num_primitives=args.primitives,
            num_points=args.points,
            seed=bundle.train.seed,
            exact_dense=args.exact_dense,
        )
        text = "\n".join(f"{k} = {v}" for k, v in row.items()) + "\n"
        sys.stdout.write(text)
        outputs["speedup"] = row
        mio.atomic_write(os.path.join(args.out, "bench_speedup.txt"), text.encode())
    mio.atomic_write(os.path.join(args.out, "bench.json"),
                     json.dumps(outputs, indent=2).encode())
    return 0


ABLATION_ROWS = (
    ("full", {}),
    ("w/o SSIM", {"use_ssim": False}),
    ("w/o SSIM & P.R.", {"use_ssim": False, "use_progressive": False}),
    ("w/o NRF", {"use_nrf": False}),
    ("w/o A.R.", {"use_aniso": False}),
)


def run_ablation(bundle):
    """The five-row ablation table: full model and one component off at a
    time (progressive resolution is toggled without SSIM, matching how the
    published ablation isolates it)."""
    gt, stacks = simulate_stacks(bundle.sim, bundle.train.seed)
    rows = []
    for label, switches in ABLATION_ROWS:
        b2 = mio.ConfigBundle(
            train=replace(bundle.train, **switches),
            sim=bundle.sim,
            recon=bundle.recon,
        )
        volume, _, runtime = run_reconstruction(stacks, b2)
        from .metrics import ssim3d

        rows.append(
            {
                "configuration": label,
                "psnr_db": _psnr_vs_gt(volume, gt),
                "ssim": ssim3d(volume.data.astype(np.float64),
                               gt.data.astype(np.float64)),
                "runtime_seconds": runtime,
            }
        )
    return rows


def cmd_ablate(args):
    bundle = _load_bundle(args)
    os.makedirs(args.out, exist_ok=True)
    rows = run_ablation(bundle)
    width = max(len(r["configuration"]) for r in rows)
    lines = [f"{'configuration':<{width}}  {'psnr_db':>10}  {'ssim':>8}  {'seconds':>8}"]
    for r in rows:
        lines.append(
            f"{r['configuration']:<{width}}  {r['psnr_db']:>10.4f}  "
            f"{r['ssim']:>8.4f}  {r['runtime_seconds']:>8.1f}"
        )
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    mio.atomic_write(os.path.join(args.out, "ablation.txt"), text.encode())
    mio.atomic_write(os.path.join(args.out, "ablation.json"),
                     json.dumps(rows, indent=2).encode())
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage errors
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="mgauss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file (key = value)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=0,
                       help="worker cap; 0 = auto (at most 2)")
        p.add_argument("--strict-deterministic", action="store_true",
                       help="single worker: machine-independent reduction order")

    p = sub.add_parser("simulate", help="generate phantom ground truth and stacks")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a volume from stacks")
    common(p)
    p.add_argument("--stacks", required=True, help="directory with stacks + transforms.json")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None, help="override total iterations")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--gt", default=None, help="ground-truth volume for metrics")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="compare two volumes")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="write JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="radius/resolution sweeps and speedup check")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("radius", "resolution", "speedup", "all"),
                   default="radius")
    p.add_argument("--radii", default="3,4,5,6,7")
    p.add_argument("--resolutions", default="16,24,32,40,48")
    p.add_argument("--primitives", type=int, default=216000)
    p.add_argument("--points", type=int, default=1_000_000)
    p.add_argument("--exact-dense", action="store_true",
                   help="time the dense reference on every point")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="component ablation table")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 1
    if getattr(args, "threads", None) is not None and args.threads < 0:
        sys.stderr.write("error: --threads must be >= 0\n")
        return 1
    from .render import set_num_threads

    if getattr(args, "strict_deterministic", False):
        workers = 1
    elif args.threads == 0:
        workers = min(2, os.cpu_count() or 1)
    else:
        workers = min(args.threads, os.cpu_count() or 1)
    set_num_threads(workers)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 3
    except MGaussError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
