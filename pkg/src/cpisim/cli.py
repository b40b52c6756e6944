"""Command-line front end.

Every command validates its inputs, writes its outputs under --out, and
drops a key=value report beside them.  Exit codes: 1 usage, 2 validation,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import correlation
from .compressive import cs_reconstruct
from .core import ValidationError
from .correlation import (CorrelationAccumulator, bench_accumulate, finalize,
                          load_tensor, save_tensor)
from .frames import Frame, read_stream, write_frames, write_stream
from .metrics import pearson_r, format_report, visibility, write_report
from .pipeline import simulate_stream
from .refocus import refocus, refocus_stack
from .runconfig import parse_config
from .tomography import (VoxelGrid, art_solve, build_rays, build_system_matrix,
                         linearize, mlem_solve, save_volume)

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_stack(spec: str) -> list[float]:
    """Parse 's1..s2:k' into k evenly spaced depths, or a comma list."""
    if ".." in spec:
        lo_part, rest = spec.split("..", 1)
        if ":" not in rest:
            raise ValidationError("stack spec must look like s1..s2:k")
        hi_part, k_part = rest.split(":", 1)
        lo, hi, k = float(lo_part), float(hi_part), int(k_part)
        if k < 1:
            raise ValidationError("stack count must be >= 1")
        return list(np.linspace(lo, hi, k))
    return [float(tok) for tok in spec.split(",") if tok]


def cmd_simulate(args) -> int:
    rc = parse_config(args.config)
    n_frames = args.frames if args.frames is not None else rc.n_frames
    binary = rc.binary
    if args.binary:
        binary = True
    if args.analog:
        binary = False
    out = Path(args.out)
    stream = simulate_stream(rc.scene, rc.optics, rc.speckle_grid, rc.sigma_c,
                             rc.mean_intensity, n_frames, rc.seed,
                             detector=rc.detector if binary else None,
                             binary=binary, workers=args.workers)
    write_stream(out, stream)
    write_report(out / "simulate_report.txt", {
        "command": "simulate",
        "frames": n_frames,
        "payload": "binary" if binary else "analog",
        "seed": rc.seed,
        "config_digest": rc.optics.digest(),
    })
    return 0


def _load_run(frames_dir):
    stream = read_stream(frames_dir)
    if not len(stream):
        raise ValidationError(f"{frames_dir}: stream contains no frames")
    return stream


def cmd_correlate(args) -> int:
    stream = _load_run(args.frames)
    f0, g0 = stream.frames_a[0], stream.frames_b[0]
    acc = CorrelationAccumulator((f0.width, f0.height), (g0.width, g0.height),
                                 f0.kind, bin_b=args.binning)
    for fa, fb in stream:
        acc.add_pair(fa, fb)
    tensor = finalize(acc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(out, tensor)
    write_report(out.parent / "correlate_report.txt", {
        "command": "correlate",
        "frames": tensor.n_frames,
        "binning": args.binning,
        "dims_a": "%dx%d" % tensor.dims_a,
        "dims_b": "%dx%d" % tensor.dims_b,
        "gamma_peak": float(np.abs(tensor.data).max()),
    })
    return 0


def cmd_refocus(args) -> int:
    rc = parse_config(args.config)
    tensor = load_tensor(args.gamma)
    if args.depth is not None:
        depths = [args.depth]
    elif args.stack:
        depths = _parse_stack(args.stack)
    else:
        raise ValidationError("refocus needs --depth or --stack")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = refocus_stack(tensor, rc.optics, depths)
    report = {"command": "refocus", "n_depths": len(depths)}
    for img in images:
        name = f"refocus_{img.depth:.6g}mm"
        write_frames(out / f"{name}.cpif", [Frame.analog(np.maximum(img.values, 0.0))])
        report[f"{name}.unobserved"] = int((~img.observed()).sum())
        report[f"{name}.mean"] = float(img.values.mean())
    write_report(out / "refocus_report.txt", report)
    return 0


def cmd_cs(args) -> int:
    rc = parse_config(args.config)
    stream = _load_run(args.frames)
    if not (0 < args.fraction <= 1):
        raise ValidationError("--fraction must lie in (0, 1]")
    rng = np.random.default_rng(args.subset_seed)
    n = len(stream)
    k = max(1, int(round(args.fraction * n)))
    subset = stream.subset(sorted(rng.choice(n, size=k, replace=False)))

    acc_full = correlation.accumulate_stream(stream)
    reference = refocus(finalize(acc_full), rc.optics, args.depth).values
    acc_red = correlation.accumulate_stream(subset)
    reduced = refocus(finalize(acc_red), rc.optics, args.depth).values
    lam = args.lam if args.lam != "cv" else "cv"
    if lam != "cv":
        lam = float(lam)
    result = cs_reconstruct(subset, rc.optics, args.depth, lam=lam,
                            reference=reference, max_rows=args.max_rows,
                            seed=args.subset_seed, row_select=args.row_select)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frames(out / "cs_image.cpif", [Frame.analog(np.maximum(result.image, 0.0))])
    write_frames(out / "reduced_image.cpif", [Frame.analog(np.maximum(reduced, 0.0))])
    write_frames(out / "reference_image.cpif", [Frame.analog(np.maximum(reference, 0.0))])
    write_report(out / "cs_report.txt", {
        "command": "cs",
        "frames_total": n,
        "frames_used": k,
        "fraction": args.fraction,
        "lambda": result.lam,
        "r_red": pearson_r(reduced, reference),
        "r_cs": result.r_vs_reference,
        "converged": result.lasso.converged,
        "sweeps": result.lasso.sweeps,
    })
    return 0


def cmd_tomo(args) -> int:
    rc = parse_config(args.config)
    tensor = load_tensor(args.gamma).peak_normalized()
    reference = load_tensor(args.ref).peak_normalized()
    parts = [float(tok) for tok in args.grid.split(",")]
    if len(parts) != 6:
        raise ValidationError("--grid expects nx,ny,nz,pitch_lat_um,pitch_ax_mm,z_center_mm")
    nx, ny, nz = (int(parts[0]), int(parts[1]), int(parts[2]))
    grid = VoxelGrid.centered((nx, ny, nz), parts[3], parts[4], parts[5])
    rays = build_rays(rc.optics, tensor.dims_a, tensor.dims_b)
    system = build_system_matrix(rays, grid)
    measurement = linearize(tensor, reference)
    if args.solver == "mlem":
        result = mlem_solve(system, measurement, grid, args.iters)
        extra = {"loglik_final": float(result.history[-1])}
    else:
        result = art_solve(system, measurement, grid, args.iters,
                           relaxation=args.relaxation)
        extra = {"residual_final": float(result.history[-1]) if args.iters else None}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "volume.cpiv", result.volume)
    report = {
        "command": "tomo",
        "solver": args.solver,
        "iters": args.iters,
        "valid_rays": int(measurement.valid.sum()),
        "unobserved_voxels": int((~result.observed).sum()),
        "mass": float(result.volume.values.sum()),
        "ref_floor": 1e-3,
        "p_max": 10.0,
    }
    report.update(extra)
    write_report(out / "tomo_report.txt", report)
    return 0


def cmd_metrics(args) -> int:
    from .frames import read_frames

    frames = read_frames(args.image)
    image = frames[0].values()
    report = {"command": "metrics", "mean": float(image.mean()),
              "min": float(image.min()), "max": float(image.max())}
    try:
        report["visibility"] = visibility(image.mean(axis=0))
    except ValidationError:
        report["visibility"] = "undefined"
    if args.reference:
        ref = read_frames(args.reference)[0].values()
        report["pearson_r"] = pearson_r(image, ref)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    return 0


def cmd_bench(args) -> int:
    stream = _load_run(args.frames)
    modes = ["naive-float", "bit-packed"] if args.mode == "both" else [args.mode]
    reports = [bench_accumulate(stream, mode, bin_b=args.binning) for mode in modes]
    entries = {"command": "bench", "frames": len(stream),
               "pair_bytes": stream.pair_nbytes()}
    for rep in reports:
        prefix = rep["mode"]
        entries[f"{prefix}.wall_s"] = rep["wall_s"]
        entries[f"{prefix}.frames_per_s"] = rep["frames_per_s"]
        entries[f"{prefix}.bytes_per_s"] = rep["bytes_per_s"]
    if len(reports) == 2:
        same = np.array_equal(reports[0]["tensor"].data, reports[1]["tensor"].data)
        if not same:
            raise RuntimeError("bench modes disagree on the finalized tensor")
        entries["tensors_identical"] = True
        entries["speedup"] = reports[0]["wall_s"] / reports[1]["wall_s"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, entries)
    print(format_report(entries), end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cpisim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate frame pairs from a config")
    p.add_argument("config")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--analog", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="estimate the correlation tensor")
    p.add_argument("frames")
    p.add_argument("--binning", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("refocus", help="refocus a tensor at one or more depths")
    p.add_argument("gamma")
    p.add_argument("--config", required=True)
    p.add_argument("--depth", type=float, default=None)
    p.add_argument("--stack", default=None, help="s1..s2:k or comma list (mm)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refocus)

    p = sub.add_parser("cs", help="compressive reconstruction from a frame subset")
    p.add_argument("frames")
    p.add_argument("--config", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--depth", type=float, required=True)
    p.add_argument("--lambda", dest="lam", default="cv")
    p.add_argument("--max-rows", type=int, default=8000)
    p.add_argument("--row-select", choices=["strided", "photon"], default="strided")
    p.add_argument("--subset-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cs)

    p = sub.add_parser("tomo", help="absorption tomography from tensor + reference")
    p.add_argument("gamma")
    p.add_argument("--ref", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True,
                   help="nx,ny,nz,pitch_lat_um,pitch_ax_mm,z_center_mm")
    p.add_argument("--solver", choices=["mlem", "art"], default="mlem")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--relaxation", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tomo)

    p = sub.add_parser("metrics", help="image statistics and similarity")
    p.add_argument("image")
    p.add_argument("--reference", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bench", help="accumulation throughput benchmark")
    p.add_argument("frames")
    p.add_argument("--mode", choices=["naive-float", "bit-packed", "both"],
                   default="both")
    p.add_argument("--binning", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"cpisim: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"cpisim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
