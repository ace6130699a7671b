"""Command-line interface.

Subcommands mirror the pipeline stages (gen-data, skeletonize, render,
correspond, train, segment, eval, pipeline) plus gradcheck. `--config`
points at a JSON file of PipelineConfig overrides; unknown keys are
rejected with exit code 2. SKELFUSE_THREADS caps render workers.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .correspond import build_correspondence, coverage_stats, save_correspondence
from .errors import ArgumentError, SkelFuseError
from .gradcheck_suite import TOLERANCE, run_all
from .lifting import evaluate
from .mesh import normalize_unit_sphere
from .meshio import export_labeled_ply, load_mesh
from .pipeline import (
    STAGES,
    PipelineConfig,
    prepare_bundle,
    run_pipeline,
    segment_bundle,
)
from .render import ViewSet, camera_ring, load_view, render_views, save_view
from .skeleton import ContractionParams, load_skeleton, save_skeleton, skeletonize
from .synthetic import synth_tooth_row


def _load_config(path: str | None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
    if overrides:
        data.update(overrides)
    return PipelineConfig.from_dict(data)


def cmd_gen_data(args) -> int:
    mesh = synth_tooth_row(args.seed, args.teeth, args.noise)
    export_labeled_ply(mesh, mesh.face_labels, args.out)
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return 0


def cmd_skeletonize(args) -> int:
    mesh = load_mesh(args.infile)
    normalized, _, _ = normalize_unit_sphere(mesh) if args.normalize else (mesh, None, None)
    params = ContractionParams(
        iterations=args.iterations,
        contraction_weight_growth=args.growth,
        initial_attraction=args.attraction,
        collapse_target_ratio=args.ratio,
    )
    skel = skeletonize(normalized, params)
    save_skeleton(skel, args.out)
    print(f"wrote {args.out}: {skel.n_nodes} nodes, {len(skel.edges)} edges")
    return 0


def cmd_render(args) -> int:
    mesh = load_mesh(args.infile)
    if args.normalize:
        mesh, _, _ = normalize_unit_sphere(mesh)
    elevations = [np.deg2rad(float(e)) for e in args.elev.split(",")]
    cams = camera_ring(
        mesh, args.views, elevations,
        fov_y=np.deg2rad(args.fov), resolution=(args.res, args.res),
    )
    views = render_views(mesh, cams, workers=args.workers or None)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for v, (fb, cam) in enumerate(zip(views.buffers, views.cameras)):
        save_view(fb, cam, outdir / f"view_{v:02d}")
    print(f"wrote {len(cams)} views to {outdir}")
    return 0


def cmd_correspond(args) -> int:
    skel = load_skeleton(args.skel)
    vdir = Path(args.views)
    bases = sorted(p.with_suffix("") for p in vdir.glob("view_*.json"))
    if not bases:
        raise ArgumentError(f"no rendered views under {vdir}")
    buffers, cams = [], []
    for base in bases:
        fb, cam = load_view(base)
        buffers.append(fb)
        cams.append(cam)
    views = ViewSet(cameras=cams, buffers=buffers, scene_radius=1.0)
    cm = build_correspondence(skel, views, args.patch, args.khop)
    save_correspondence(cm, args.out)
    stats = coverage_stats(cm, skel)
    print(
        f"wrote {args.out}: {len(cm)} positives, "
        f"node coverage {stats['frac_nodes_covered']:.3f}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    report_stages = [s for s in STAGES if s not in ("segment", "eval")]
    run_pipeline(cfg, args.out, stages=report_stages, verbose=not args.quiet)
    print(f"checkpoint at {Path(args.out) / 'ckpt.bin'}")
    return 0


def cmd_segment(args) -> int:
    ckpt_base = Path(args.ckpt).with_suffix("")
    store, extra = ad.load_checkpoint(ckpt_base)
    cfg = PipelineConfig.from_dict(extra.get("config", {}))
    mesh = load_mesh(args.mesh)
    bundle = prepare_bundle(mesh, cfg)
    labels = segment_bundle(bundle, store, cfg)
    export_labeled_ply(mesh, labels, args.out)
    n = len(set(labels.tolist()) - {0})
    print(f"wrote {args.out}: {n} instances over {mesh.n_faces} faces")
    return 0


def cmd_eval(args) -> int:
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    if pred.face_labels is None or gt.face_labels is None:
        raise ArgumentError("both meshes need per-face labels")
    report = evaluate(pred.face_labels, gt.face_labels)
    Path(args.report).write_text(json.dumps(report, sort_keys=True, indent=1))
    print(f"miou {report['miou']:.4f} precision {report['precision']:.3f} "
          f"recall {report['recall']:.3f} -> {args.report}")
    return 0


def cmd_pipeline(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = _load_config(args.config, overrides)
    stages = args.stages.split(",") if args.stages else None
    report = run_pipeline(cfg, args.out, stages=stages, verbose=not args.quiet)
    if report:
        print(f"mean mIoU {report.get('mean_miou'):.4f} -> {Path(args.out) / 'report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        results = run_all()
    except RuntimeError as e:
        print(f"FAIL: {e}", file=sys.stderr)
        return 1
    worst_name, worst_err = max(results, key=lambda r: r[1])
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e} {status}")
    if worst_err >= TOLERANCE:
        print(f"FAIL: worst offender {worst_name} at {worst_err:.3e}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks below {TOLERANCE}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelfuse",
        description="Skeleton-multiview fusion pipeline for mesh instance segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled synthetic tooth row")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--teeth", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("skeletonize", help="extract a curve skeleton")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--growth", type=float, default=2.0)
    p.add_argument("--attraction", type=float, default=1.0)
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("render", help="rasterize a ring of views")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--elev", default="-30,30", help="elevations in degrees, comma-separated")
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--fov", type=float, default=60.0, help="vertical fov in degrees")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("correspond", help="pair skeleton nodes with image patches")
    p.add_argument("--skel", required=True)
    p.add_argument("--views", required=True, help="directory of rendered views")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--khop", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("train", help="run pipeline stages through training")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="label a mesh with a trained checkpoint")
    p.add_argument("--mesh", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", default=None, help="comma-separated stage subset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SkelFuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
