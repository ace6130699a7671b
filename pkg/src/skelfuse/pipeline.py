"""End-to-end orchestration: data generation, skeletonization, rendering,
correspondence, training, segmentation, and evaluation.

One JSON-able config drives everything. All randomness flows from the config
seed split per stage by fixed labels, so two runs with identical configs
produce byte-identical checkpoints and reports. On-disk stages are cached
under a hash of their upstream config so stale artifacts are never reused.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .correspond import (
    CorrespondenceMap,
    build_correspondence,
    coverage_stats,
    load_correspondence,
    patch_majority_labels,
    patchify,
    save_correspondence,
)
from .errors import ArgumentError
from .fusion import (
    ContrastiveConfig,
    MeshBundle,
    ModelConfig,
    PatchEncoderConfig,
    SegHeadConfig,
    init_model,
    predict_bundle,
    train_step,
)
from .lifting import evaluate, expand_patch_labels, fill_unseen, lift, predict_view
from .mesh import TriMesh, normalize_unit_sphere
from .meshio import export_labeled_ply, load_mesh
from .render import ViewSet, camera_ring, load_view, render_views, save_view
from .skeleton import ContractionParams, load_skeleton, save_skeleton, skeletonize
from .skelnet import SkeletonNetConfig
from .synthetic import stage_rng, synth_tooth_row

STAGES = ["gen-data", "skeletonize", "render", "correspond", "train", "segment", "eval"]


@dataclass
class PipelineConfig:
    seed: int = 7
    # synthetic data
    n_teeth: int = 4
    noise: float = 0.01
    train_meshes: int = 4
    test_meshes: int = 2
    train_seed_base: int = 0
    test_seed_base: int = 100
    # skeletonization
    skeleton_iterations: int = 5
    skeleton_growth: float = 2.0
    skeleton_attraction: float = 1.0
    skeleton_target_ratio: float = 0.2
    # rendering
    views: int = 16  # azimuths per elevation ring
    elevations: tuple = (-0.45, 0.55)
    resolution: int = 128
    fov_y: float = 0.6
    # correspondence
    patch_size: int = 8
    khop: int = 1
    # model
    embed_dim: int = 64
    heads: int = 4
    queries: int = 24
    encoder_blocks: int = 2
    head_blocks: int = 2
    tau: float = 0.07
    lambda_con: float = 0.5
    # training
    lr: float = 3e-3
    lr_final_frac: float = 0.1  # linear decay floor as a fraction of lr
    steps: int = 500
    views_per_step: int = 8
    # runtime
    workers: int = 0  # 0 = auto

    def __post_init__(self):
        self.elevations = tuple(float(e) for e in self.elevations)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ArgumentError(f"unknown config key: {unknown[0]}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["elevations"] = list(self.elevations)
        return d

    def contraction_params(self) -> ContractionParams:
        return ContractionParams(
            iterations=self.skeleton_iterations,
            contraction_weight_growth=self.skeleton_growth,
            initial_attraction=self.skeleton_attraction,
            collapse_target_ratio=self.skeleton_target_ratio,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            skelnet=SkeletonNetConfig(levels=3, dims=(32, 64, self.embed_dim)),
            encoder=PatchEncoderConfig(
                patch_size=self.patch_size,
                embed_dim=self.embed_dim,
                blocks=self.encoder_blocks,
                heads=self.heads,
            ),
            contrastive=ContrastiveConfig(temperature=self.tau, seed=self.seed),
            head=SegHeadConfig(
                queries=self.queries, blocks=self.head_blocks, heads=self.heads
            ),
            lambda_con=self.lambda_con,
        )


# --- stage hashing -----------------------------------------------------------

_STAGE_KEYS = {
    "gen-data": ["seed", "n_teeth", "noise", "train_meshes", "test_meshes",
                 "train_seed_base", "test_seed_base"],
    "skeletonize": ["skeleton_iterations", "skeleton_growth", "skeleton_attraction",
                    "skeleton_target_ratio"],
    "render": ["views", "elevations", "resolution", "fov_y"],
    "correspond": ["patch_size", "khop"],
    "train": ["embed_dim", "heads", "queries", "encoder_blocks", "head_blocks",
              "tau", "lambda_con", "lr", "lr_final_frac", "steps", "views_per_step"],
    "segment": [],
    "eval": [],
}

_STAGE_PARENT = {
    "gen-data": None,
    "skeletonize": "gen-data",
    "render": "gen-data",
    "correspond": "render",
    "train": "correspond",
    "segment": "train",
    "eval": "segment",
}


def stage_hashes(cfg: PipelineConfig) -> dict:
    """Content hash per stage, chained through upstream stages."""
    d = cfg.to_dict()
    out = {}
    for stage in STAGES:
        payload = {k: d[k] for k in _STAGE_KEYS[stage]}
        parent = _STAGE_PARENT[stage]
        if parent:
            payload["__parent"] = out[parent]
        if stage == "correspond":
            payload["__skeleton"] = stage_hashes_skel(cfg, out)
        blob = json.dumps(payload, sort_keys=True).encode()
        out[stage] = hashlib.sha256(blob).hexdigest()[:16]
    return out


def stage_hashes_skel(cfg: PipelineConfig, partial: dict) -> str:
    # correspond depends on both skeletonize and render
    return partial["skeletonize"]


# --- in-memory pipeline ------------------------------------------------------

def mesh_seeds(cfg: PipelineConfig) -> dict:
    return {
        "train": [cfg.train_seed_base + i for i in range(cfg.train_meshes)],
        "test": [cfg.test_seed_base + i for i in range(cfg.test_meshes)],
    }


def generate_meshes(cfg: PipelineConfig) -> dict:
    seeds = mesh_seeds(cfg)
    return {
        split: [synth_tooth_row(s, cfg.n_teeth, cfg.noise) for s in seeds[split]]
        for split in ("train", "test")
    }


def prepare_bundle(mesh: TriMesh, cfg: PipelineConfig, skeleton=None, views=None) -> MeshBundle:
    """Normalize, skeletonize, render, patchify, and correspond one mesh."""
    normalized, _, _ = normalize_unit_sphere(mesh)
    if skeleton is None:
        skeleton = skeletonize(normalized, cfg.contraction_params())
    if views is None:
        cams = camera_ring(
            normalized, cfg.views, cfg.elevations,
            fov_y=cfg.fov_y, resolution=(cfg.resolution, cfg.resolution),
        )
        views = render_views(normalized, cams, workers=cfg.workers or None)
    grids = [patchify(fb, cfg.patch_size, v) for v, fb in enumerate(views.buffers)]
    cm = build_correspondence(skeleton, views, cfg.patch_size, cfg.khop)
    gt = [
        patch_majority_labels(fb, normalized.face_labels, cfg.patch_size)
        for fb in views.buffers
    ]
    return MeshBundle(
        skeleton=skeleton, patch_grids=grids, correspondence=cm, patch_gt=gt,
        mesh=normalized, views=views,
    )


def view_subset(bundle: MeshBundle, ids: list) -> MeshBundle:
    """Bundle restricted to the given view indices (correspondence remapped)."""
    remap = {v: k for k, v in enumerate(ids)}
    cm = CorrespondenceMap(
        n_nodes=bundle.correspondence.n_nodes,
        n_views=len(ids),
        patches_per_view=bundle.correspondence.patches_per_view,
    )
    for (n, v, p), h in bundle.correspondence.hops.items():
        if v in remap:
            cm.hops[(n, remap[v], p)] = h
    return MeshBundle(
        skeleton=bundle.skeleton,
        patch_grids=[bundle.patch_grids[i] for i in ids],
        correspondence=cm,
        patch_gt=[bundle.patch_gt[i] for i in ids],
        mesh=bundle.mesh,
        views=bundle.views,
    )


def train_model(bundles: list, cfg: PipelineConfig, log_every: int = 0):
    """Deterministic joint training over bundles.

    Steps cycle through meshes; each step trains on a rotating window of
    `views_per_step` views so per-step cost stays flat regardless of the
    ring size. Learning rate decays linearly to lr * lr_final_frac.
    Returns (param store, per-step loss history).
    """
    model_cfg = cfg.model_config()
    store = ad.ParamStore()
    init_model(store, model_cfg, stage_rng(cfg.seed, "init"))
    history = []
    n_b = len(bundles)
    for step in range(cfg.steps):
        bundle = bundles[step % n_b]
        n_views = len(bundle.patch_grids)
        k = min(cfg.views_per_step, n_views)
        epoch = step // n_b
        start = (epoch * k) % n_views
        ids = [(start + i) % n_views for i in range(k)]
        frac = step / max(cfg.steps - 1, 1)
        lr = cfg.lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * (1.0 - frac))
        losses = train_step(view_subset(bundle, ids), store, model_cfg, lr=lr)
        history.append(losses)
        if log_every and step % log_every == 0:
            print(
                f"step {step:4d}: total {losses['total']:.4f} "
                f"seg {losses['segmentation']:.4f} con {losses['contrastive']:.4f}",
                flush=True,
            )
    return store, history


def segment_bundle(bundle: MeshBundle, store: ad.ParamStore, cfg: PipelineConfig) -> np.ndarray:
    """Predict per-view patch instances, lift to faces, fill unseen faces."""
    model_cfg = cfg.model_config()
    preds = predict_bundle(bundle, store, model_cfg)
    maps = [
        expand_patch_labels(predict_view(c, m), cfg.patch_size, cfg.resolution)
        for c, m in preds
    ]
    labeling = lift(maps, bundle.views.buffers, bundle.mesh)
    return fill_unseen(bundle.mesh, labeling).face_labels


def final_losses(bundles: list, store: ad.ParamStore, cfg: PipelineConfig) -> dict:
    """Loss values at convergence over full bundles (no parameter update)."""
    from .fusion import model_forward

    model_cfg = cfg.model_config()
    seg, con = [], []
    for bundle in bundles:
        out = model_forward(bundle, store, model_cfg)
        seg.append(float(out["segmentation"].data))
        con.append(float(out["contrastive"].data))
    return {
        "segmentation": float(np.mean(seg)),
        "contrastive": float(np.mean(con)),
    }


def run_experiment(cfg: PipelineConfig, log_every: int = 0) -> dict:
    """In-memory end-to-end run; returns the evaluation report dict."""
    meshes = generate_meshes(cfg)
    train_bundles = [prepare_bundle(m, cfg) for m in meshes["train"]]
    test_bundles = [prepare_bundle(m, cfg) for m in meshes["test"]]
    store, history = train_model(train_bundles, cfg, log_every=log_every)

    per_mesh = []
    for bundle in test_bundles:
        labels = segment_bundle(bundle, store, cfg)
        per_mesh.append(evaluate(labels, bundle.mesh.face_labels))
    report = {
        "config": cfg.to_dict(),
        "mean_miou": float(np.mean([r["miou"] for r in per_mesh])) if per_mesh else None,
        "per_mesh": per_mesh,
        "train_final": history[-1] if history else None,
        "coverage": coverage_stats(
            train_bundles[0].correspondence, train_bundles[0].skeleton
        ) if train_bundles else None,
    }
    return report


# --- on-disk pipeline (CLI) ----------------------------------------------------

def _canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, indent=1)


def run_pipeline(cfg: PipelineConfig, out_dir, stages: list | None = None, verbose: bool = True) -> dict:
    """File-backed pipeline with per-stage caching.

    Each stage is keyed by a hash of its upstream config; a stage whose
    artifacts exist under the current hash is reused, never recomputed.
    `stages` restricts which stages may run (upstream artifacts must then
    already be cached).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = stage_hashes(cfg)
    marker_path = out / "stages.json"
    markers = json.loads(marker_path.read_text()) if marker_path.exists() else {}
    requested = stages if stages is not None else STAGES
    for s in requested:
        if s not in STAGES:
            raise ArgumentError(f"unknown stage: {s}")

    def log(msg):
        if verbose:
            print(msg, flush=True)

    def fresh(stage):
        return markers.get(stage) == hashes[stage]

    def done(stage):
        markers[stage] = hashes[stage]
        marker_path.write_text(_canonical_json(markers))

    def require(stage):
        if not fresh(stage):
            raise ArgumentError(
                f"stage {stage!r} has no cached artifacts for this config; "
                f"run it first or drop --stages"
            )

    seeds = mesh_seeds(cfg)
    names = [("train", i, s) for i, s in enumerate(seeds["train"])]
    names += [("test", i, s) for i, s in enumerate(seeds["test"])]

    def mesh_path(split, i):
        return out / "meshes" / f"{split}_{i:03d}.ply"

    if "gen-data" in requested and not fresh("gen-data"):
        log("[gen-data] generating labeled tooth rows")
        (out / "meshes").mkdir(exist_ok=True)
        for split, i, seed in names:
            m = synth_tooth_row(seed, cfg.n_teeth, cfg.noise)
            export_labeled_ply(m, m.face_labels, mesh_path(split, i))
        done("gen-data")
    elif not fresh("gen-data"):
        require("gen-data")

    def load_normalized(split, i):
        mesh = load_mesh(mesh_path(split, i))
        normalized, _, _ = normalize_unit_sphere(mesh)
        return normalized

    if "skeletonize" in requested and not fresh("skeletonize"):
        log("[skeletonize] contracting meshes")
        (out / "skeletons").mkdir(exist_ok=True)
        for split, i, _ in names:
            skel = skeletonize(load_normalized(split, i), cfg.contraction_params())
            save_skeleton(skel, out / "skeletons" / f"{split}_{i:03d}.json")
        done("skeletonize")
    elif not fresh("skeletonize"):
        require("skeletonize")

    if "render" in requested and not fresh("render"):
        log("[render] rasterizing view rings")
        for split, i, _ in names:
            normalized = load_normalized(split, i)
            cams = camera_ring(
                normalized, cfg.views, cfg.elevations,
                fov_y=cfg.fov_y, resolution=(cfg.resolution, cfg.resolution),
            )
            views = render_views(normalized, cams, workers=cfg.workers or None)
            vdir = out / "renders" / f"{split}_{i:03d}"
            vdir.mkdir(parents=True, exist_ok=True)
            for v, (fb, cam) in enumerate(zip(views.buffers, views.cameras)):
                save_view(fb, cam, vdir / f"view_{v:02d}")
        done("render")
    elif not fresh("render"):
        require("render")

    def load_views(split, i) -> ViewSet:
        vdir = out / "renders" / f"{split}_{i:03d}"
        buffers, cams = [], []
        n_total = cfg.views * len(cfg.elevations)
        for v in range(n_total):
            fb, cam = load_view(vdir / f"view_{v:02d}")
            buffers.append(fb)
            cams.append(cam)
        normalized = load_normalized(split, i)
        _, radius = normalized.bounding_sphere()
        return ViewSet(cameras=cams, buffers=buffers, scene_radius=radius)

    if "correspond" in requested and not fresh("correspond"):
        log("[correspond] pairing skeleton nodes with patches")
        (out / "corr").mkdir(exist_ok=True)
        for split, i, _ in names:
            skel = load_skeleton(out / "skeletons" / f"{split}_{i:03d}.json")
            views = load_views(split, i)
            cm = build_correspondence(skel, views, cfg.patch_size, cfg.khop)
            save_correspondence(cm, out / "corr" / f"{split}_{i:03d}.jsonl")
        done("correspond")
    elif not fresh("correspond"):
        require("correspond")

    def load_bundle(split, i) -> MeshBundle:
        normalized = load_normalized(split, i)
        skel = load_skeleton(out / "skeletons" / f"{split}_{i:03d}.json")
        views = load_views(split, i)
        grids = [patchify(fb, cfg.patch_size, v) for v, fb in enumerate(views.buffers)]
        cm = load_correspondence(out / "corr" / f"{split}_{i:03d}.jsonl")
        gt = [
            patch_majority_labels(fb, normalized.face_labels, cfg.patch_size)
            for fb in views.buffers
        ]
        return MeshBundle(
            skeleton=skel, patch_grids=grids, correspondence=cm, patch_gt=gt,
            mesh=normalized, views=views,
        )

    if "train" in requested and not fresh("train"):
        log(f"[train] {cfg.steps} steps over {cfg.train_meshes} meshes")
        bundles = [load_bundle("train", i) for i in range(cfg.train_meshes)]
        store, history = train_model(bundles, cfg, log_every=50 if verbose else 0)
        ad.save_checkpoint(store, out / "ckpt", extra={"config": cfg.to_dict()})
        (out / "train_history.json").write_text(_canonical_json(history))
        done("train")
    elif not fresh("train"):
        require("train")

    if "segment" in requested and not fresh("segment"):
        log("[segment] lifting predictions onto test meshes")
        (out / "labeled").mkdir(exist_ok=True)
        store, _ = ad.load_checkpoint(out / "ckpt")
        for i in range(cfg.test_meshes):
            bundle = load_bundle("test", i)
            labels = segment_bundle(bundle, store, cfg)
            export_labeled_ply(bundle.mesh, labels, out / "labeled" / f"test_{i:03d}.ply")
        done("segment")
    elif not fresh("segment"):
        require("segment")

    report = {}
    if "eval" in requested and not fresh("eval"):
        log("[eval] scoring against ground truth")
        per_mesh = []
        for i in range(cfg.test_meshes):
            pred = load_mesh(out / "labeled" / f"test_{i:03d}.ply")
            gt_mesh = load_mesh(mesh_path("test", i))
            per_mesh.append(evaluate(pred.face_labels, gt_mesh.face_labels))
        history = json.loads((out / "train_history.json").read_text())
        report = {
            "config": cfg.to_dict(),
            "stage_hashes": hashes,
            "mean_miou": float(np.mean([r["miou"] for r in per_mesh])),
            "per_mesh": per_mesh,
            "train_final": history[-1] if history else None,
        }
        (out / "report.json").write_text(_canonical_json(report))
        done("eval")
    elif (out / "report.json").exists():
        report = json.loads((out / "report.json").read_text())
    return report
