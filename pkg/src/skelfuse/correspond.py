"""Cross-modal correspondence between skeleton nodes and image patches.

Hop-0 positives pair a node with the patch its visible projection lands in.
Because projection alone gives an incomplete relationship (a patch may need
several adjacent nodes to explain it), positives are then expanded along the
skeleton graph: at hop h every graph neighbor of a node paired with (view,
patch) at hop h-1 is added, keeping the minimal hop per triple. Raising
k_hop only ever adds pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .render import FrameBuffer, ViewSet, node_visible, project_point
from .skeleton import Skeleton


@dataclass
class PatchGrid:
    view_id: int
    patch_size: int
    grid: int  # G patches per side
    patches: np.ndarray  # (G*G, P*P) row-major patch intensities

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


def patchify(fb: FrameBuffer, patch_size: int, view_id: int = 0) -> PatchGrid:
    """Lossless tiling of the intensity buffer into P x P patches.

    Patch (r, c) covers pixel rows [rP, (r+1)P) and columns [cP, (c+1)P);
    its index is r * G + c.
    """
    h, w = fb.intensity.shape
    if h != w:
        raise ArgumentError(f"patchify expects square buffers, got {w}x{h}")
    if h % patch_size != 0:
        raise ArgumentError(f"resolution {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    tiles = (
        fb.intensity.reshape(g, patch_size, g, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(g * g, patch_size * patch_size)
    )
    return PatchGrid(view_id=view_id, patch_size=patch_size, grid=g, patches=tiles.copy())


def reassemble(grid: PatchGrid) -> np.ndarray:
    g, p = grid.grid, grid.patch_size
    return (
        grid.patches.reshape(g, g, p, p).transpose(0, 2, 1, 3).reshape(g * p, g * p)
    )


@dataclass
class CorrespondenceMap:
    hops: dict = field(default_factory=dict)  # (node, view, patch) -> minimal hop
    n_nodes: int = 0
    n_views: int = 0
    patches_per_view: int = 0

    @property
    def positives(self) -> set:
        return {(n, v, p, h) for (n, v, p), h in self.hops.items()}

    def triples(self) -> set:
        return set(self.hops)

    def node_coverage(self) -> np.ndarray:
        cov = np.zeros(self.n_nodes, dtype=np.int64)
        for (n, _, _) in self.hops:
            cov[n] += 1
        return cov

    def __len__(self) -> int:
        return len(self.hops)


def build_correspondence(
    skel: Skeleton, views: ViewSet, patch_size: int, k_hop: int
) -> CorrespondenceMap:
    """Visible-projection positives plus k-hop graph augmentation."""
    if k_hop < 0:
        raise ArgumentError("k_hop must be >= 0")
    adjacency = skel.adjacency()
    cm = CorrespondenceMap(n_nodes=skel.n_nodes, n_views=len(views.cameras))

    grid = None
    for view_id, (cam, fb) in enumerate(zip(views.cameras, views.buffers)):
        w, h = cam.resolution
        if w % patch_size or h % patch_size:
            raise ArgumentError(f"resolution {w}x{h} not divisible by {patch_size}")
        grid = w // patch_size
        cm.patches_per_view = grid * grid
        for n in range(skel.n_nodes):
            if not node_visible(cam, fb, skel.positions[n], skel.radii[n]):
                continue
            (px, py), _ = project_point(cam, skel.positions[n])
            col = min(int(px) // patch_size, grid - 1)
            row = min(int(py) // patch_size, grid - 1)
            cm.hops[(n, view_id, row * grid + col)] = 0

    frontier = list(cm.hops)
    for hop in range(1, k_hop + 1):
        new = []
        for (n, v, p) in frontier:
            for m in adjacency[n]:
                key = (m, v, p)
                if key not in cm.hops:
                    cm.hops[key] = hop
                    new.append(key)
        frontier = new
    return cm


def coverage_stats(cm: CorrespondenceMap, skel: Skeleton) -> dict:
    """Summary fractions in [0, 1] quantifying how complete the map is."""
    n_nodes = max(skel.n_nodes, 1)
    cov = cm.node_coverage() if cm.n_nodes else np.zeros(n_nodes, dtype=np.int64)
    total_patches = max(cm.n_views * cm.patches_per_view, 1)
    patches_hit = len({(v, p) for (_, v, p) in cm.hops})
    return {
        "frac_nodes_covered": float((cov > 0).mean()) if len(cm) else 0.0,
        "mean_positives_per_node": float(cov.mean()) if len(cm) else 0.0,
        "frac_patches_with_node": patches_hit / total_patches if len(cm) else 0.0,
    }


def save_correspondence(cm: CorrespondenceMap, path) -> None:
    lines = [
        json.dumps({"node": n, "view": v, "patch": p, "hop": h})
        for (n, v, p), h in sorted(cm.hops.items())
    ]
    header = json.dumps(
        {
            "n_nodes": cm.n_nodes,
            "n_views": cm.n_views,
            "patches_per_view": cm.patches_per_view,
        }
    )
    Path(path).write_text("\n".join([header] + lines) + "\n")


def load_correspondence(path) -> CorrespondenceMap:
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0])
    cm = CorrespondenceMap(
        n_nodes=meta["n_nodes"],
        n_views=meta["n_views"],
        patches_per_view=meta["patches_per_view"],
    )
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        cm.hops[(rec["node"], rec["view"], rec["patch"])] = rec["hop"]
    return cm


def pixel_labels(fb: FrameBuffer, face_labels: np.ndarray) -> np.ndarray:
    """Per-pixel instance labels via the face-id buffer (0 = background)."""
    out = np.zeros(fb.face_id.shape, dtype=np.int64)
    hit = fb.face_id >= 0
    out[hit] = face_labels[fb.face_id[hit]]
    return out


def patch_majority_labels(fb: FrameBuffer, face_labels: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority pixel label per patch, ties to the smaller label; (G*G,)."""
    labels = pixel_labels(fb, face_labels)
    h, w = labels.shape
    g = h // patch_size
    tiles = labels.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(g * g, patch_size * patch_size)
    out = np.zeros(g * g, dtype=np.int64)
    for i, tile in enumerate(tiles):
        out[i] = np.bincount(tile).argmax()
    return out
