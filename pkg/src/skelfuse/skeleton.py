"""Curve-skeleton extraction: Laplacian contraction followed by edge collapse.

Contraction iteratively solves a sparse least-squares system balancing
mass-normalized cotangent-Laplacian smoothing against per-vertex attraction;
the attraction weight grows where local area has collapsed, which freezes
already-skeletal regions. Collapse then merges the contracted vertices by
greedy shortest-edge contraction into a small node graph that keeps a
node -> original-vertex partition for label transfer.

Both stages are deterministic and rigid-equivariant: all weights derive
from rigid-invariant quantities, and edge-collapse ordering uses quantized
lengths with index-based tie-breaking so the greedy sequence is identical
under rigid transforms of the input.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ArgumentError, NotConnected, SolveError
from .mesh import TriMesh, is_connected

COT_CLAMP = (1e-6, 1e6)
ATTRACTION_CLAMP = 1e6
MIN_AREA_SHRINK = 0.05  # accepted iterations must shrink total area by 5%
# Area below this fraction of the original counts as fully contracted. Kept
# comfortably above solver noise: one more solve on that degenerate geometry
# would be ill-conditioned and its output irreproducible.
AREA_DONE_REL = 1e-3
COLLAPSED_VERTEX_AREA_REL = 1e-6  # vertex area below this x initial mean = collapsed
COLLAPSED_FRACTION_STOP = 0.3  # stop once this fraction of vertices has collapsed
LENGTH_QUANTUM_REL = 1e-3  # edge-length quantization for stable greedy ordering
# Initial smoothing weight relative to unit attraction. The mass-normalized
# Laplacian scales like curvature (1/length^2), so the weight is multiplied
# by the squared bounding-sphere radius to make contraction scale-invariant.
INITIAL_LAPLACIAN_WEIGHT = 0.15


@dataclass
class ContractionParams:
    iterations: int = 5
    contraction_weight_growth: float = 2.0
    initial_attraction: float = 1.0
    collapse_target_ratio: float = 0.2

    def __post_init__(self):
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        if self.contraction_weight_growth <= 1.0:
            raise ArgumentError("contraction_weight_growth must be > 1")
        if self.initial_attraction <= 0:
            raise ArgumentError("initial_attraction must be positive")
        if not 0 < self.collapse_target_ratio <= 1:
            raise ArgumentError("collapse_target_ratio must be in (0, 1]")


@dataclass
class Skeleton:
    positions: np.ndarray  # (K, 3) node positions
    radii: np.ndarray  # (K,) mean distance to owned surface vertices
    edges: np.ndarray  # (E, 2) node-index pairs, i < j, unique
    vertex_owner: np.ndarray  # (V,) owning node per original mesh vertex

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def adjacency(self) -> list[list[int]]:
        neigh = [set() for _ in range(self.n_nodes)]
        for i, j in self.edges:
            neigh[i].add(int(j))
            neigh[j].add(int(i))
        return [sorted(s) for s in neigh]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return True
        adj = self.adjacency()
        seen = np.zeros(self.n_nodes, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        return bool(seen.all())


def _face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = verts[faces[:, 1]] - verts[faces[:, 0]]
    b = verts[faces[:, 2]] - verts[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def _cot_laplacian(verts: np.ndarray, faces: np.ndarray):
    """Clamped cotangent weights; returns (L, vertex_areas).

    L = D - W with rows summing to zero. Vertex area is one third of the
    incident face area (barycentric lumping).
    """
    n = len(verts)
    ii, jj, ww = [], [], []
    for corner in range(3):
        i = faces[:, (corner + 1) % 3]
        j = faces[:, (corner + 2) % 3]
        k = faces[:, corner]
        u = verts[i] - verts[k]
        v = verts[j] - verts[k]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
        half = np.clip(0.5 * cot, COT_CLAMP[0], COT_CLAMP[1])
        ii.extend([i, j])
        jj.extend([j, i])
        ww.extend([half, half])
    w = sp.coo_matrix(
        (np.concatenate(ww), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n)
    ).tocsr()
    lap = sp.diags(np.asarray(w.sum(axis=1)).ravel()) - w

    areas = _face_areas(verts, faces)
    vertex_area = np.zeros(n)
    np.add.at(vertex_area, faces.ravel(), np.repeat(areas / 3.0, 3))
    return lap.tocsr(), vertex_area


def contract(mesh: TriMesh, p: ContractionParams) -> np.ndarray:
    """Contract mesh vertices toward the curve skeleton.

    Each accepted iteration must shrink total surface area by at least 5%;
    otherwise contraction stops early and the last accepted positions are
    returned.
    """
    if not is_connected(mesh):
        raise NotConnected("contract requires a connected mesh")
    verts = mesh.vertices.copy()
    faces = mesh.faces
    area0_total = _face_areas(verts, faces).sum()
    if area0_total <= 0:
        raise SolveError("mesh has zero surface area")
    _, area0_vertex = _cot_laplacian(verts, faces)
    mass_floor = COLLAPSED_VERTEX_AREA_REL * area0_vertex.mean()

    _, scene_r = mesh.bounding_sphere()
    w_l = INITIAL_LAPLACIAN_WEIGHT * scene_r * scene_r
    prev_area = area0_total
    for _ in range(p.iterations):
        lap, vertex_area = _cot_laplacian(verts, faces)
        inv_mass = 1.0 / np.maximum(vertex_area, mass_floor)
        lap_n = sp.diags(inv_mass) @ lap
        ratio = np.sqrt(area0_vertex / np.maximum(vertex_area, mass_floor))
        w_h = np.clip(p.initial_attraction * ratio, p.initial_attraction, ATTRACTION_CLAMP)

        lhs = (w_l * w_l) * (lap_n.T @ lap_n) + sp.diags(w_h * w_h)
        rhs = (w_h * w_h)[:, None] * verts
        try:
            solved = spla.splu(lhs.tocsc()).solve(rhs)
        except RuntimeError as e:
            raise SolveError(f"contraction system is singular: {e}") from e
        if not np.isfinite(solved).all():
            raise SolveError("contraction produced non-finite positions")

        new_area = _face_areas(solved, faces).sum()
        if new_area > (1.0 - MIN_AREA_SHRINK) * prev_area:
            break
        verts = solved
        prev_area = new_area
        w_l *= p.contraction_weight_growth
        if new_area < AREA_DONE_REL * area0_total:
            break  # the surface has degenerated to a curve; stop shrinking it
        _, va = _cot_laplacian(verts, faces)
        if (va < mass_floor).mean() > COLLAPSED_FRACTION_STOP:
            break  # most of the surface is already skeletal; solves past this
            # point are dominated by clamped weights and just straighten it
    return verts


class _Clusters:
    """Union-find over vertices; representative = min original index."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra > rb:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra


def collapse_to_skeleton(mesh: TriMesh, contracted: np.ndarray, target_ratio: float) -> Skeleton:
    """Greedy shortest-edge collapse of the contracted mesh into a skeleton.

    Cluster positions are means of owned contracted vertices; edge order is
    by quantized length with (min index, max index) tie-breaking. Node radius
    is the mean distance from owned original vertices to the node position.
    """
    if not 0 < target_ratio <= 1:
        raise ArgumentError("target_ratio must be in (0, 1]")
    n = mesh.n_vertices
    contracted = np.asarray(contracted, dtype=np.float64).reshape(n, 3)
    n_target = max(1, int(np.ceil(target_ratio * n)))

    center = contracted.mean(axis=0)
    scale = float(np.linalg.norm(contracted - center, axis=1).max())
    # Snapped to a power of two so the quantum is bitwise-stable under rigid
    # transforms of the input (the greedy order must not change).
    quantum = 2.0 ** np.ceil(np.log2(max(LENGTH_QUANTUM_REL * scale, 1e-300)))

    clusters = _Clusters(n)
    pos_sum = contracted.copy()
    count = np.ones(n, dtype=np.int64)
    version = np.zeros(n, dtype=np.int64)
    adj: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in mesh.edges():
        adj[int(a)].add(int(b))
        adj[int(b)].add(int(a))

    def qlen(a: int, b: int) -> int:
        pa = pos_sum[a] / count[a]
        pb = pos_sum[b] / count[b]
        return int(round(np.linalg.norm(pa - pb) / quantum))

    heap = []
    for a in adj:
        for b in adj[a]:
            if a < b:
                heap.append((qlen(a, b), a, b, 0, 0))
    heapq.heapify(heap)

    n_clusters = n
    while n_clusters > n_target and heap:
        _, a, b, va, vb = heapq.heappop(heap)
        if clusters.find(a) != a or clusters.find(b) != b:
            continue
        if version[a] != va or version[b] != vb:
            continue
        rep = clusters.union(a, b)
        other = b if rep == a else a
        pos_sum[rep] += pos_sum[other]
        count[rep] += count[other]
        version[rep] += 1
        neighbors = (adj[a] | adj[b]) - {a, b}
        adj[rep] = neighbors
        if other in adj:
            del adj[other]
        for nb in neighbors:
            adj[nb].discard(a)
            adj[nb].discard(b)
            adj[nb].add(rep)
            u, v = (rep, nb) if rep < nb else (nb, rep)
            heapq.heappush(heap, (qlen(u, v), u, v, int(version[u]), int(version[v])))
        n_clusters -= 1

    reps = sorted(adj)
    node_of_rep = {r: i for i, r in enumerate(reps)}
    owner = np.array([node_of_rep[clusters.find(v)] for v in range(n)], dtype=np.int64)

    positions = np.zeros((len(reps), 3))
    radii = np.zeros(len(reps))
    for i, r in enumerate(reps):
        members = np.flatnonzero(owner == i)
        positions[i] = contracted[members].mean(axis=0)
        radii[i] = np.linalg.norm(mesh.vertices[members] - positions[i], axis=1).mean()

    edge_set = set()
    for r in reps:
        for nb in adj[r]:
            i, j = node_of_rep[r], node_of_rep[nb]
            if i != j:
                edge_set.add((min(i, j), max(i, j)))
    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)
    return Skeleton(positions, radii, edges, owner)


def skeletonize(mesh: TriMesh, p: ContractionParams | None = None) -> Skeleton:
    """contract() then collapse_to_skeleton() with the same parameters."""
    p = p or ContractionParams()
    contracted = contract(mesh, p)
    return collapse_to_skeleton(mesh, contracted, p.collapse_target_ratio)


def save_skeleton(skel: Skeleton, path) -> None:
    doc = {
        "nodes": [
            {"p": [float(x) for x in pt], "r": float(r)}
            for pt, r in zip(skel.positions, skel.radii)
        ],
        "edges": [[int(i), int(j)] for i, j in skel.edges],
        "vertex_owner": [int(v) for v in skel.vertex_owner],
    }
    Path(path).write_text(json.dumps(doc))


def load_skeleton(path) -> Skeleton:
    doc = json.loads(Path(path).read_text())
    positions = np.array([n["p"] for n in doc["nodes"]], dtype=np.float64).reshape(-1, 3)
    radii = np.array([n["r"] for n in doc["nodes"]], dtype=np.float64)
    edges = np.array(doc["edges"], dtype=np.int64).reshape(-1, 2)
    owner = np.array(doc["vertex_owner"], dtype=np.int64)
    return Skeleton(positions, radii, edges, owner)
