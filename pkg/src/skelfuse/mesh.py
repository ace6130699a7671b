"""Triangle mesh representation, validation, and rigid transforms.

Conventions: vertices are float64 (V, 3) arrays in model units, faces are
int64 (F, 3) vertex-index triples wound counter-clockwise seen from outside,
and optional per-face instance labels use 0 for background/gingiva and
1..T for tooth instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, TopologyError

ORTHO_TOL = 1e-6


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.face_labels is not None:
            self.face_labels = np.asarray(self.face_labels, dtype=np.int64).ravel()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Center (vertex centroid) and radius of the enclosing sphere."""
        c = self.centroid
        r = float(np.linalg.norm(self.vertices - c, axis=1).max()) if self.n_vertices else 0.0
        return c, r

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) int array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def copy(self) -> "TriMesh":
        labels = None if self.face_labels is None else self.face_labels.copy()
        return TriMesh(self.vertices.copy(), self.faces.copy(), labels)


def check_topology(mesh: TriMesh) -> None:
    """Raise TopologyError on out-of-range indices or degenerate faces."""
    f = mesh.faces
    if f.size == 0:
        return
    if f.min() < 0 or f.max() >= mesh.n_vertices:
        raise TopologyError(
            f"face index out of range: max index {f.max()} with {mesh.n_vertices} vertices"
        )
    degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if degen.any():
        raise TopologyError(f"degenerate face(s) at indices {np.flatnonzero(degen).tolist()[:8]}")
    if mesh.face_labels is not None and len(mesh.face_labels) != mesh.n_faces:
        raise TopologyError("face_labels length does not match face count")


@dataclass
class ValidationReport:
    non_manifold_edges: list = field(default_factory=list)
    boundary_edges: list = field(default_factory=list)
    orientation_conflicts: list = field(default_factory=list)
    duplicate_faces: list = field(default_factory=list)

    @property
    def is_clean(self) -> bool:
        return not (
            self.non_manifold_edges
            or self.boundary_edges
            or self.orientation_conflicts
            or self.duplicate_faces
        )

    @property
    def is_watertight(self) -> bool:
        return not self.non_manifold_edges and not self.boundary_edges


def validate(mesh: TriMesh) -> ValidationReport:
    """Report non-manifold edges, boundary edges, orientation conflicts,
    and duplicate faces. The mesh is not modified."""
    report = ValidationReport()

    seen = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        key = tuple(sorted((int(a), int(b), int(c))))
        if key in seen:
            report.duplicate_faces.append((seen[key], fi))
        else:
            seen[key] = fi

    # Directed half-edges: a consistently oriented manifold edge is traversed
    # once in each direction.
    directed: dict[tuple[int, int], int] = {}
    for a, b, c in mesh.faces:
        for u, v in ((int(a), int(b)), (int(b), int(c)), (int(c), int(a))):
            directed[(u, v)] = directed.get((u, v), 0) + 1

    undirected: dict[tuple[int, int], tuple[int, int]] = {}
    for (u, v), n in directed.items():
        key = (min(u, v), max(u, v))
        fwd, bwd = undirected.get(key, (0, 0))
        if (u, v) == key:
            undirected[key] = (fwd + n, bwd)
        else:
            undirected[key] = (fwd, bwd + n)

    for key in sorted(undirected):
        fwd, bwd = undirected[key]
        total = fwd + bwd
        if total > 2:
            report.non_manifold_edges.append(key)
        elif total == 1:
            report.boundary_edges.append(key)
        elif fwd != 1:  # total == 2 with both traversals in the same direction
            report.orientation_conflicts.append(key)
    return report


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHO_TOL or abs(np.linalg.det(self.rotation) - 1.0) > ORTHO_TOL:
            raise ArgumentError("rotation must be orthonormal with determinant +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def about_z(angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(rot, np.asarray(translation, dtype=np.float64))

    @staticmethod
    def random(rng: np.random.Generator, max_translation: float = 1.0) -> "RigidTransform":
        # QR of a Gaussian matrix gives a uniformly random orthogonal matrix.
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q *= np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        t = rng.uniform(-max_translation, max_translation, size=3)
        return RigidTransform(q, t)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_transform(mesh: TriMesh, t: RigidTransform) -> TriMesh:
    """Map vertices by R·v + t; connectivity and labels are unchanged."""
    labels = None if mesh.face_labels is None else mesh.face_labels.copy()
    return TriMesh(t.apply_points(mesh.vertices), mesh.faces.copy(), labels)


def normalize_unit_sphere(mesh: TriMesh) -> tuple[TriMesh, np.ndarray, float]:
    """Center on the vertex centroid and scale the bounding sphere to radius 1.

    Returns (normalized mesh, original center, original radius). All
    downstream stages of the pipeline operate on normalized meshes.
    """
    center, radius = mesh.bounding_sphere()
    if radius <= 0:
        raise ArgumentError("cannot normalize a mesh with zero extent")
    labels = None if mesh.face_labels is None else mesh.face_labels.copy()
    return TriMesh((mesh.vertices - center) / radius, mesh.faces.copy(), labels), center, radius


def vertex_adjacency(mesh: TriMesh) -> list[list[int]]:
    """Neighbor lists over mesh edges, each list sorted ascending."""
    neigh = [set() for _ in range(mesh.n_vertices)]
    for a, b in mesh.edges():
        neigh[a].add(int(b))
        neigh[b].add(int(a))
    return [sorted(s) for s in neigh]


def is_connected(mesh: TriMesh) -> bool:
    if mesh.n_vertices == 0:
        return True
    adj = vertex_adjacency(mesh)
    seen = np.zeros(mesh.n_vertices, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    return bool(seen.all())


def face_adjacency(mesh: TriMesh) -> list[list[int]]:
    """Face neighbor lists over shared undirected edges."""
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(int(u), int(v)), max(int(u), int(v)))
            edge_faces.setdefault(key, []).append(fi)
    neigh = [set() for _ in range(mesh.n_faces)]
    for fs in edge_faces.values():
        for i in fs:
            for j in fs:
                if i != j:
                    neigh[i].add(j)
    return [sorted(s) for s in neigh]
