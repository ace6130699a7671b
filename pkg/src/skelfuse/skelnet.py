"""Graph network over skeletons: encoder/decoder with hierarchical pooling.

Pooling contracts a greedy maximal edge matching ordered by ascending node
distance (index-pair tie-break), which keeps connected graphs connected and
is fully deterministic. The decoder unpools along the recorded assignments
with skip concatenation, yielding one embedding per original skeleton node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import MissingAssignment, ShapeError
from .skeleton import Skeleton


@dataclass
class SkeletonNetConfig:
    levels: int = 3
    dims: tuple = (32, 64, 64)
    pool_ratio: float = 0.5
    in_features: int = 5  # x, y, z, radius, degree

    def __post_init__(self):
        if self.levels < 1 or len(self.dims) != self.levels:
            raise ShapeError("dims must have one width per level")

    @property
    def out_dim(self) -> int:
        return self.dims[-1]


@dataclass
class SkelGraphLevel:
    adjacency: list
    positions: np.ndarray
    features: "ad.Tensor | None" = None
    assignment: np.ndarray | None = None  # fine index -> this level's node
    _mean_matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.adjacency)

    def neighbor_mean_matrix(self) -> np.ndarray:
        """Row-stochastic averaging matrix; isolated nodes get a zero row."""
        if self._mean_matrix is None:
            n = self.n_nodes
            m = np.zeros((n, n))
            for i, neigh in enumerate(self.adjacency):
                if neigh:
                    m[i, neigh] = 1.0 / len(neigh)
            self._mean_matrix = m
        return self._mean_matrix


def gconv(level: SkelGraphLevel, w_self: ad.Tensor, w_neigh: ad.Tensor) -> ad.Tensor:
    """h'_i = relu(h_i W_self + mean_{j in N(i)} h_j W_neigh)."""
    x = level.features
    if x.data.shape[1] != w_self.data.shape[0]:
        raise ShapeError(
            f"features width {x.data.shape[1]} vs weight {w_self.data.shape[0]}"
        )
    neigh = ad.matmul(ad.Tensor(level.neighbor_mean_matrix()), x)
    return ad.relu(ad.add(ad.matmul(x, w_self), ad.matmul(neigh, w_neigh)))


def row_standardize(x: ad.Tensor, eps: float = 1e-3) -> ad.Tensor:
    """Zero-mean unit-variance per node row. Deep unnormalized conv stacks
    blow up on high-degree skeleton graphs, so each stage output is
    standardized; the op is per-row, preserving permutation equivariance.
    eps is fat on purpose: relu can kill a whole row, and a near-zero
    variance floor would make the gradient curvature explode there."""
    mu = ad.tmean(x, axis=1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=1, keepdims=True)
    return ad.div(xc, ad.sqrt(ad.add(var, eps)))


def _matching_rounds(adjacency, positions, target):
    """Greedy distance-ordered maximal matching until <= target clusters."""
    n = len(adjacency)
    owner = np.arange(n)
    count = n
    while count > target:
        edges = []
        for i, neigh in enumerate(adjacency):
            for j in neigh:
                if i < j:
                    d = float(np.linalg.norm(positions[i] - positions[j]))
                    edges.append((d, i, j))
        if not edges:
            break
        edges.sort()
        matched = np.zeros(len(adjacency), dtype=bool)
        pairs = []
        for _, i, j in edges:
            if count <= target:
                break
            if not matched[i] and not matched[j]:
                matched[i] = matched[j] = True
                pairs.append((i, j))
                count -= 1
        if not pairs:
            break
        # Relabel: cluster representative is the smaller endpoint.
        rep = np.arange(len(adjacency))
        for i, j in pairs:
            rep[j] = i
        reps = sorted(set(rep.tolist()))
        new_id = {r: k for k, r in enumerate(reps)}
        local = np.array([new_id[rep[v]] for v in range(len(adjacency))])

        new_adj = [set() for _ in reps]
        for i, neigh in enumerate(adjacency):
            for j in neigh:
                a, b = local[i], local[j]
                if a != b:
                    new_adj[a].add(int(b))
                    new_adj[b].add(int(a))
        new_pos = np.zeros((len(reps), 3))
        sizes = np.bincount(local, minlength=len(reps)).astype(float)
        np.add.at(new_pos, local, positions)
        new_pos /= sizes[:, None]

        owner = local[owner]
        adjacency = [sorted(s) for s in new_adj]
        positions = new_pos
        count = len(reps)
    return adjacency, positions, owner


def pool(level: SkelGraphLevel, ratio: float) -> SkelGraphLevel:
    """Merge matched node pairs until count <= ceil(ratio * N).

    Coarse features are means of merged features (differentiable); the
    fine -> coarse assignment is recorded for unpooling.
    """
    n = level.n_nodes
    target = max(1, int(np.ceil(ratio * n)))
    adjacency, positions, assignment = _matching_rounds(
        level.adjacency, level.positions, target
    )
    coarse = SkelGraphLevel(adjacency=adjacency, positions=positions, assignment=assignment)
    if level.features is not None:
        sizes = np.bincount(assignment, minlength=coarse.n_nodes).astype(np.float64)
        summed = ad.scatter_add(level.features, assignment, coarse.n_nodes)
        coarse.features = ad.mul(summed, ad.Tensor(1.0 / sizes[:, None]))
    return coarse


def unpool(assignment: np.ndarray, coarse_features: ad.Tensor) -> ad.Tensor:
    """Fine feature i = coarse feature of assignment(i); grads scatter-add."""
    if assignment is None:
        raise MissingAssignment("unpool requires the assignment recorded by pool")
    return ad.gather(coarse_features, assignment)


def node_input_features(skel: Skeleton) -> np.ndarray:
    """(x, y, z, radius, degree) with positions centered and scaled to unit
    RMS; radius shares the scale factor so geometry stays proportionate."""
    pos = skel.positions - skel.positions.mean(axis=0)
    rms = float(np.sqrt((pos**2).sum(axis=1).mean()))
    if rms <= 0:
        rms = 1.0
    deg = skel.degrees().astype(np.float64)
    return np.column_stack([pos / rms, skel.radii / rms, deg])


PARAM_SHAPES = "skelnet"


def init_skeleton_net(store: ad.ParamStore, cfg: SkeletonNetConfig, rng: np.random.Generator):
    """Register encoder, bottleneck, and decoder conv weights."""
    def add(name, fan_in, fan_out):
        store.add(name, ad.uniform_init(rng, fan_in, fan_out, (fan_in, fan_out)))

    widths = [cfg.in_features] + list(cfg.dims[:-1])
    for l in range(cfg.levels - 1):
        add(f"skelnet.enc{l}.self", widths[l], cfg.dims[l])
        add(f"skelnet.enc{l}.neigh", widths[l], cfg.dims[l])
    mid_in = cfg.dims[-2] if cfg.levels > 1 else cfg.in_features
    add("skelnet.mid.self", mid_in, cfg.dims[-1])
    add("skelnet.mid.neigh", mid_in, cfg.dims[-1])
    for l in reversed(range(cfg.levels - 1)):
        cat = cfg.dims[-1] + cfg.dims[l]  # unpooled + skip
        add(f"skelnet.dec{l}.self", cat, cfg.dims[-1])
        add(f"skelnet.dec{l}.neigh", cat, cfg.dims[-1])


def skeleton_net_forward(
    skel: Skeleton, store: ad.ParamStore, cfg: SkeletonNetConfig | None = None
) -> ad.Tensor:
    """Per-node embeddings of shape (n_nodes, cfg.out_dim)."""
    cfg = cfg or SkeletonNetConfig()
    level = SkelGraphLevel(adjacency=skel.adjacency(), positions=skel.positions.copy())
    level.features = ad.Tensor(node_input_features(skel))

    skips, levels = [], [level]
    for l in range(cfg.levels - 1):
        out = row_standardize(
            gconv(level, store[f"skelnet.enc{l}.self"], store[f"skelnet.enc{l}.neigh"])
        )
        level.features = out
        skips.append(out)
        level = pool(level, cfg.pool_ratio)
        levels.append(level)

    level.features = row_standardize(
        gconv(level, store["skelnet.mid.self"], store["skelnet.mid.neigh"])
    )

    x = level.features
    for l in reversed(range(cfg.levels - 1)):
        x = unpool(levels[l + 1].assignment, x)
        fine = levels[l]
        fine.features = ad.concat([x, skips[l]], axis=1)
        x = row_standardize(
            gconv(fine, store[f"skelnet.dec{l}.self"], store[f"skelnet.dec{l}.neigh"])
        )
    return x
