"""2D patch encoder, skeleton-image contrastive loss, cross-attention fusion,
and the query-based instance head with its bipartite-matching loss.

Every learnable path runs on the autodiff tape; matching (Hungarian) and
negative sampling happen on plain arrays and act as constants to the tape.
The cross-attention fusion block is built so that zeroing its output
projection makes it exactly the identity on patch embeddings: the residual
branch is MLP(CA(x)) with no biases anywhere in the branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .correspond import CorrespondenceMap, PatchGrid
from .errors import EmptyCorrespondence, ShapeError
from .lifting import hungarian
from .skeleton import Skeleton
from .skelnet import SkeletonNetConfig, init_skeleton_net, skeleton_net_forward

NO_OBJECT, BG_CLASS, INSTANCE = 0, 1, 2


@dataclass
class PatchEncoderConfig:
    patch_size: int = 16
    embed_dim: int = 64
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must be divisible by heads")
        if self.embed_dim % 4:
            raise ShapeError("embed_dim must be divisible by 4 for 2-D sincos")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    max_negatives: int = 512  # sampled other-view patches per view
    seed: int = 0


@dataclass
class SegHeadConfig:
    queries: int = 24
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    mask_logit_clamp: float = 15.0


@dataclass
class ModelConfig:
    skelnet: SkeletonNetConfig = field(default_factory=SkeletonNetConfig)
    encoder: PatchEncoderConfig = field(default_factory=PatchEncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    head: SegHeadConfig = field(default_factory=SegHeadConfig)
    lambda_con: float = 0.5

    @property
    def embed_dim(self) -> int:
        return self.encoder.embed_dim


@dataclass
class MeshBundle:
    """Everything train_step needs for one mesh."""

    skeleton: Skeleton
    patch_grids: list  # PatchGrid per view
    correspondence: CorrespondenceMap
    patch_gt: list  # (G^2,) int per view: majority instance label per patch
    mesh: object = None  # TriMesh, kept for lifting/evaluation
    views: object = None  # ViewSet, kept for lifting/evaluation


def sincos_position_encoding(grid: int, dim: int) -> np.ndarray:
    """2-D sinusoidal encoding per (row, col), shape (grid^2, dim)."""
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.concatenate(
        [
            np.sin(rows[:, None] * omega),
            np.cos(rows[:, None] * omega),
            np.sin(cols[:, None] * omega),
            np.cos(cols[:, None] * omega),
        ],
        axis=1,
    )


# -- parameter initialisation -------------------------------------------------

def _linear(store, rng, name, fan_in, fan_out, bias=True):
    store.add(name + ".w", ad.uniform_init(rng, fan_in, fan_out, (fan_in, fan_out)))
    if bias:
        store.add(name + ".b", np.zeros(fan_out))


def _layernorm(store, name, dim):
    store.add(name + ".g", np.ones(dim))
    store.add(name + ".b", np.zeros(dim))


def _attention_params(store, rng, prefix, dim):
    # No key bias: softmax cancels a constant shift per row exactly, so a key
    # bias is a dead parameter (and trips finite-difference checks).
    for part in ("q", "k", "v", "proj"):
        _linear(store, rng, f"{prefix}.{part}", dim, dim, bias=part != "k")


def init_patch_encoder(store: ad.ParamStore, cfg: PatchEncoderConfig, rng):
    d = cfg.embed_dim
    _linear(store, rng, "patchenc.embed", cfg.patch_size**2, d)
    for b in range(cfg.blocks):
        p = f"patchenc.blk{b}"
        _layernorm(store, f"{p}.ln1", d)
        _attention_params(store, rng, f"{p}.attn", d)
        _layernorm(store, f"{p}.ln2", d)
        _linear(store, rng, f"{p}.mlp1", d, d * cfg.mlp_ratio)
        _linear(store, rng, f"{p}.mlp2", d * cfg.mlp_ratio, d)


def init_fusion(store: ad.ParamStore, dim: int, rng, mlp_ratio: int = 2):
    _linear(store, rng, "fuse.q", dim, dim)
    _linear(store, rng, "fuse.k", dim, dim, bias=False)  # softmax cancels key bias
    _linear(store, rng, "fuse.v", dim, dim)
    _linear(store, rng, "fuse.out", dim, dim, bias=False)
    _linear(store, rng, "fuse.mlp1", dim, dim * mlp_ratio, bias=False)
    _linear(store, rng, "fuse.mlp2", dim * mlp_ratio, dim, bias=False)


def init_seg_head(store: ad.ParamStore, cfg: SegHeadConfig, dim: int, rng):
    store.add("head.queries", ad.uniform_init(rng, cfg.queries, dim, (cfg.queries, dim)))
    for b in range(cfg.blocks):
        p = f"head.blk{b}"
        _layernorm(store, f"{p}.ln1", dim)
        _attention_params(store, rng, f"{p}.cross", dim)
        _layernorm(store, f"{p}.ln2", dim)
        _attention_params(store, rng, f"{p}.self", dim)
        _layernorm(store, f"{p}.ln3", dim)
        _linear(store, rng, f"{p}.mlp1", dim, dim * cfg.mlp_ratio)
        _linear(store, rng, f"{p}.mlp2", dim * cfg.mlp_ratio, dim)
    _linear(store, rng, "head.cls", dim, 3)


def init_model(store: ad.ParamStore, cfg: ModelConfig, rng) -> None:
    init_skeleton_net(store, cfg.skelnet, rng)
    init_patch_encoder(store, cfg.encoder, rng)
    init_fusion(store, cfg.embed_dim, rng)
    init_seg_head(store, cfg.head, cfg.embed_dim, rng)


# -- building blocks ----------------------------------------------------------

def _layer_norm(x, store, name, eps=1e-5):
    mu = ad.tmean(x, axis=1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=1, keepdims=True)
    xhat = ad.div(xc, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(xhat, store[name + ".g"]), store[name + ".b"])


def _project(x, store, name):
    return ad.add(ad.matmul(x, store[name + ".w"]), store[name + ".b"])


def _multihead_attention(queries, memory, store, prefix, heads, n_batch=1):
    """Softmax(QK^T / sqrt(d_head)) V per head, concatenated and projected.

    Rows of `queries`/`memory` are grouped into n_batch independent segments
    (one per view); attention never crosses segments. All heads and segments
    run as one batched matmul.
    """
    d = queries.data.shape[1]
    dh = d // heads
    tq = queries.data.shape[0] // n_batch
    tk = memory.data.shape[0] // n_batch
    q = _project(queries, store, prefix + ".q")
    k = ad.matmul(memory, store[prefix + ".k.w"])
    v = _project(memory, store, prefix + ".v")

    def split_heads(x, t):
        x4 = ad.reshape(x, (n_batch, t, heads, dh))
        return ad.reshape(ad.transpose_axes(x4, (0, 2, 1, 3)), (n_batch * heads, t, dh))

    # scale q up front: far cheaper than scaling the (B, Tq, Tk) score tensor
    q3 = split_heads(ad.mul(q, 1.0 / np.sqrt(dh)), tq)
    k3, v3 = split_heads(k, tk), split_heads(v, tk)
    scores = ad.bmm(q3, ad.transpose_axes(k3, (0, 2, 1)))
    out = ad.bmm(ad.softmax(scores, axis=-1), v3)
    out4 = ad.reshape(out, (n_batch, heads, tq, dh))
    flat = ad.reshape(ad.transpose_axes(out4, (0, 2, 1, 3)), (n_batch * tq, d))
    return _project(flat, store, prefix + ".proj")


def _mlp(x, store, name1, name2, bias=True):
    if bias:
        return _project(ad.relu(_project(x, store, name1)), store, name2)
    hidden = ad.relu(ad.matmul(x, store[name1 + ".w"]))
    return ad.matmul(hidden, store[name2 + ".w"])


def encode_patches_multi(
    grids: list, store: ad.ParamStore, cfg: PatchEncoderConfig, positional: bool = True
) -> ad.Tensor:
    """Encode every view's patch grid in one pass; rows are view-major.

    Attention is confined to each view's own patches (batched, never across
    views); the linear embed, norms and MLPs are shared row ops.
    """
    for grid in grids:
        if grid.patches.shape[1] != cfg.patch_size**2:
            raise ShapeError(
                f"patch dim {grid.patches.shape[1]} vs configured {cfg.patch_size**2}"
            )
        if grid.grid != grids[0].grid:
            raise ShapeError("all views must share one patch grid size")
    x = _project(ad.Tensor(np.vstack([g.patches for g in grids])), store, "patchenc.embed")
    if positional:
        pe = sincos_position_encoding(grids[0].grid, cfg.embed_dim)
        x = ad.add(x, ad.Tensor(np.tile(pe, (len(grids), 1))))
    for b in range(cfg.blocks):
        p = f"patchenc.blk{b}"
        normed = _layer_norm(x, store, f"{p}.ln1")
        x = ad.add(x, _multihead_attention(
            normed, normed, store, f"{p}.attn", cfg.heads, n_batch=len(grids),
        ))
        x = ad.add(x, _mlp(_layer_norm(x, store, f"{p}.ln2"), store, f"{p}.mlp1", f"{p}.mlp2"))
    return x


def encode_patches(
    grid: PatchGrid, store: ad.ParamStore, cfg: PatchEncoderConfig, positional: bool = True
) -> ad.Tensor:
    """One embedding per patch: linear embed + 2-D sincos position, then
    pre-norm transformer blocks."""
    return encode_patches_multi([grid], store, cfg, positional=positional)


def l2_normalize(x: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    norm = ad.sqrt(ad.add(ad.tsum(ad.mul(x, x), axis=1, keepdims=True), eps))
    return ad.div(x, norm)


def contrastive_loss(
    node_emb: ad.Tensor,
    patch_embs: list,
    cm: CorrespondenceMap,
    cfg: ContrastiveConfig | None = None,
) -> ad.Tensor:
    """Symmetric InfoNCE over (node, patch) positives.

    Node->patch candidates are every patch of the positive's view plus up to
    `max_negatives` seeded-sampled patches from other views; patch->node
    candidates are all skeleton nodes. Embeddings are L2-normalized here.
    """
    cfg = cfg or ContrastiveConfig()
    if len(cm) == 0:
        raise EmptyCorrespondence("no positive pairs to contrast")
    nodes = l2_normalize(node_emb)
    patches = [l2_normalize(p) for p in patch_embs]
    sizes = [p.data.shape[0] for p in patches]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    all_patches = ad.concat(patches, axis=0) if len(patches) > 1 else patches[0]
    inv_tau = 1.0 / cfg.temperature

    by_view: dict[int, list] = {}
    for (n, v, p) in sorted(cm.hops):
        by_view.setdefault(v, []).append((n, p))

    npos_terms = []
    ppos_terms = []
    for v, pos in by_view.items():
        own = np.arange(offsets[v], offsets[v + 1])
        others = np.concatenate(
            [np.arange(offsets[u], offsets[u + 1]) for u in range(len(patches)) if u != v]
        ) if len(patches) > 1 else np.array([], dtype=np.int64)
        if len(others) > cfg.max_negatives:
            rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, v, 0x5EED])
            others = np.sort(rng.choice(others, size=cfg.max_negatives, replace=False))
        cand = np.concatenate([own, others]).astype(np.int64)

        logits = ad.mul(ad.matmul(nodes, ad.transpose(ad.gather(all_patches, cand))), inv_tau)
        log_probs = ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True))
        n_cand = len(cand)
        flat = ad.reshape(log_probs, (nodes.data.shape[0] * n_cand, 1))
        rows = np.array([n * n_cand + p for (n, p) in pos], dtype=np.int64)
        npos_terms.append(ad.neg(ad.gather(flat, rows)))

        logits_pn = ad.mul(ad.matmul(patches[v], ad.transpose(nodes)), inv_tau)
        log_probs_pn = ad.sub(logits_pn, ad.logsumexp(logits_pn, axis=1, keepdims=True))
        n_nodes = nodes.data.shape[0]
        flat_pn = ad.reshape(log_probs_pn, (sizes[v] * n_nodes, 1))
        rows_pn = np.array([p * n_nodes + n for (n, p) in pos], dtype=np.int64)
        ppos_terms.append(ad.neg(ad.gather(flat_pn, rows_pn)))

    l_np = ad.tmean(ad.concat(npos_terms, axis=0))
    l_pn = ad.tmean(ad.concat(ppos_terms, axis=0))
    return ad.mul(ad.add(l_np, l_pn), 0.5)


def fuse(
    patch_emb: ad.Tensor,
    node_emb: ad.Tensor,
    store: ad.ParamStore,
    return_attention: bool = False,
):
    """Patches attend over skeleton nodes; the attended value runs through a
    bias-free MLP and adds residually. Zero `fuse.out.w` => exact identity."""
    d = patch_emb.data.shape[1]
    q = _project(patch_emb, store, "fuse.q")
    k = ad.matmul(node_emb, store["fuse.k.w"])
    v = _project(node_emb, store, "fuse.v")
    att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d)), axis=1)
    ca = ad.matmul(ad.matmul(att, v), store["fuse.out.w"])
    out = ad.add(patch_emb, _mlp(ca, store, "fuse.mlp1", "fuse.mlp2", bias=False))
    if return_attention:
        return out, att
    return out


def seg_forward_multi(fused_flat: ad.Tensor, n_views: int, store: ad.ParamStore, cfg: SegHeadConfig):
    """Query decoder over all views at once (rows of fused_flat view-major).

    Returns (class_logits (V*Q, 3), mask_logits (V, Q, G^2)). Each view gets
    its own copy of the learned queries; attention is per view.
    """
    d = fused_flat.data.shape[1]
    n_q = cfg.queries
    t = fused_flat.data.shape[0] // n_views
    q = ad.gather(store["head.queries"], np.tile(np.arange(n_q), n_views))
    for b in range(cfg.blocks):
        p = f"head.blk{b}"
        q = ad.add(q, _multihead_attention(
            _layer_norm(q, store, f"{p}.ln1"), fused_flat, store, f"{p}.cross",
            cfg.heads, n_batch=n_views,
        ))
        normed = _layer_norm(q, store, f"{p}.ln2")
        q = ad.add(q, _multihead_attention(
            normed, normed, store, f"{p}.self", cfg.heads, n_batch=n_views,
        ))
        q = ad.add(q, _mlp(_layer_norm(q, store, f"{p}.ln3"), store, f"{p}.mlp1", f"{p}.mlp2"))
    class_logits = _project(q, store, "head.cls")
    q3 = ad.reshape(q, (n_views, n_q, d))
    fused3 = ad.reshape(fused_flat, (n_views, t, d))
    mask_logits = ad.mul(ad.bmm(q3, ad.transpose_axes(fused3, (0, 2, 1))), 1.0 / np.sqrt(d))
    return class_logits, mask_logits


def seg_forward(fused: ad.Tensor, store: ad.ParamStore, cfg: SegHeadConfig):
    """Query decoder over one view's fused patches.

    Returns (class_logits (Q, 3), mask_logits (Q, G^2)); mask logit is the
    scaled inner product of query and patch embeddings.
    """
    cls, mask3 = seg_forward_multi(fused, 1, store, cfg)
    return cls, ad.reshape(mask3, (cfg.queries, fused.data.shape[0]))


def gt_segments(patch_labels: np.ndarray) -> list:
    """(class, mask) targets per distinct patch label; 0 maps to background."""
    segs = []
    for lab in np.unique(patch_labels):
        segs.append(
            (BG_CLASS if lab == 0 else INSTANCE, (patch_labels == lab).astype(np.float64))
        )
    return segs


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return x - m - np.log(e.sum(axis=1, keepdims=True))


def _matching(class_data, mask_data, segments, clamp):
    """Hungarian assignment of queries to gt segments on detached costs."""
    lp = _log_softmax_rows(class_data)
    probs = 1.0 / (1.0 + np.exp(-np.clip(mask_data, -clamp, clamp)))
    n_q = class_data.shape[0]
    cost = np.zeros((n_q, len(segments)))
    for s, (klass, mask) in enumerate(segments):
        bce = -(mask[None] * np.log(probs) + (1 - mask[None]) * np.log(1 - probs)).mean(axis=1)
        inter = (probs * mask[None]).sum(axis=1)
        dice = 1.0 - (2 * inter + 1.0) / (probs.sum(axis=1) + mask.sum() + 1.0)
        cost[:, s] = -lp[:, klass] + bce + dice
    return hungarian(cost)


def seg_loss(predictions: list, gt_patch_labels: list, cfg: SegHeadConfig | None = None) -> ad.Tensor:
    """Bipartite-matching segmentation loss, averaged over views.

    Per view: Hungarian-match queries to gt segments on class NLL + BCE +
    Dice, then charge matched queries those three terms and unmatched
    queries the no-object class NLL. Class NLL is averaged over queries and
    the mask terms over matched segments.
    """
    cfg = cfg or SegHeadConfig()
    per_view = []
    for (class_logits, mask_logits), patch_labels in zip(predictions, gt_patch_labels):
        segments = gt_segments(np.asarray(patch_labels))
        pairs = _matching(class_logits.data, mask_logits.data, segments, cfg.mask_logit_clamp)

        n_q = class_logits.data.shape[0]
        target = np.full(n_q, NO_OBJECT, dtype=np.int64)
        for q, s in pairs:
            target[q] = segments[s][0]
        log_probs = ad.sub(class_logits, ad.logsumexp(class_logits, axis=1, keepdims=True))
        flat = ad.reshape(log_probs, (n_q * 3, 1))
        class_nll = ad.neg(ad.tmean(ad.gather(flat, np.arange(n_q) * 3 + target)))

        view_loss = class_nll
        if pairs:
            clamped = ad.clamp(mask_logits, -cfg.mask_logit_clamp, cfg.mask_logit_clamp)
            probs = ad.sigmoid(clamped)
            rows = np.array([q for q, _ in pairs], dtype=np.int64)
            targets = np.stack([segments[s][1] for _, s in pairs])
            p = ad.gather(probs, rows)  # (M, G)
            y = ad.Tensor(targets)
            bce = ad.neg(ad.tmean(ad.add(
                ad.mul(y, ad.log(p)),
                ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p))),
            ), axis=1, keepdims=True))
            inter = ad.tsum(ad.mul(p, y), axis=1, keepdims=True)
            denom = ad.add(
                ad.add(ad.tsum(p, axis=1, keepdims=True), targets.sum(axis=1)[:, None]), 1.0
            )
            dice = ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), 1.0), denom))
            view_loss = ad.add(view_loss, ad.tmean(ad.add(bce, dice)))
        per_view.append(ad.reshape(view_loss, (1, 1)))
    return ad.tmean(ad.concat(per_view, axis=0))


def model_forward(bundle: MeshBundle, store: ad.ParamStore, cfg: ModelConfig):
    """Shared forward pass: embeddings, per-view head outputs, both losses."""
    n_views = len(bundle.patch_grids)
    t = bundle.patch_grids[0].n_patches
    n_q = cfg.head.queries

    node_emb = skeleton_net_forward(bundle.skeleton, store, cfg.skelnet)
    flat = encode_patches_multi(bundle.patch_grids, store, cfg.encoder)
    patch_embs = [ad.gather(flat, np.arange(v * t, (v + 1) * t)) for v in range(n_views)]
    con = contrastive_loss(node_emb, patch_embs, bundle.correspondence, cfg.contrastive)

    fused_flat = fuse(flat, node_emb, store)  # keys/values shared across views
    cls_flat, mask3 = seg_forward_multi(fused_flat, n_views, store, cfg.head)
    preds = []
    for v in range(n_views):
        cls_v = ad.gather(cls_flat, np.arange(v * n_q, (v + 1) * n_q))
        mask_v = ad.reshape(ad.gather(mask3, [v]), (n_q, t))
        preds.append((cls_v, mask_v))
    seg = seg_loss(preds, bundle.patch_gt, cfg.head)
    return {"node_emb": node_emb, "predictions": preds, "contrastive": con, "segmentation": seg}


def train_step(
    bundle: MeshBundle,
    store: ad.ParamStore,
    cfg: ModelConfig,
    lr: float,
    lambda_con: float | None = None,
) -> dict:
    """One joint optimization step; returns the three loss values."""
    lam = cfg.lambda_con if lambda_con is None else lambda_con
    out = model_forward(bundle, store, cfg)
    total = ad.add(out["segmentation"], ad.mul(out["contrastive"], lam))
    store.zero_grad()
    ad.backward(total)
    ad.adam_step(store, lr)
    return {
        "total": float(total.data),
        "contrastive": float(out["contrastive"].data),
        "segmentation": float(out["segmentation"].data),
    }


def predict_bundle(bundle: MeshBundle, store: ad.ParamStore, cfg: ModelConfig) -> list:
    """Per-view (class_logits, mask_logits) as plain arrays, no tape."""
    n_views = len(bundle.patch_grids)
    node_emb = skeleton_net_forward(bundle.skeleton, store, cfg.skelnet)
    flat = encode_patches_multi(bundle.patch_grids, store, cfg.encoder)
    fused_flat = fuse(flat, node_emb, store)
    cls_flat, mask3 = seg_forward_multi(fused_flat, n_views, store, cfg.head)
    n_q = cfg.head.queries
    cls = cls_flat.data
    return [
        (cls[v * n_q:(v + 1) * n_q].copy(), mask3.data[v].copy()) for v in range(n_views)
    ]
