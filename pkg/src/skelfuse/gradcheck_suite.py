"""Registry of finite-difference gradient checks for every differentiable op
and every composed model. All checks run on toy sizes in 64-bit; each entry
returns the max relative error and must stay below TOLERANCE."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .correspond import CorrespondenceMap, PatchGrid
from .fusion import (
    ContrastiveConfig,
    PatchEncoderConfig,
    SegHeadConfig,
    contrastive_loss,
    encode_patches,
    fuse,
    init_fusion,
    init_patch_encoder,
    init_seg_head,
    seg_forward,
    seg_loss,
)
from .skeleton import Skeleton
from .skelnet import SkeletonNetConfig, init_skeleton_net, skeleton_net_forward

TOLERANCE = 1e-4


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng(1000 + tag)


def _op_check(build):
    def run():
        rng = _rng(0)
        x = ad.Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        c = ad.Tensor(rng.standard_normal((5, 6)))
        return ad.grad_check(lambda x: build(x, c), [x])

    return run


def _check_skeleton_net():
    rng = _rng(1)
    positions = rng.standard_normal((6, 3))
    skel = Skeleton(
        positions=positions,
        radii=np.abs(rng.standard_normal(6)) * 0.1,
        edges=np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [1, 4]]),
        vertex_owner=np.arange(6),
    )
    cfg = SkeletonNetConfig(levels=3, dims=(4, 4, 4))
    store = ad.ParamStore()
    init_skeleton_net(store, cfg, rng)
    target = ad.Tensor(rng.standard_normal((6, 4)))
    params = [store[n] for n in store.names()]
    return ad.grad_check(
        lambda *p: ad.tmean(ad.mul(skeleton_net_forward(skel, store, cfg), target)), params
    )


def _check_patch_encoder():
    rng = _rng(2)
    cfg = PatchEncoderConfig(patch_size=2, embed_dim=8, blocks=1, heads=2)
    store = ad.ParamStore()
    init_patch_encoder(store, cfg, rng)
    grid = PatchGrid(view_id=0, patch_size=2, grid=2, patches=rng.uniform(size=(4, 4)))
    target = ad.Tensor(rng.standard_normal((4, 8)))
    params = [store[n] for n in store.names()]
    return ad.grad_check(
        lambda *p: ad.tmean(ad.mul(encode_patches(grid, store, cfg), target)), params
    )


def _check_fusion():
    rng = _rng(3)
    store = ad.ParamStore()
    init_fusion(store, 6, rng)
    patches = ad.Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    nodes = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    target = ad.Tensor(rng.standard_normal((3, 6)))
    inputs = [patches, nodes] + [store[n] for n in store.names()]
    return ad.grad_check(
        lambda *p: ad.tmean(ad.mul(fuse(patches, nodes, store), target)), inputs
    )


def _check_seg_head():
    rng = _rng(4)
    cfg = SegHeadConfig(queries=3, blocks=1, heads=2)
    store = ad.ParamStore()
    init_seg_head(store, cfg, 6, rng)
    fused = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    t1 = ad.Tensor(rng.standard_normal((3, 3)))
    t2 = ad.Tensor(rng.standard_normal((3, 4)))
    inputs = [fused] + [store[n] for n in store.names()]

    def f(*p):
        cls, mask = seg_forward(fused, store, cfg)
        return ad.add(ad.tmean(ad.mul(cls, t1)), ad.tmean(ad.mul(mask, t2)))

    return ad.grad_check(f, inputs)


def _check_contrastive_loss():
    rng = _rng(5)
    nodes = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    patches = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    cm = CorrespondenceMap(n_nodes=4, n_views=1, patches_per_view=4)
    cm.hops = {(0, 0, 1): 0, (2, 0, 3): 0, (1, 0, 1): 1}
    return ad.grad_check(
        lambda n, p: contrastive_loss(n, [p], cm, ContrastiveConfig(temperature=0.2)),
        [nodes, patches],
    )


def _check_seg_loss():
    rng = _rng(6)
    cfg = SegHeadConfig(queries=3, blocks=1, heads=2)
    cls = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    mask = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    labels = np.array([1, 1, 0, 2])
    return ad.grad_check(lambda c, m: seg_loss([(c, m)], [labels], cfg), [cls, mask])


CHECKS = [
    ("add", _op_check(lambda x, c: ad.tsum(ad.mul(ad.add(x, c), c)))),
    ("sub", _op_check(lambda x, c: ad.tsum(ad.mul(ad.sub(x, c), c)))),
    ("neg", _op_check(lambda x, c: ad.tsum(ad.mul(ad.neg(x), c)))),
    ("mul", _op_check(lambda x, c: ad.tsum(ad.mul(ad.mul(x, c), c)))),
    ("div", _op_check(lambda x, c: ad.tsum(ad.div(x, ad.add(ad.mul(c, c), 1.0))))),
    ("matmul", _op_check(lambda x, c: ad.tsum(ad.matmul(x, ad.transpose(c))))),
    ("transpose", _op_check(lambda x, c: ad.tsum(ad.mul(ad.transpose(x), ad.transpose(c))))),
    ("reshape", _op_check(lambda x, c: ad.tsum(ad.mul(ad.reshape(x, (2, 15)), ad.reshape(c, (2, 15)))))),
    ("relu", _op_check(lambda x, c: ad.tsum(ad.mul(ad.relu(x), c)))),
    ("sigmoid", _op_check(lambda x, c: ad.tsum(ad.mul(ad.sigmoid(x), c)))),
    ("exp", _op_check(lambda x, c: ad.tsum(ad.mul(ad.exp(x), c)))),
    ("log", _op_check(lambda x, c: ad.tsum(ad.mul(ad.log(ad.add(ad.mul(x, x), 0.5)), c)))),
    ("sqrt", _op_check(lambda x, c: ad.tsum(ad.mul(ad.sqrt(ad.add(ad.mul(x, x), 0.5)), c)))),
    ("clamp", _op_check(lambda x, c: ad.tsum(ad.mul(ad.clamp(ad.mul(x, 2.0), -1.0, 1.0), c)))),
    ("softmax", _op_check(lambda x, c: ad.tsum(ad.mul(ad.softmax(x, axis=1), c)))),
    ("logsumexp", _op_check(lambda x, c: ad.tsum(ad.mul(ad.logsumexp(x, axis=1, keepdims=True), ad.cols(c, 0, 1))))),
    ("sum", _op_check(lambda x, c: ad.tsum(ad.mul(ad.tsum(x, axis=1, keepdims=True), ad.cols(c, 0, 1))))),
    ("mean", _op_check(lambda x, c: ad.tsum(ad.mul(ad.tmean(x, axis=0, keepdims=True), ad.tmean(c, axis=0, keepdims=True))))),
    ("concat", _op_check(lambda x, c: ad.tsum(ad.mul(ad.concat([x, x], axis=1), ad.concat([c, c], axis=1))))),
    ("gather", _op_check(lambda x, c: ad.tsum(ad.mul(ad.gather(x, [0, 2, 2, 1]), ad.gather(c, [0, 2, 2, 1]))))),
    ("scatter_add", _op_check(lambda x, c: ad.tsum(ad.mul(ad.scatter_add(x, [0, 3, 1, 3, 0], 4), 1.5)))),
    ("cols", _op_check(lambda x, c: ad.tsum(ad.mul(ad.cols(x, 1, 4), ad.cols(c, 1, 4))))),
    ("skeleton_net", _check_skeleton_net),
    ("patch_encoder", _check_patch_encoder),
    ("fusion", _check_fusion),
    ("seg_head", _check_seg_head),
    ("contrastive_loss", _check_contrastive_loss),
    ("seg_loss", _check_seg_loss),
]


def run_all(checks=None) -> list[tuple[str, float]]:
    """Run every registered check; raises if the registry is empty (nothing
    verified counts as failure, not success)."""
    checks = CHECKS if checks is None else checks
    if not checks:
        raise RuntimeError("gradient-check registry is empty: nothing was verified")
    return [(name, float(fn())) for name, fn in checks]
