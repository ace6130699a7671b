import numpy as np
import pytest

from skelfuse.correspond import (
    CorrespondenceMap,
    build_correspondence,
    coverage_stats,
    load_correspondence,
    patch_majority_labels,
    patchify,
    pixel_labels,
    reassemble,
    save_correspondence,
)
from skelfuse.errors import ArgumentError
from skelfuse.mesh import normalize_unit_sphere
from skelfuse.render import FrameBuffer, ViewSet, camera_ring, render_views
from skelfuse.skeleton import Skeleton, skeletonize
from skelfuse.synthetic import synth_tooth_row


def fake_fb(size, intensity=None):
    if intensity is None:
        intensity = np.random.default_rng(0).uniform(size=(size, size))
    return FrameBuffer(
        face_id=np.full((size, size), -1, dtype=np.int32),
        depth=np.full((size, size), np.inf),
        intensity=intensity,
    )


@pytest.fixture(scope="module")
def row_setup():
    mesh, _, _ = normalize_unit_sphere(synth_tooth_row(1, 8, 0.0))
    skel = skeletonize(mesh)
    cams = camera_ring(mesh, 12, [-np.pi / 6, np.pi / 6], resolution=(128, 128))
    views = render_views(mesh, cams, workers=1)
    return mesh, skel, views


def test_patchify_grid_arithmetic():
    grid = patchify(fake_fb(256), 16)
    assert grid.grid == 16
    assert grid.patches.shape == (256, 256)


def test_patchify_reassembles_losslessly():
    fb = fake_fb(64)
    grid = patchify(fb, 16)
    assert np.array_equal(reassemble(grid), fb.intensity)


def test_patchify_rejects_indivisible():
    with pytest.raises(ArgumentError):
        patchify(fake_fb(250), 16)


def test_khop_zero_covers_nothing_for_occluded_node(row_setup):
    mesh, skel, views = row_setup
    # a node buried far outside every frustum cannot be visible
    buried = Skeleton(
        positions=np.vstack([skel.positions, [[0.0, 0.0, 99.0]]]),
        radii=np.append(skel.radii, 0.0),
        edges=skel.edges,
        vertex_owner=skel.vertex_owner,
    )
    cm = build_correspondence(buried, views, 16, 0)
    assert cm.node_coverage()[-1] == 0


def test_three_node_path_hand_trace():
    # skeleton a-b-c; only b visible in one patch q; k_hop=1 adds both ends.
    positions = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
    skel = Skeleton(
        positions=positions,
        radii=np.zeros(3),
        edges=np.array([[0, 1], [1, 2]]),
        vertex_owner=np.zeros(1, dtype=np.int64),
    )
    from skelfuse.render import Camera

    cam = Camera(
        eye=[5.0, 0.0, 1.0], look_at=[0.0, 0.0, 1.0], up=[0.0, 0.0, 1.0],
        resolution=(32, 32), near=0.5, far=50.0,
    )
    # occluding wall in front of everything except the pixel showing node b
    depth = np.full((32, 32), 0.6)
    depth[16, 16] = 5.0  # surface exactly at node b's depth at that pixel
    fb = FrameBuffer(
        face_id=np.zeros((32, 32), dtype=np.int32),
        depth=depth,
        intensity=np.zeros((32, 32)),
    )
    views = ViewSet(cameras=[cam], buffers=[fb], scene_radius=2.0)
    cm = build_correspondence(skel, views, 16, 1)
    q = (16 // 16) * 2 + (16 // 16)  # patch of pixel (16,16) in a 2x2 grid
    assert cm.hops[(1, 0, q)] == 0
    assert cm.hops[(0, 0, q)] == 1
    assert cm.hops[(2, 0, q)] == 1
    assert len(cm.hops) == 3


def test_khop_monotonicity(row_setup):
    mesh, skel, views = row_setup
    maps = [build_correspondence(skel, views, 16, k) for k in (0, 1, 2)]
    t0, t1, t2 = (m.triples() for m in maps)
    assert t0 < t1  # strict: some neighbor of a visible node was uncovered
    assert t1 <= t2
    c0, c1, c2 = (m.node_coverage() for m in maps)
    assert (c1 >= c0).all() and (c2 >= c1).all()
    # hop-h entries trace back to a hop-0 entry within h steps (BFS check)
    adj = skel.adjacency()
    cm = maps[2]
    for (n, v, p), h in cm.hops.items():
        if h == 0:
            continue
        frontier, seen = {n}, {n}
        found = False
        for _ in range(h):
            frontier = {m for x in frontier for m in adj[x]} - seen
            seen |= frontier
            if any(cm.hops.get((m, v, p)) == 0 for m in frontier):
                found = True
                break
        assert found, f"hop-{h} positive ({n},{v},{p}) has no hop-0 ancestor"


def test_more_views_is_monotone(row_setup):
    mesh, skel, views = row_setup
    half = ViewSet(cameras=views.cameras[:6], buffers=views.buffers[:6],
                   scene_radius=views.scene_radius)
    small = build_correspondence(skel, half, 16, 1)
    big = build_correspondence(skel, views, 16, 1)
    assert small.triples() <= big.triples()


def test_determinism(row_setup):
    mesh, skel, views = row_setup
    a = build_correspondence(skel, views, 16, 1)
    b = build_correspondence(skel, views, 16, 1)
    assert a.hops == b.hops


def test_coverage_stats_empty_map():
    skel = Skeleton(np.zeros((4, 3)), np.zeros(4), np.array([[0, 1]]), np.zeros(2, dtype=int))
    stats = coverage_stats(CorrespondenceMap(n_nodes=4), skel)
    assert stats == {
        "frac_nodes_covered": 0.0,
        "mean_positives_per_node": 0.0,
        "frac_patches_with_node": 0.0,
    }


def test_coverage_stats_full_coverage():
    skel = Skeleton(np.zeros((3, 3)), np.zeros(3), np.zeros((0, 2), dtype=int), np.zeros(1, dtype=int))
    cm = CorrespondenceMap(n_nodes=3, n_views=1, patches_per_view=4)
    cm.hops = {(0, 0, 0): 0, (1, 0, 1): 0, (2, 0, 1): 1}
    stats = coverage_stats(cm, skel)
    assert stats["frac_nodes_covered"] == 1.0
    assert stats["mean_positives_per_node"] == 1.0
    assert stats["frac_patches_with_node"] == 0.5


def test_coverage_monotone_in_khop(row_setup):
    mesh, skel, views = row_setup
    s0 = coverage_stats(build_correspondence(skel, views, 16, 0), skel)
    s1 = coverage_stats(build_correspondence(skel, views, 16, 1), skel)
    assert s1["frac_nodes_covered"] >= s0["frac_nodes_covered"]


def test_save_load_round_trip(tmp_path, row_setup):
    mesh, skel, views = row_setup
    cm = build_correspondence(skel, views, 16, 1)
    save_correspondence(cm, tmp_path / "c.jsonl")
    back = load_correspondence(tmp_path / "c.jsonl")
    assert back.hops == cm.hops
    assert (back.n_nodes, back.n_views, back.patches_per_view) == (
        cm.n_nodes, cm.n_views, cm.patches_per_view,
    )


def test_pixel_and_patch_labels(row_setup):
    mesh, skel, views = row_setup
    fb = views.buffers[0]
    labels = pixel_labels(fb, mesh.face_labels)
    assert labels.shape == fb.face_id.shape
    assert (labels[fb.face_id < 0] == 0).all()
    covered = fb.face_id >= 0
    assert np.array_equal(labels[covered], mesh.face_labels[fb.face_id[covered]])

    patch_gt = patch_majority_labels(fb, mesh.face_labels, 16)
    assert patch_gt.shape == (64,)
    # each patch label is the plain majority of its pixel labels
    g = 8
    tiles = labels.reshape(g, 16, g, 16).transpose(0, 2, 1, 3).reshape(64, 256)
    for i in range(64):
        counts = np.bincount(tiles[i])
        assert patch_gt[i] == counts.argmax()
