import numpy as np
import pytest
from oracle_raycast import raycast_face_ids

from skelfuse.errors import ArgumentError
from skelfuse.mesh import TriMesh
from skelfuse.render import (
    Camera,
    camera_ring,
    load_view,
    node_visible,
    project_point,
    rasterize,
    render_views,
    save_view,
)
from skelfuse.synthetic import synth_tooth_row, tetrahedron, uv_sphere


def front_triangle(z=0.0, scale=1.0):
    # CCW as seen from a camera on +x looking toward -x.
    verts = np.array(
        [[z, -scale, -scale], [z, scale, -scale], [z, 0.0, scale]], dtype=float
    )
    return TriMesh(verts, np.array([[0, 1, 2]]))


def cam_on_x(res=(64, 64), dist=4.0):
    return Camera(
        eye=[dist, 0.0, 0.0],
        look_at=[0.0, 0.0, 0.0],
        up=[0.0, 0.0, 1.0],
        resolution=res,
        near=0.1 * dist,
        far=10.0 * dist,
    )


def random_soup(rng, n_faces, spread=1.0):
    centers = rng.uniform(-spread, spread, size=(n_faces, 1, 3))
    tris = centers + rng.uniform(-0.6, 0.6, size=(n_faces, 3, 3))
    verts = tris.reshape(-1, 3)
    faces = np.arange(3 * n_faces).reshape(-1, 3)
    return TriMesh(verts, faces)


def test_camera_ring_anchor_on_plus_x():
    m = uv_sphere(1.0)
    (cam,) = camera_ring(m, 1, [0.0])
    center, radius = m.bounding_sphere()
    assert np.allclose(cam.eye, center + [2.5 * radius, 0.0, 0.0], atol=1e-12)
    assert np.allclose(cam.look_at, center)


def test_camera_ring_quarter_azimuths():
    m = uv_sphere(1.0)
    cams = camera_ring(m, 4, [0.0])
    center, _ = m.bounding_sphere()
    az = [np.arctan2(c.eye[1] - center[1], c.eye[0] - center[0]) for c in cams]
    diffs = np.diff(az) % (2 * np.pi)
    assert np.abs(diffs - np.pi / 2).max() < 1e-9


def test_camera_ring_two_elevations():
    m = synth_tooth_row(1, 4, 0.0)
    cams = camera_ring(m, 8, [-np.pi / 6, np.pi / 6])
    assert len(cams) == 16
    center, radius = m.bounding_sphere()
    dists = [np.linalg.norm(c.eye - center) for c in cams]
    assert np.abs(np.array(dists) - 2.5 * radius).max() < 1e-9


def test_camera_ring_rejects_zero_views():
    with pytest.raises(ArgumentError):
        camera_ring(uv_sphere(), 0, [0.0])


def test_single_triangle_center_pixel():
    fb = rasterize(front_triangle(), cam_on_x())
    assert fb.face_id[32, 32] == 0
    assert np.isfinite(fb.depth[32, 32])
    assert 0.0 <= fb.intensity.max() <= 1.0


def test_backfacing_triangle_culled():
    m = front_triangle()
    m.faces = m.faces[:, ::-1].copy()  # flip winding
    fb = rasterize(m, cam_on_x())
    assert (fb.face_id == -1).all()
    assert np.isinf(fb.depth).all()


def test_empty_mesh_is_background():
    fb = rasterize(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), cam_on_x())
    assert (fb.face_id == -1).all()


def test_two_coaxial_triangles_nearer_wins():
    near_tri = front_triangle(z=1.0)
    far_tri = front_triangle(z=-1.0)
    mesh = TriMesh(
        np.vstack([far_tri.vertices, near_tri.vertices]),
        np.vstack([far_tri.faces, near_tri.faces + 3]),
    )
    cam = cam_on_x()
    fb = rasterize(mesh, cam)
    covered = fb.face_id >= 0
    assert covered.any()
    # face 1 (nearer) must win every pixel both cover; oracle agrees everywhere
    oid, odepth, amb = raycast_face_ids(mesh, cam)
    assert np.array_equal(fb.face_id[~amb], oid[~amb])
    inner = fb.face_id[fb.face_id >= 0]
    assert (inner == 1).all()


def test_background_invariant():
    fb = rasterize(synth_tooth_row(1, 4, 0.0), camera_ring(synth_tooth_row(1, 4, 0.0), 1, [0.3], resolution=(64, 64))[0])
    assert ((fb.face_id == -1) == np.isinf(fb.depth)).all()
    assert fb.intensity.min() >= 0.0 and fb.intensity.max() <= 1.0


def test_fill_rule_no_double_cover_no_gaps():
    # A square spanning pixel centers exactly, split along its diagonal: the
    # two triangles must tile it with every covered pixel drawn exactly once.
    cam = Camera(
        eye=[0.0, 0.0, 5.0], look_at=[0.0, 0.0, 0.0], up=[0.0, 1.0, 0.0],
        resolution=(8, 8), near=0.5, far=50.0,
    )
    w, h = cam.resolution
    tan_half = np.tan(cam.fov_y / 2)

    def world_at_pixel(px, py, z_plane=0.0):
        zdist = cam.eye[2] - z_plane
        x = (2 * px / w - 1) * zdist * tan_half * (w / h)
        y = (1 - 2 * py / h) * zdist * tan_half
        # camera looks down -z: right = -x? derive via projection check below
        return np.array([x, y, z_plane])

    # corners at pixel coords (2.5, 2.5) .. (6.5, 6.5)
    c = [world_at_pixel(2.5, 2.5), world_at_pixel(6.5, 2.5),
         world_at_pixel(6.5, 6.5), world_at_pixel(2.5, 6.5)]
    # fix orientation via project_point so the corners land where intended
    pix = [project_point(cam, p)[0] for p in c]
    if not np.allclose(pix[0], (2.5, 2.5), atol=1e-9):
        # mirror x if the handedness guess was wrong
        c = [np.array([-p[0], p[1], p[2]]) for p in c]
        pix = [project_point(cam, p)[0] for p in c]
    assert np.allclose(pix[0], (2.5, 2.5), atol=1e-9)
    assert np.allclose(pix[2], (6.5, 6.5), atol=1e-9)

    counts = np.zeros((8, 8), dtype=int)
    for tri_faces in ([[0, 2, 1]], [[0, 3, 2]]):  # both front-facing
        mesh = TriMesh(np.array(c), np.array(tri_faces))
        fb = rasterize(mesh, cam)
        counts += (fb.face_id >= 0).astype(int)
    assert counts.max() <= 1, "double-covered pixels on the shared diagonal"
    # Centers on the left/top boundary are owned, right/bottom are not, so the
    # union is exactly the 4x4 block of pixels (2..5, 2..5).
    expected = np.zeros((8, 8), dtype=int)
    expected[2:6, 2:6] = 1
    assert np.array_equal(counts, expected)


def test_rasterizer_matches_raycaster_on_random_soups():
    rng = np.random.default_rng(7)
    for trial in range(3):
        mesh = random_soup(rng, 40)
        for cam in camera_ring(mesh, 2, [0.4], resolution=(48, 48)):
            fb = rasterize(mesh, cam)
            oid, _, amb = raycast_face_ids(mesh, cam)
            ok = (fb.face_id == oid) | amb
            assert ok.all(), f"trial {trial}: {np.count_nonzero(~ok)} mismatched pixels"


def test_rasterizer_matches_raycaster_on_closed_meshes():
    for mesh in (uv_sphere(1.0, 8, 10), tetrahedron(), synth_tooth_row(1, 3, 0.0, n_u=16, n_v=6)):
        cam = camera_ring(mesh, 1, [0.25], resolution=(64, 64))[0]
        fb = rasterize(mesh, cam)
        oid, _, amb = raycast_face_ids(mesh, cam)
        ok = (fb.face_id == oid) | amb
        assert ok.all(), f"{np.count_nonzero(~ok)} mismatched pixels"


def test_project_point_center_and_behind():
    m = synth_tooth_row(2, 4, 0.0)
    cam = camera_ring(m, 1, [0.0])[0]
    (px, py), depth = project_point(cam, m.centroid)
    w, h = cam.resolution
    assert abs(px - w / 2) < 0.5 and abs(py - h / 2) < 0.5
    assert depth > 0
    assert project_point(cam, cam.eye) is None


def test_project_point_hand_pinhole():
    # Camera at origin shifted along +x, 90 deg fov, square image: a point at
    # view coords (X, Y, Z) lands at ((X/Z + 1)/2 * W, (1 - Y/Z)/2 * H).
    cam = Camera(
        eye=[2.0, 0.0, 0.0], look_at=[0.0, 0.0, 0.0], up=[0.0, 0.0, 1.0],
        fov_y=np.pi / 2, resolution=(100, 100), near=0.1, far=100.0,
    )
    # right = -y? basis: fwd=(-1,0,0), right=cross(fwd,up)=(0,1,0), up=(0,0,1)
    p = np.array([0.0, 0.5, 0.25])  # view: X=0.5, Y=0.25, Z=2.0
    (px, py), depth = project_point(cam, p)
    assert abs(depth - 2.0) < 1e-12
    assert abs(px - (0.5 / 2.0 + 1) / 2 * 100) < 1e-9
    assert abs(py - (1 - 0.25 / 2.0) / 2 * 100) < 1e-9


def test_node_visible_cases():
    mesh = synth_tooth_row(1, 4, 0.0)
    cam = camera_ring(mesh, 1, [0.0], resolution=(96, 96))[0]
    fb = rasterize(mesh, cam)
    # pick a reasonably camera-facing face that is itself visible at the
    # pixel its centroid lands in (extreme obliqueness would make the
    # pixel-center depth sample meaningless for an exact surface point)
    centroid = None
    for face in np.unique(fb.face_id[fb.face_id >= 0]):
        c = mesh.vertices[mesh.faces[face]].mean(axis=0)
        (px, py), _ = project_point(cam, c)
        if fb.face_id[int(py), int(px)] == face and fb.intensity[int(py), int(px)] > 0.8:
            centroid = c
            break
    assert centroid is not None
    assert node_visible(cam, fb, centroid, radius=0.0)

    # a point well behind the visible surface along the view ray
    behind = centroid + 2.0 * (centroid - cam.eye) / np.linalg.norm(centroid - cam.eye)
    assert not node_visible(cam, fb, behind, radius=0.0)

    # out of frame
    far_up = mesh.centroid + np.array([0.0, 0.0, 50.0])
    assert not node_visible(cam, fb, far_up, radius=0.0)


def test_render_views_deterministic_across_workers():
    mesh = synth_tooth_row(3, 4, 0.01)
    cams = camera_ring(mesh, 3, [0.3], resolution=(48, 48))
    a = render_views(mesh, cams, workers=1)
    b = render_views(mesh, cams, workers=4)
    for fa, fc in zip(a.buffers, b.buffers):
        assert fa.face_id.tobytes() == fc.face_id.tobytes()
        assert fa.depth.tobytes() == fc.depth.tobytes()
        assert fa.intensity.tobytes() == fc.intensity.tobytes()


def test_view_save_load_round_trip(tmp_path):
    mesh = synth_tooth_row(1, 4, 0.0)
    cam = camera_ring(mesh, 1, [0.2], resolution=(64, 64))[0]
    fb = rasterize(mesh, cam)
    save_view(fb, cam, tmp_path / "v0")
    back, cam2 = load_view(tmp_path / "v0")
    assert np.array_equal(back.face_id, fb.face_id)
    assert np.abs(back.depth[np.isfinite(fb.depth)] - fb.depth[np.isfinite(fb.depth)]).max() < 1e-3
    assert np.isinf(back.depth[np.isinf(fb.depth)]).all()
    # intensity is 8-bit quantized on disk
    assert np.abs(back.intensity - fb.intensity).max() <= 0.5 / 255 + 1e-12
    assert np.allclose(cam2.eye, cam.eye)
