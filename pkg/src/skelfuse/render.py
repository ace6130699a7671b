"""Deterministic software rasterization of triangle meshes.

Perspective pinhole cameras on an azimuth ring produce three aligned buffers
per view: face id (int32, -1 background), view-space depth (+inf background)
and Lambertian headlight intensity in [0, 1]. Rasterization uses back-face
culling, near-plane clipping, a top-left fill rule at pixel centers, and
perspective-correct depth (screen-linear 1/z), with the nearest face winning
each pixel. Identical inputs yield byte-identical buffers.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DimensionMismatch, ParseError
from .mesh import TriMesh

RING_DISTANCE_FACTOR = 2.5  # camera distance as a multiple of bounding-sphere radius
DEFAULT_FOV_Y = np.pi / 3
VISIBILITY_EPS_REL = 1e-3  # depth slack for node visibility, x scene radius


@dataclass
class Camera:
    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float = DEFAULT_FOV_Y
    resolution: tuple[int, int] = (256, 256)
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if not 0 < self.fov_y < np.pi:
            raise ArgumentError("fov_y must be in (0, pi)")
        if not 0 < self.near < self.far:
            raise ArgumentError("need 0 < near < far")
        fwd = self.look_at - self.eye
        n = np.linalg.norm(fwd)
        if n == 0:
            raise ArgumentError("eye and look_at coincide")
        cross = np.cross(fwd / n, self.up / np.linalg.norm(self.up))
        if np.linalg.norm(cross) < 1e-9:
            raise ArgumentError("up vector is parallel to the view direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right, up, forward unit vectors of the view frame."""
        fwd = self.look_at - self.eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def to_view(self, points: np.ndarray) -> np.ndarray:
        """World points -> (X right, Y up, Z forward depth)."""
        right, up, fwd = self.basis()
        d = np.atleast_2d(points) - self.eye
        return np.stack([d @ right, d @ up, d @ fwd], axis=-1)

    def view_to_pixel(self, view: np.ndarray) -> np.ndarray:
        """View-space points -> continuous pixel coordinates (x right, y down)."""
        w, h = self.resolution
        tan_half = np.tan(self.fov_y / 2.0)
        aspect = w / h
        z = view[..., 2]
        x_ndc = view[..., 0] / (z * tan_half * aspect)
        y_ndc = view[..., 1] / (z * tan_half)
        px = (x_ndc + 1.0) * 0.5 * w
        py = (1.0 - y_ndc) * 0.5 * h
        return np.stack([px, py], axis=-1)


@dataclass
class FrameBuffer:
    face_id: np.ndarray  # (H, W) int32, -1 = background
    depth: np.ndarray  # (H, W) float64, +inf = background
    intensity: np.ndarray  # (H, W) float64 in [0, 1]

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.face_id.shape
        return (w, h)


@dataclass
class ViewSet:
    cameras: list
    buffers: list
    scene_radius: float


def camera_ring(
    mesh: TriMesh,
    n_views: int,
    elevations,
    fov_y: float = DEFAULT_FOV_Y,
    resolution: tuple[int, int] = (256, 256),
) -> list[Camera]:
    """Cameras evenly spaced in azimuth at each elevation, aimed at the mesh
    centroid from 2.5x the bounding-sphere radius. Azimuth 0 sits on +x."""
    if n_views < 1:
        raise ArgumentError("n_views must be >= 1")
    elevations = list(elevations)
    if not elevations:
        raise ArgumentError("need at least one elevation")
    center, radius = mesh.bounding_sphere()
    if radius <= 0:
        radius = 1.0
    dist = RING_DISTANCE_FACTOR * radius
    cams = []
    for elev in elevations:
        for k in range(n_views):
            az = 2.0 * np.pi * k / n_views
            direction = np.array(
                [np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)]
            )
            cams.append(
                Camera(
                    eye=center + dist * direction,
                    look_at=center,
                    up=np.array([0.0, 0.0, 1.0]),
                    fov_y=fov_y,
                    resolution=resolution,
                    near=0.2 * dist,
                    far=2.0 * dist,
                )
            )
    return cams


def _clip_near(poly: list, near: float) -> list:
    """Sutherland-Hodgman clip of a view-space polygon against Z >= near."""
    out = []
    for i, cur in enumerate(poly):
        prev = poly[i - 1]
        cur_in = cur[2] > near
        prev_in = prev[2] > near
        if cur_in != prev_in:
            t = (near - prev[2]) / (cur[2] - prev[2])
            out.append(prev + t * (cur - prev))
        if cur_in:
            out.append(cur)
    return out


def rasterize(mesh: TriMesh, cam: Camera) -> FrameBuffer:
    w, h = cam.resolution
    face_id = np.full((h, w), -1, dtype=np.int32)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    intensity = np.zeros((h, w), dtype=np.float64)
    if mesh.n_faces == 0:
        return FrameBuffer(face_id, depth, intensity)

    view = cam.to_view(mesh.vertices)

    v0w = mesh.vertices[mesh.faces[:, 0]]
    n_world = np.cross(
        mesh.vertices[mesh.faces[:, 1]] - v0w, mesh.vertices[mesh.faces[:, 2]] - v0w
    )
    norms = np.linalg.norm(n_world, axis=1)
    n_world = n_world / np.maximum(norms, 1e-300)[:, None]
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    to_eye = cam.eye - centroids
    to_eye = to_eye / np.maximum(np.linalg.norm(to_eye, axis=1), 1e-300)[:, None]
    shade = np.clip(np.einsum("ij,ij->i", n_world, to_eye), 0.0, 1.0)

    for fi in range(mesh.n_faces):
        corners = view[mesh.faces[fi]]
        if np.all(corners[:, 2] <= cam.near):
            continue
        if np.any(corners[:, 2] <= cam.near):
            poly = _clip_near([c for c in corners], cam.near)
            if len(poly) < 3:
                continue
            tris = [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]
        else:
            tris = [(corners[0], corners[1], corners[2])]

        for tri in tris:
            pix = cam.view_to_pixel(np.asarray(tri))
            _fill_triangle(pix, np.asarray(tri)[:, 2], fi, shade[fi], face_id, depth, intensity)
    return FrameBuffer(face_id, depth, intensity)


def _fill_triangle(pix, z, fi, shade, face_id, depth, intensity):
    """Top-left-rule scan fill of one projected triangle (backface-culled)."""
    h, w = face_id.shape
    (x0, y0), (x1, y1), (x2, y2) = pix
    area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if area2 >= 0:  # back-facing or degenerate in pixel space
        return
    xs = pix[:, 0]
    ys = pix[:, 1]
    cx0 = max(0, int(np.ceil(xs.min() - 0.5)))
    cx1 = min(w - 1, int(np.floor(xs.max() - 0.5)))
    cy0 = max(0, int(np.ceil(ys.min() - 0.5)))
    cy1 = min(h - 1, int(np.floor(ys.max() - 0.5)))
    if cx0 > cx1 or cy0 > cy1:
        return

    px = np.arange(cx0, cx1 + 1) + 0.5
    py = np.arange(cy0, cy1 + 1) + 0.5
    gx, gy = np.meshgrid(px, py)

    inside = np.ones(gx.shape, dtype=bool)
    edge_vals = []
    verts = ((x0, y0, x1, y1), (x1, y1, x2, y2), (x2, y2, x0, y0))
    for xa, ya, xb, yb in verts:
        dx, dy = xb - xa, yb - ya
        # Interior of a kept (screen-clockwise, y-down) triangle is e > 0;
        # boundary pixels belong to top edges (dy == 0, dx < 0) and left
        # edges (dy > 0) only.
        e = (gx - xa) * dy - (gy - ya) * dx
        top_left = (dy > 0) or (dy == 0 and dx < 0)
        inside &= (e > 0) | ((e == 0) if top_left else False)
        edge_vals.append(e)
    if not inside.any():
        return

    s = -area2  # = e01 + e12 + e20 everywhere
    lam0 = edge_vals[1] / s  # opposite vertex 0
    lam1 = edge_vals[2] / s
    lam2 = edge_vals[0] / s
    inv_z = lam0 / z[0] + lam1 / z[1] + lam2 / z[2]
    pz = 1.0 / inv_z

    rows = slice(cy0, cy1 + 1)
    cols = slice(cx0, cx1 + 1)
    win = inside & (pz < depth[rows, cols])
    depth[rows, cols][win] = pz[win]
    face_id[rows, cols][win] = fi
    intensity[rows, cols][win] = shade


def render_views(mesh: TriMesh, cameras: list, workers: int | None = None) -> ViewSet:
    """Rasterize every camera; views are independent so they may run on a
    thread pool (SKELFUSE_THREADS or `workers`), each writing only its own
    buffer."""
    if workers is None:
        workers = int(os.environ.get("SKELFUSE_THREADS", "0")) or (os.cpu_count() or 1)
    _, radius = mesh.bounding_sphere()
    if workers > 1 and len(cameras) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            buffers = list(pool.map(lambda c: rasterize(mesh, c), cameras))
    else:
        buffers = [rasterize(mesh, c) for c in cameras]
    return ViewSet(cameras=list(cameras), buffers=buffers, scene_radius=radius)


def project_point(cam: Camera, p) -> tuple[tuple[float, float], float] | None:
    """Continuous pixel coordinates and view depth, or None when the point is
    at or behind the near plane."""
    view = cam.to_view(np.asarray(p, dtype=np.float64))[0]
    if view[2] <= cam.near:
        return None
    px, py = cam.view_to_pixel(view[None, :])[0]
    return (float(px), float(py)), float(view[2])


def node_visible(cam: Camera, fb: FrameBuffer, p, radius: float) -> bool:
    """True iff p projects in-frame and is no deeper than the surface there,
    with slack for the node radius plus a depth epsilon (skeleton nodes sit
    inside the surface, never on it).

    The epsilon combines a scene-scaled term with the local pixel footprint:
    buffer depth is sampled at the pixel center, so an oblique surface can
    legitimately differ from the node's exact depth by a sub-pixel slope.
    """
    proj = project_point(cam, p)
    if proj is None:
        return False
    (px, py), z = proj
    w, h = cam.resolution
    ix, iy = int(np.floor(px)), int(np.floor(py))
    if not (0 <= ix < w and 0 <= iy < h):
        return False
    scene_radius = np.linalg.norm(cam.eye - cam.look_at) / RING_DISTANCE_FACTOR
    pixel_world = 2.0 * z * np.tan(cam.fov_y / 2.0) / h
    eps = max(VISIBILITY_EPS_REL * scene_radius, 0.75 * pixel_world)
    return z <= fb.depth[iy, ix] + radius + eps


# ---------------------------------------------------------------------------
# On-disk format: PNG intensity + flat binary sidecar + JSON manifest.

def save_view(fb: FrameBuffer, cam: Camera, base_path) -> None:
    """Writes {base}.png (intensity), {base}.bin (face_id int32 then depth
    float32, row-major little-endian) and {base}.json."""
    from PIL import Image

    base = Path(base_path)
    img = np.round(np.clip(fb.intensity, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(base.with_suffix(".png"))

    depth32 = fb.depth.astype("<f4")
    base.with_suffix(".bin").write_bytes(
        fb.face_id.astype("<i4").tobytes() + depth32.tobytes()
    )
    h, w = fb.face_id.shape
    manifest = {
        "width": w,
        "height": h,
        "endianness": "little",
        "layout": ["face_id:int32", "depth:float32"],
        "camera": {
            "eye": fb_list(cam.eye),
            "look_at": fb_list(cam.look_at),
            "up": fb_list(cam.up),
            "fov_y": cam.fov_y,
            "resolution": [w, h],
            "near": cam.near,
            "far": cam.far,
        },
        "intensity_crc32": zlib.crc32(img.tobytes()),
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def fb_list(a) -> list[float]:
    return [float(x) for x in np.asarray(a).ravel()]


def load_view(base_path) -> tuple[FrameBuffer, Camera]:
    from PIL import Image

    base = Path(base_path)
    try:
        manifest = json.loads(base.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"bad view manifest at {base}: {e}") from e
    w, h = manifest["width"], manifest["height"]
    blob = base.with_suffix(".bin").read_bytes()
    expected = h * w * 8
    if len(blob) != expected:
        raise DimensionMismatch(f"sidecar holds {len(blob)} bytes, expected {expected}")
    face_id = np.frombuffer(blob[: h * w * 4], dtype="<i4").reshape(h, w).copy()
    depth = np.frombuffer(blob[h * w * 4 :], dtype="<f4").reshape(h, w).astype(np.float64)
    img = np.asarray(Image.open(base.with_suffix(".png")), dtype=np.float64) / 255.0
    c = manifest["camera"]
    cam = Camera(
        eye=np.array(c["eye"]),
        look_at=np.array(c["look_at"]),
        up=np.array(c["up"]),
        fov_y=c["fov_y"],
        resolution=(w, h),
        near=c["near"],
        far=c["far"],
    )
    return FrameBuffer(face_id=face_id, depth=depth, intensity=img), cam
