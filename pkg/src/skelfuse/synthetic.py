"""Synthetic labeled tooth-row meshes and simple test primitives.

The tooth row is a closed tube swept along a circular dental arch with
dome-shaped bumps ("teeth") displacing the top sector. Bump supports are
disjoint by construction, so every face has an unambiguous instance label:
0 for the gum tube, 1..n_teeth for the bumps. The generator is a pure
function of (seed, n_teeth, noise).
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ArgumentError
from .mesh import TriMesh

ARCH_RADIUS = 1.0
ARCH_THETA = (np.deg2rad(25.0), np.deg2rad(155.0))
TUBE_RADIUS = 0.26
TOP_ALPHA = np.pi / 2  # bump sector center: +z
LABEL_BUMP_THRESHOLD = 0.15  # fraction of peak displacement that counts as tooth


def stage_rng(seed: int, label: str) -> np.random.Generator:
    """Deterministic per-stage generator: one root seed, split by fixed labels."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])


def synth_tooth_row(
    seed: int,
    n_teeth: int,
    noise: float,
    n_u: int = 48,
    n_v: int = 12,
) -> TriMesh:
    """Generate a labeled tooth-row mesh.

    Parameters
    ----------
    seed : int
        Drives per-tooth size/position jitter and the vertex noise.
    n_teeth : int
        Number of tooth bumps, in [2, 16].
    noise : float
        Std-dev of vertex displacement along the tube normal, in model units.

    Returns
    -------
    TriMesh with face_labels set (0 = gum, 1..n_teeth = tooth instances).
    """
    if not 2 <= n_teeth <= 16:
        raise ArgumentError(f"n_teeth must be in [2, 16], got {n_teeth}")
    if noise < 0:
        raise ArgumentError("noise must be nonnegative")
    rng = stage_rng(seed, "tooth-row")

    theta_lo, theta_hi = ARCH_THETA
    span = theta_hi - theta_lo
    gap = span / n_teeth
    centers = theta_lo + (np.arange(n_teeth) + 0.5) * gap
    centers = centers + rng.uniform(-0.05, 0.05, n_teeth) * gap
    half_widths = 0.40 * gap * rng.uniform(0.92, 1.08, n_teeth)
    heights = TUBE_RADIUS * (1.0 + 0.4 * rng.uniform(0.0, 1.0, n_teeth))
    alpha_half = np.deg2rad(95.0) * rng.uniform(0.9, 1.05, n_teeth)

    thetas = np.linspace(theta_lo, theta_hi, n_u)
    alphas = 2 * np.pi * np.arange(n_v) / n_v

    def bump_weight(theta, alpha):
        """Per-tooth displacement weights at surface parameters (theta, alpha)."""
        d_alpha = np.arctan2(np.sin(alpha - TOP_ALPHA), np.cos(alpha - TOP_ALPHA))
        w = np.zeros(n_teeth)
        for t in range(n_teeth):
            dt = theta - centers[t]
            if abs(dt) < half_widths[t] and abs(d_alpha) < alpha_half[t]:
                w[t] = (
                    np.cos(0.5 * np.pi * dt / half_widths[t]) ** 2
                    * np.cos(0.5 * np.pi * d_alpha / alpha_half[t]) ** 2
                )
        return w

    # Tube vertices: ring u, cross-section position v.
    verts = np.zeros((n_u * n_v + 2, 3))
    normals = np.zeros_like(verts)
    for u, th in enumerate(thetas):
        radial = np.array([np.cos(th), np.sin(th), 0.0])
        center = ARCH_RADIUS * radial
        for v, al in enumerate(alphas):
            normal = np.cos(al) * radial + np.sin(al) * np.array([0.0, 0.0, 1.0])
            disp = float(np.sum(bump_weight(th, al) * heights))
            verts[u * n_v + v] = center + (TUBE_RADIUS + disp) * normal
            normals[u * n_v + v] = normal
    # End-cap centers sit on the arch curve.
    cap0, cap1 = n_u * n_v, n_u * n_v + 1
    verts[cap0] = ARCH_RADIUS * np.array([np.cos(theta_lo), np.sin(theta_lo), 0.0])
    verts[cap1] = ARCH_RADIUS * np.array([np.cos(theta_hi), np.sin(theta_hi), 0.0])
    normals[cap0] = [np.sin(theta_lo), -np.cos(theta_lo), 0.0]
    normals[cap1] = [-np.sin(theta_hi), np.cos(theta_hi), 0.0]

    faces, labels = [], []
    for u in range(n_u - 1):
        cell_theta = 0.5 * (thetas[u] + thetas[u + 1])
        for v in range(n_v):
            vn = (v + 1) % n_v
            cell_alpha = alphas[v] + np.pi / n_v
            w = bump_weight(cell_theta, cell_alpha)
            t = int(np.argmax(w))
            label = t + 1 if w[t] > LABEL_BUMP_THRESHOLD else 0
            a, b = u * n_v + v, (u + 1) * n_v + v
            c, d = (u + 1) * n_v + vn, u * n_v + vn
            faces += [[a, b, c], [a, c, d]]
            labels += [label, label]
    for v in range(n_v):  # caps, labeled gum
        vn = (v + 1) % n_v
        faces.append([cap0, v, vn])
        faces.append([cap1, (n_u - 1) * n_v + vn, (n_u - 1) * n_v + v])
        labels += [0, 0]

    if noise > 0:
        verts = verts + noise * rng.standard_normal(len(verts))[:, None] * normals

    return TriMesh(verts, np.array(faces, dtype=np.int64), np.array(labels, dtype=np.int64))


def tetrahedron() -> TriMesh:
    verts = np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    )
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriMesh(verts, faces)


def cylinder_mesh(radius: float, length: float, n_seg: int = 10, n_ring: int = 10) -> TriMesh:
    """Closed cylinder along the z axis, centered at the origin."""
    zs = np.linspace(-length / 2, length / 2, n_seg + 1)
    angles = 2 * np.pi * np.arange(n_ring) / n_ring
    verts = []
    for z in zs:
        for a in angles:
            verts.append([radius * np.cos(a), radius * np.sin(a), z])
    verts.append([0.0, 0.0, -length / 2])
    verts.append([0.0, 0.0, length / 2])
    bot, top = len(verts) - 2, len(verts) - 1

    faces = []
    for u in range(n_seg):
        for v in range(n_ring):
            vn = (v + 1) % n_ring
            a, b = u * n_ring + v, (u + 1) * n_ring + v
            c, d = (u + 1) * n_ring + vn, u * n_ring + vn
            faces += [[a, d, c], [a, c, b]]
    for v in range(n_ring):
        vn = (v + 1) % n_ring
        faces.append([bot, vn, v])
        faces.append([top, n_seg * n_ring + v, n_seg * n_ring + vn])
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def uv_sphere(radius: float = 1.0, n_lat: int = 12, n_lon: int = 16) -> TriMesh:
    """Closed UV sphere centered at the origin."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * np.pi * j / n_lon
            verts.append(
                [
                    radius * np.sin(phi) * np.cos(lam),
                    radius * np.sin(phi) * np.sin(lam),
                    radius * np.cos(phi),
                ]
            )
    verts.append([0.0, 0.0, -radius])
    north, south = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([north, ring(1, j), ring(1, j + 1)])
        faces.append([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i + 1, j)
            c, d = ring(i + 1, j + 1), ring(i, j + 1)
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))
