"""
Closed, outward-wound test solids: boxes, prisms, cones, tubes, the
T-bracket and table used for support checks, a spur gear and an
icosphere.
"""
from __future__ import annotations

import math

import numpy as np

from .mesh import Mesh
from .polygon import signed_area, triangulate


def box(lo, hi) -> Mesh:
    """Axis-aligned box between corners ``lo`` and ``hi``, 12 triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    outline = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    return extrude(outline, (), z0, z1)


def cube(size: float = 10.0, origin=(0.0, 0.0, 0.0)) -> Mesh:
    o = np.asarray(origin, dtype=np.float64)
    return box(o, o + size)


def extrude(outer, holes, z0: float, z1: float) -> Mesh:
    """
    Right prism over a polygon with holes.

    ``outer`` is made counter-clockwise and holes clockwise before
    building; side walls are split into two triangles per edge.
    """
    outer = np.asarray(outer, dtype=np.float64)
    if signed_area(outer) < 0:
        outer = outer[::-1]
    fixed = []
    for h in holes:
        h = np.asarray(h, dtype=np.float64)
        fixed.append(h[::-1] if signed_area(h) > 0 else h)
    pts, tris = triangulate(outer, fixed)
    out = []
    for a, b, c in tris:
        pa, pb, pc = pts[a], pts[b], pts[c]
        out.append([[*pa, z1], [*pb, z1], [*pc, z1]])
        out.append([[*pa, z0], [*pc, z0], [*pb, z0]])
    for loop in [outer] + fixed:
        n = len(loop)
        for i in range(n):
            p, q = loop[i], loop[(i + 1) % n]
            out.append([[*p, z0], [*q, z0], [*q, z1]])
            out.append([[*p, z0], [*q, z1], [*p, z1]])
    return Mesh(np.array(out))


def circle(radius: float, segments: int = 64, center=(0.0, 0.0)) -> np.ndarray:
    t = 2 * np.pi * np.arange(segments) / segments
    return np.c_[center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]


def cylinder(radius: float, height: float, segments: int = 64) -> Mesh:
    return extrude(circle(radius, segments), (), 0.0, height)


def tube(outer_radius: float, inner_radius: float, height: float, segments: int = 64) -> Mesh:
    return extrude(
        circle(outer_radius, segments), [circle(inner_radius, segments)[::-1]], 0.0, height
    )


def cone(radius: float, height: float, segments: int = 64) -> Mesh:
    """Right circular cone standing on its base at z = 0."""
    ring = circle(radius, segments)
    apex = [0.0, 0.0, height]
    center = [0.0, 0.0, 0.0]
    out = []
    for i in range(segments):
        p, q = ring[i], ring[(i + 1) % segments]
        out.append([[*p, 0.0], [*q, 0.0], apex])
        out.append([center, [*q, 0.0], [*p, 0.0]])
    return Mesh(np.array(out))


def t_shape(
    stem=(4.0, 4.0, 6.0), bar=(16.0, 4.0, 2.0)
) -> Mesh:
    """
    Upright T: a square stem with a crossbar on top whose arms overhang
    on both sides. Built as one closed shell.
    """
    sx, sy, sh = stem
    bx, by, bh = bar
    # profile in the XZ plane, extruded along Y
    hx, hb = sx / 2, bx / 2
    profile = np.array(
        [
            [-hx, 0.0], [hx, 0.0], [hx, sh], [hb, sh],
            [hb, sh + bh], [-hb, sh + bh], [-hb, sh], [-hx, sh],
        ]
    )
    depth = max(sy, by)
    prism = extrude(profile, (), 0.0, depth)
    # prism was built in (x, z_profile, y): rotate profile plane into XZ
    tri = prism.triangles.copy()
    x, zp, y = tri[..., 0].copy(), tri[..., 1].copy(), tri[..., 2].copy()
    tri[..., 0] = x
    tri[..., 1] = -y + depth / 2
    tri[..., 2] = zp
    # the (x, y, z) -> (x, -y', z') map is a proper rotation, winding is kept
    return Mesh(tri)


def table(plate=(10.0, 10.0, 1.0), leg=(2.0, 2.0), top_z: float = 6.0) -> Mesh:
    """Plate supported by a single centred square leg, as one shell."""
    px, py, pt = plate
    lx, ly = leg
    z0 = top_z - pt
    leg_mesh = box((-lx / 2, -ly / 2, 0.0), (lx / 2, ly / 2, z0))
    plate_mesh = box((-px / 2, -py / 2, z0), (px / 2, py / 2, top_z))
    # stitch: remove leg top and plate bottom, rebuild the plate underside
    # as an annulus around the leg footprint
    lt = leg_mesh.triangles
    pm = plate_mesh.triangles
    keep_leg = ~np.all(np.isclose(lt[..., 2], z0), axis=1)
    keep_plate = ~np.all(np.isclose(pm[..., 2], z0), axis=1)
    outer = np.array([[-px / 2, -py / 2], [px / 2, -py / 2], [px / 2, py / 2], [-px / 2, py / 2]])
    hole = np.array([[-lx / 2, -ly / 2], [-lx / 2, ly / 2], [lx / 2, ly / 2], [lx / 2, -ly / 2]])
    pts, tris = triangulate(outer, [hole])
    under = [[[*pts[a], z0], [*pts[c], z0], [*pts[b], z0]] for a, b, c in tris]
    return Mesh(np.concatenate([lt[keep_leg], pm[keep_plate], np.array(under)]))


def gear_outline(teeth: int = 12, root_radius: float = 8.0, tip_radius: float = 10.0,
                 samples: int = 4) -> np.ndarray:
    """Trapezoidal-tooth spur gear outline, counter-clockwise."""
    pts = []
    pitch = 2 * np.pi / teeth
    for k in range(teeth):
        a0 = k * pitch
        # root land, flank up, tip land, flank down
        for s in range(samples):
            a = a0 + 0.25 * pitch * s / samples
            pts.append((root_radius * math.cos(a), root_radius * math.sin(a)))
        for s in range(samples):
            a = a0 + pitch * (0.35 + 0.3 * s / samples)
            pts.append((tip_radius * math.cos(a), tip_radius * math.sin(a)))
        a = a0 + pitch * 0.65
        pts.append((tip_radius * math.cos(a), tip_radius * math.sin(a)))
        a = a0 + pitch * 0.75
        pts.append((root_radius * math.cos(a), root_radius * math.sin(a)))
    return np.array(pts)


def gear(teeth: int = 12, root_radius: float = 8.0, tip_radius: float = 10.0,
         bore: float = 2.5, height: float = 3.0) -> Mesh:
    return extrude(gear_outline(teeth, root_radius, tip_radius), [circle(bore, 32)[::-1]], 0.0, height)


def icosphere(radius: float = 1.0, subdivisions: int = 2) -> Mesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    vv = np.array(v) * radius
    return Mesh(vv[np.array(faces)])
