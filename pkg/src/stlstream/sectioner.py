"""
Client-side geometry: support pillars, horizontal sectioning into closed
one-layer slabs, and the guide frame plus orientation dot added to every
slab so each layer file has the same XY footprint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import shapes
from .mesh import Aabb, Mesh, MeshError, MeshNotClosed, RigidTransform, apply_transform, drop_to_bed, translate, write_stl
from .polygon import triangulate_loops

# vertices closer than this to a cut plane are snapped onto it
SNAP = 1e-9


class SectionError(MeshError):
    """Raised when a cut plane cannot be closed into cap polygons."""


@dataclass(frozen=True)
class SupportSpec:
    overhang_threshold_deg: float = 45.0
    pillar_xy: float = 2.0
    clearance: float = 0.3

    def __post_init__(self):
        if not 0 < self.overhang_threshold_deg < 90:
            raise ValueError("overhang threshold must be in (0, 90) degrees")
        if self.pillar_xy <= 0:
            raise ValueError("pillar_xy must be positive")
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")


@dataclass(frozen=True)
class GuideSpec:
    margin: float = 2.0
    wall: float = 1.0
    dot_size: float = 2.0
    dot_corner: str = "NE"

    def __post_init__(self):
        if self.margin <= 0 or self.wall <= 0 or self.dot_size <= 0:
            raise ValueError("guide margin, wall and dot_size must be positive")
        if self.dot_corner not in ("NE", "NW", "SE", "SW"):
            raise ValueError(f"unknown dot corner {self.dot_corner!r}")


@dataclass(frozen=True)
class Slab:
    """One horizontal section of a job, printed as a single layer."""

    index: int
    z_lo: float
    z_hi: float
    body: Mesh
    guide: Mesh | None = None

    @property
    def thickness(self) -> float:
        return self.z_hi - self.z_lo

    @property
    def mesh(self) -> Mesh:
        """Body and guide shells as one mesh (what goes into the layer file)."""
        if self.guide is None:
            return self.body
        return self.body.concatenate(self.guide, provenance="sectioned")

    def to_stl(self, format: str = "binary") -> bytes:
        return write_stl(self.mesh, format)

    @property
    def filename(self) -> str:
        return f"layer_{self.index}.stl"


# supports ----------------------------------------------------------------

def generate_supports(mesh: Mesh, spec: SupportSpec = SupportSpec(), layer_height: float | None = None) -> Mesh:
    """
    Add square pillars under overhanging facets.

    A facet needs support when its normal is within the overhang
    threshold of straight down and its centroid is above ``layer_height``
    (defaults to the clearance). Pillars sit on an XY grid of pitch
    ``spec.pillar_xy``; every grid cell under such a facet (its centroid
    cell and any cell whose centre falls inside the facet's footprint)
    gets one pillar from the bed up to the lowest facet above it minus the
    clearance. Pillars are separate closed boxes appended to the mesh.
    """
    if not mesh.is_closed:
        raise MeshNotClosed(mesh.boundary_edges())
    zmin = float(mesh.vertices[:, 2].min())
    if zmin > 1e-6 or zmin < -1e-6:
        raise MeshError(f"mesh is not on the bed (min z = {zmin:g})")
    floor_z = spec.clearance if layer_height is None else layer_height
    cos_t = math.cos(math.radians(spec.overhang_threshold_deg))
    normals = mesh.normals
    tri = mesh.triangles
    centroids = tri.mean(axis=1)
    down = (-normals[:, 2] > cos_t) & (centroids[:, 2] > floor_z)
    pitch = spec.pillar_xy
    tops: dict[tuple[int, int], float] = {}

    def want(cell, z):
        top = z - spec.clearance
        if top <= 0:
            return
        if cell not in tops or top < tops[cell]:
            tops[cell] = top

    for t, n, c in zip(tri[down], normals[down], centroids[down]):
        want((math.floor(c[0] / pitch), math.floor(c[1] / pitch)), c[2])
        lo = np.floor(t[:, :2].min(axis=0) / pitch).astype(int)
        hi = np.floor(t[:, :2].max(axis=0) / pitch).astype(int)
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                px, py = (i + 0.5) * pitch, (j + 0.5) * pitch
                if _inside_xy(t, px, py):
                    # plane height at the cell centre
                    z = c[2] - (n[0] * (px - c[0]) + n[1] * (py - c[1])) / n[2]
                    want((i, j), min(z, c[2]))
    if not tops:
        return mesh
    pillars = [
        shapes.box((i * pitch, j * pitch, 0.0), ((i + 1) * pitch, (j + 1) * pitch, top)).triangles
        for (i, j), top in sorted(tops.items())
    ]
    return Mesh(np.concatenate([mesh.triangles] + pillars), "support-augmented")


def _inside_xy(t, x, y) -> bool:
    (ax, ay), (bx, by), (cx, cy) = t[0, :2], t[1, :2], t[2, :2]
    d1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
    d2 = (cx - bx) * (y - by) - (cy - by) * (x - bx)
    d3 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx)
    return (d1 >= 0 and d2 >= 0 and d3 >= 0) or (d1 <= 0 and d2 <= 0 and d3 <= 0)


# sectioning --------------------------------------------------------------

def slab_count(height: float, h: float) -> int:
    return max(1, math.ceil(height / h - 1e-9))


def slab_bounds(height: float, h: float) -> list[tuple[float, float]]:
    k = slab_count(height, h)
    return [(n * h, min((n + 1) * h, height)) for n in range(k)]


def section_mesh(mesh: Mesh, h: float, layer_range: tuple[float, float] | None = None) -> list[Slab]:
    """
    Cut a closed, bed-resting mesh into ``ceil(height / h)`` closed slabs.

    Parameters
    ----------
    mesh : Mesh
      Closed mesh with min z = 0.
    h : float
      Layer height; slab ``n`` spans ``[n*h, min((n+1)*h, height)]``.
    layer_range : (float, float) or None
      Agreed machine layer-height range; ``h`` must fall inside.
    """
    if h <= 0:
        raise ValueError(f"layer height must be positive, got {h}")
    if layer_range is not None and not layer_range[0] <= h <= layer_range[1]:
        raise ValueError(f"layer height {h} outside machine range {layer_range}")
    if not mesh.is_closed:
        raise MeshNotClosed(mesh.boundary_edges())
    zmin = float(mesh.vertices[:, 2].min())
    if abs(zmin) > 1e-6:
        raise MeshError(f"mesh is not on the bed (min z = {zmin:g})")
    height = float(mesh.vertices[:, 2].max())
    slabs = []
    for n, (lo, hi) in enumerate(slab_bounds(height, h)):
        body = clip_slab(mesh, lo, hi)
        slabs.append(Slab(n, lo, hi, body))
    return slabs


def clip_slab(mesh: Mesh, lo: float, hi: float) -> Mesh:
    """Closed part of ``mesh`` between the planes z = lo and z = hi."""
    tri = mesh.triangles.copy()
    z = tri[:, :, 2]
    z[np.abs(z - lo) <= SNAP] = lo
    z[np.abs(z - hi) <= SNAP] = hi
    zmin, zmax = z.min(axis=1), z.max(axis=1)
    nz = mesh.normals[:, 2]
    flat_lo = (zmin == lo) & (zmax == lo) & (nz < 0)
    flat_hi = (zmin == hi) & (zmax == hi) & (nz > 0)
    inside = (zmin >= lo) & (zmax <= hi) & (zmax > zmin)
    crossing = (zmax > lo) & (zmin < hi) & ~inside & ~(zmax == zmin)
    inside_flat = (zmin == zmax) & (zmin > lo) & (zmin < hi)
    parts = [tri[flat_lo | flat_hi | inside | inside_flat]]
    pieces = []
    for t in tri[crossing]:
        poly = _clip_triangle(t, lo, hi)
        for k in range(1, len(poly) - 1):
            a, b, c = poly[0], poly[k], poly[k + 1]
            if a != b and b != c and a != c:
                pieces.append((a, b, c))
    if pieces:
        parts.append(np.array(pieces, dtype=np.float64))
    surface = np.concatenate(parts) if len(parts) > 1 else parts[0]
    if len(surface) == 0:
        raise SectionError(f"slab [{lo:g}, {hi:g}] is empty")
    return Mesh(_caps(surface, lo, hi), "sectioned")


def _cut(p, q, c) -> tuple:
    # canonical ordering so both facets sharing an edge get identical bits
    a, b = (p, q) if tuple(p) <= tuple(q) else (q, p)
    t = (c - a[2]) / (b[2] - a[2])
    return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), c)


def _clip_triangle(t, lo, hi) -> list[tuple]:
    out = []
    for i in range(3):
        p, q = t[i], t[(i + 1) % 3]
        if lo <= p[2] <= hi:
            out.append((p[0], p[1], p[2]))
        cuts = [c for c in (lo, hi) if (p[2] - c) * (q[2] - c) < 0]
        if q[2] < p[2]:
            cuts.reverse()
        out.extend(_cut(p, q, c) for c in cuts)
    # drop consecutive repeats
    poly = []
    for v in out:
        if not poly or poly[-1] != v:
            poly.append(v)
    if len(poly) > 1 and poly[0] == poly[-1]:
        poly.pop()
    return poly


def _caps(surface: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """
    Close the clipped surface with planar caps at ``lo`` and ``hi``.

    Shells that touch along a cut (adjacent support pillars, a pillar
    against a wall) leave collinear, opposite boundary runs split at
    different points; those are split at each other's vertices and
    cancelled first, and the surface facets on them are split to match.
    Returns the surface with caps appended.
    """
    edges = _surplus_edges(surface)
    if not edges:
        return surface
    for a, b in edges:
        if not (a[2] == b[2] and a[2] in (lo, hi)):
            raise SectionError(f"open edge off the cut planes near z={a[2]:g}: {a} -> {b}")
    splits = {}
    for z in (lo, hi):
        on = [e for e in edges if e[0][2] == z]
        if on:
            splits.update(_t_junctions(on))
    if splits:
        surface = _split_facets(surface, splits)
        edges = _surplus_edges(surface)
    top = [(b, a) for a, b in edges if a[2] == hi]
    bottom = [(a, b) for a, b in edges if a[2] == lo]
    caps = []
    if top:
        for t in triangulate_loops(_chain(top, hi)):
            caps.append([[*t[0], hi], [*t[1], hi], [*t[2], hi]])
    if bottom:
        # bottom cap faces down: the surface's own boundary runs
        # counter-clockwise there, so triangulate it and flip the triangles
        for t in triangulate_loops(_chain(bottom, lo)):
            caps.append([[*t[0], lo], [*t[2], lo], [*t[1], lo]])
    if not caps:
        return surface
    return np.concatenate([surface, np.array(caps, dtype=np.float64)])


def _t_junctions(edges) -> dict[frozenset, list[tuple]]:
    """Boundary vertices lying strictly inside other boundary edges on one plane."""
    pts = sorted({p for e in edges for p in e})
    P = np.array([p[:2] for p in pts])
    E = np.array([[a[0], a[1], b[0], b[1]] for a, b in edges])
    d = E[:, 2:] - E[:, :2]
    ll = (d * d).sum(axis=1)
    ok = ll > 0
    rx = P[None, :, 0] - E[:, None, 0]
    ry = P[None, :, 1] - E[:, None, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rx * d[:, None, 0] + ry * d[:, None, 1]) / ll[:, None]
        dist = np.abs(rx * d[:, None, 1] - ry * d[:, None, 0]) / np.sqrt(ll)[:, None]
    hit = (t > 1e-12) & (t < 1 - 1e-12) & (dist <= 1e-9) & ok[:, None]
    out = {}
    for k in np.flatnonzero(hit.any(axis=1)):
        a, b = edges[k]
        cols = np.flatnonzero(hit[k])
        inner = [pts[i] for i in cols[np.argsort(t[k, cols])]]
        out[frozenset((a, b))] = (a, inner)
    return out


def _split_facets(surface: np.ndarray, splits) -> np.ndarray:
    out = []
    for t in surface.tolist():
        tri = [tuple(v) for v in t]
        pieces = [tri]
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            hit = splits.get(frozenset((a, b)))
            if hit is None:
                continue
            start, inner = hit
            chain = inner if start == a else inner[::-1]
            apex = tri[(k + 2) % 3]
            run = [a] + chain + [b]
            pieces = [[run[i], run[i + 1], apex] for i in range(len(run) - 1)]
            # at most one edge of a facet lies on a cut plane unless the
            # facet is flat on it, in which case the caps never see it
            break
        out.extend(pieces)
    return np.array(out, dtype=np.float64)


def _surplus_edges(tri: np.ndarray) -> list[tuple[tuple, tuple]]:
    counts: dict[tuple, int] = {}
    for t in tri.tolist():
        a, b, c = map(tuple, t)
        for e in ((a, b), (b, c), (c, a)):
            if e[0] == e[1]:
                continue
            counts[e] = counts.get(e, 0) + 1
    out = []
    for (a, b), n in counts.items():
        surplus = n - counts.get((b, a), 0)
        out.extend([(a, b)] * max(surplus, 0))
    return out


def _chain(edges, z) -> list[np.ndarray]:
    """Link directed edges into closed XY loops."""
    succ: dict[tuple, list[tuple]] = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
    loops = []
    while succ:
        start = next(iter(succ))
        loop = [start]
        prev, cur = None, start
        while True:
            options = succ.get(cur)
            if not options:
                raise SectionError(f"cap contour at z={z:g} does not close at {cur}")
            if len(options) == 1 or prev is None:
                nxt = options.pop(0)
            else:
                nxt = max(options, key=lambda w: _turn(prev, cur, w))
                options.remove(nxt)
            if not options:
                del succ[cur]
            if nxt == start:
                break
            loop.append(nxt)
            prev, cur = cur, nxt
            if len(loop) > len(edges) + 1:
                raise SectionError(f"cap contour at z={z:g} does not close")
        if len(loop) >= 3:
            loops.append(np.array([p[:2] for p in loop], dtype=np.float64))
    return loops


def _turn(p, v, w) -> float:
    dx1, dy1 = v[0] - p[0], v[1] - p[1]
    dx2, dy2 = w[0] - v[0], w[1] - v[1]
    return math.atan2(dx1 * dy2 - dy1 * dx2, dx1 * dx2 + dy1 * dy2)


# guide frame -------------------------------------------------------------

def guide_outline(guide: GuideSpec, job_aabb: Aabb) -> tuple[Aabb, Aabb, Aabb]:
    """XY rectangles of the frame (outer, inner) and the dot, as flat boxes."""
    ext = job_aabb.extents
    if ext[0] <= 0 or ext[1] <= 0:
        raise MeshError("degenerate job bounding box")
    lo, hi = job_aabb.min[:2], job_aabb.max[:2]
    inner = (lo - guide.margin, hi + guide.margin)
    outer = (inner[0] - guide.wall, inner[1] + guide.wall)
    gap, d = guide.margin, guide.dot_size
    east = "E" in guide.dot_corner
    north = "N" in guide.dot_corner
    x0 = outer[1][0] + gap if east else outer[0][0] - gap - d
    y0 = outer[1][1] + gap if north else outer[0][1] - gap - d
    flat = lambda a, b: Aabb([a[0], a[1], 0.0], [b[0], b[1], 0.0])  # noqa: E731
    return flat(*outer), flat(*inner), flat((x0, y0), (x0 + d, y0 + d))


def guide_footprint(guide: GuideSpec, job_aabb: Aabb) -> Aabb:
    outer, _, dot = guide_outline(guide, job_aabb)
    return outer.union(dot)


def add_guideline(slab: Slab, guide: GuideSpec, job_aabb: Aabb) -> Slab:
    """Attach the rectangular frame and the corner dot spanning the slab's Z range."""
    outer, inner, dot = guide_outline(guide, job_aabb)

    def rect(b: Aabb):
        return np.array([[b.min[0], b.min[1]], [b.max[0], b.min[1]],
                         [b.max[0], b.max[1]], [b.min[0], b.max[1]]])

    frame = shapes.extrude(rect(outer), [rect(inner)[::-1]], slab.z_lo, slab.z_hi)
    block = shapes.extrude(rect(dot), (), slab.z_lo, slab.z_hi)
    return replace(slab, guide=frame.concatenate(block, provenance="sectioned"))


# whole client pipeline -----------------------------------------------------

def place_on_bed(mesh: Mesh, bed_x: float, bed_y: float, footprint: Aabb | None = None) -> Mesh:
    """Centre ``footprint`` (default: the mesh bounds) on the bed in XY."""
    fp = footprint or mesh.bounds
    center = (fp.min[:2] + fp.max[:2]) / 2
    shift = np.array([bed_x / 2 - center[0], bed_y / 2 - center[1], 0.0])
    return translate(mesh, shift)


def prepare_mesh(mesh: Mesh, h: float, orientation: RigidTransform | None = None,
                 supports: SupportSpec | None = SupportSpec(),
                 guide: GuideSpec | None = GuideSpec(),
                 bed: tuple[float, float] | None = None) -> Mesh:
    """Orient, drop to the bed, add supports and centre the job footprint on the bed."""
    if orientation is not None:
        mesh = apply_transform(mesh, orientation)
    mesh = drop_to_bed(mesh)
    if supports is not None:
        mesh = generate_supports(mesh, replace(supports, clearance=supports.clearance or h), h)
    if bed is not None:
        fp = guide_footprint(guide, mesh.bounds) if guide is not None else mesh.bounds
        mesh = place_on_bed(mesh, bed[0], bed[1], fp)
    return mesh


def section_job(mesh: Mesh, h: float, guide: GuideSpec | None = GuideSpec(),
                layer_range: tuple[float, float] | None = None) -> list[Slab]:
    """Section a prepared mesh and add the guide frame to each slab."""
    slabs = section_mesh(mesh, h, layer_range)
    if guide is None:
        return slabs
    job = mesh.bounds
    return [add_guideline(s, guide, job) for s in slabs]
