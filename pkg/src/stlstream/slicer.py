"""
Manufacturer-side slicing of one slab into a single-layer G-code program.

The cross-section is taken at the slab's mid-plane and printed at the
slab's top plane. Region arithmetic (offsets, clipping, unions) is done
with shapely; contour extraction and ordering are local.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import LineString, MultiPolygon, Polygon
from shapely.geometry.polygon import orient
from shapely.ops import unary_union

from .config import MachineSpec, PrintConfig
from .gcode import GUIDE, GcodeCommand, GcodeProgram, Marker
from .mesh import Mesh, MeshError
from .polygon import dedupe, group_contours, signed_area
from .sectioner import Slab, slab_bounds

ROLES = ("perimeter", "infill", "support", "guide")
WELD = 1e-6


class SliceError(MeshError):
    """Raised when a slab cannot be turned into a valid layer program."""


@dataclass(frozen=True)
class Toolpath:
    role: str
    points: np.ndarray
    extruding: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown toolpath role {self.role!r}")
        if self.extruding and len(self.points) < 2:
            raise ValueError("extruding toolpath needs at least two points")

    @property
    def length(self) -> float:
        d = np.diff(self.points, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    @property
    def closed(self) -> bool:
        return bool(np.array_equal(self.points[0], self.points[-1]))


# cross-section -------------------------------------------------------------

def cross_section(mesh: Mesh, z: float) -> list[np.ndarray]:
    """
    Closed contours of ``mesh`` cut by the plane at height ``z``.

    Vertices at or above the plane count as above, so every facet
    crossing contributes exactly one segment between two of its edges.
    Segments are linked through the mesh edges they cut (vertices
    welded at 1e-6 mm), which keeps the topology exact even where
    intersection points coincide. Outer contours come back
    counter-clockwise and holes clockwise.
    """
    tri = mesh.triangles
    above = tri[:, :, 2] >= z
    n_above = above.sum(axis=1)
    crossing = np.flatnonzero((n_above > 0) & (n_above < 3))
    if len(crossing) == 0:
        return []
    keys = np.round(tri[crossing] / WELD).astype(np.int64)
    succ: dict[tuple, list[tuple]] = {}
    point: dict[tuple, tuple] = {}
    for t, k, ab in zip(tri[crossing], keys, above[crossing]):
        start = end = None
        for i in range(3):
            j = (i + 1) % 3
            if ab[i] == ab[j]:
                continue
            ka, kb = tuple(k[i]), tuple(k[j])
            edge = (ka, kb) if ka <= kb else (kb, ka)
            if edge not in point:
                point[edge] = _cut_xy(t[i], t[j], z)
            if ab[i]:
                start = edge  # above -> below
            else:
                end = edge
        succ.setdefault(start, []).append(end)
    loops = []
    while succ:
        first = next(iter(succ))
        loop = [first]
        prev, cur = None, first
        while True:
            options = succ.get(cur)
            if not options:
                gap = point[cur]
                raise SliceError(
                    f"open section contour at z={z:g}: chain ends at ({gap[0]:.6f}, {gap[1]:.6f}), "
                    f"started at ({point[first][0]:.6f}, {point[first][1]:.6f})"
                )
            if len(options) == 1 or prev is None:
                nxt = options.pop(0)
            else:
                nxt = max(options, key=lambda e: _turn(point[prev], point[cur], point[e]))
                options.remove(nxt)
            if not options:
                del succ[cur]
            if nxt == first:
                break
            loop.append(nxt)
            prev, cur = cur, nxt
        pts = dedupe(np.array([point[e] for e in loop]))
        if len(pts) >= 3 and abs(signed_area(pts)) > 1e-12:
            loops.append(pts)
    return loops


def _cut_xy(p, q, z) -> tuple[float, float]:
    a, b = (p, q) if tuple(p) <= tuple(q) else (q, p)
    t = (z - a[2]) / (b[2] - a[2])
    return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))


def _turn(p, v, w) -> float:
    dx1, dy1 = v[0] - p[0], v[1] - p[1]
    dx2, dy2 = w[0] - v[0], w[1] - v[1]
    return math.atan2(dx1 * dy2 - dy1 * dx2, dx1 * dx2 + dy1 * dy2)


def section_region(contours) -> list[Polygon]:
    """Contours as disjoint shapely polygons (touching shells merged)."""
    polys = []
    for outer, holes in group_contours(contours):
        p = Polygon(outer, holes).buffer(0)
        if not p.is_empty:
            polys.append(p)
    return _parts(unary_union(polys)) if polys else []


def _parts(geom) -> list[Polygon]:
    if geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        geoms = [geom]
    elif isinstance(geom, MultiPolygon):
        geoms = list(geom.geoms)
    else:
        geoms = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    out = [orient(g, 1.0) for g in geoms if g.area > 1e-12]
    out.sort(key=lambda g: (round(g.bounds[1], 6), round(g.bounds[0], 6)))
    return out


def split_guide(parts: list[Polygon]) -> tuple[list[Polygon], list[Polygon]]:
    """
    Separate the guide frame and its outside marks from the body.

    The frame is recognised as an axis-aligned rectangle with one
    rectangular hole that encloses at least one other part; parts wholly
    outside the frame are its marks. Returns ``(body, guide)``; when no
    frame is found everything is body.
    """
    for i, p in enumerate(parts):
        if len(p.interiors) != 1 or not (_is_rect(p.exterior) and _is_rect(p.interiors[0])):
            continue
        hole = Polygon(p.interiors[0])
        outline = Polygon(p.exterior)
        others = parts[:i] + parts[i + 1:]
        inside = [q for q in others if hole.contains(q)]
        outside = [q for q in others if q.disjoint(outline)]
        if inside and len(inside) + len(outside) == len(others):
            return inside, [p] + outside
    return parts, []


def _is_rect(ring) -> bool:
    pts = np.asarray(ring.coords)[:-1]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    on_edge = (np.isclose(pts, lo, atol=1e-9) | np.isclose(pts, hi, atol=1e-9)).any(axis=1)
    box = (hi[0] - lo[0]) * (hi[1] - lo[1])
    return bool(on_edge.all()) and abs(abs(signed_area(pts)) - box) < 1e-9 * max(box, 1.0)


# toolpaths ---------------------------------------------------------------------

def _region(polygons) -> list[Polygon]:
    if isinstance(polygons, (Polygon, MultiPolygon)):
        return _parts(polygons)
    polygons = list(polygons)
    if polygons and isinstance(polygons[0], Polygon):
        return _parts(unary_union(polygons))
    return section_region(polygons)


def _rings(geom) -> list[np.ndarray]:
    out = []
    for g in _parts(geom):
        out.append(np.asarray(g.exterior.coords))
        out.extend(np.asarray(r.coords) for r in g.interiors)
    return out


def generate_perimeters(polygons, config: PrintConfig, machine: MachineSpec, role: str = "perimeter") -> list[Toolpath]:
    """
    ``config.perimeter_count`` inset loops per contour.

    Loop ``i`` runs at ``nozzle_diameter/2 + i*extrusion_width`` inside
    the region boundary (mitred corners). Collapsed offsets are dropped.
    Loops are closed: the first point is repeated at the end.
    """
    region = unary_union(_region(polygons))
    w = machine.extrusion_width
    out = []
    for i in range(config.perimeter_count):
        inset = region.buffer(-(machine.nozzle_diameter / 2 + i * w), join_style="mitre")
        for ring in _rings(inset):
            if len(ring) >= 4:
                out.append(Toolpath(role, ring))
    return out


def infill_region(polygons, config: PrintConfig, machine: MachineSpec):
    region = unary_union(_region(polygons))
    if config.perimeter_count == 0:
        return region
    w = machine.extrusion_width
    inset = machine.nozzle_diameter / 2 + (config.perimeter_count - 1) * w + w / 2
    return region.buffer(-inset, join_style="mitre")


def generate_infill(polygons, config: PrintConfig, machine: MachineSpec, layer_index: int | None = None,
                    role: str = "infill") -> list[Toolpath]:
    """
    Rectilinear fill inside the innermost perimeter.

    Lines run at ``fill_angle`` (plus 90 degrees on odd layers) with
    spacing ``extrusion_width / fill_density``. Each connected part gets
    its own grid, centred on the part's extent across the lines, so the
    fill of a part does not depend on where it sits on the bed. Lines
    are visited in boustrophedon order.
    """
    if config.fill_density <= 0:
        return []
    if layer_index is None:
        layer_index = int(round(config.z_offset / config.layer_height))
    angle = config.fill_angle + (90.0 if layer_index % 2 else 0.0)
    spacing = machine.extrusion_width / config.fill_density
    region = infill_region(polygons, config, machine)
    out = []
    for part in _parts(region):
        out.extend(_fill_part(part, angle, spacing, role))
    return out


def _fill_part(part: Polygon, angle: float, spacing: float, role: str) -> list[Toolpath]:
    rot = affinity.rotate(part, -angle, origin=(0, 0), use_radians=False)
    x0, y0, x1, y1 = rot.bounds
    n = int(math.floor((y1 - y0) / spacing + 1e-9)) + 1
    mid = (y0 + y1) / 2
    ys = mid + (np.arange(n) - (n - 1) / 2) * spacing
    lines = shapely.linestrings([[[x0 - 1, y], [x1 + 1, y]] for y in ys])
    cuts = shapely.intersection(lines, rot)
    c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    rotm = np.array([[c, -s], [s, c]])
    out = []
    for k, geom in enumerate(cuts):
        segs = [g for g in getattr(geom, "geoms", [geom]) if isinstance(g, LineString) and not g.is_empty]
        segs = [np.asarray(g.coords)[[0, -1]] for g in segs if g.length > 1e-9]
        segs.sort(key=lambda a: a[:, 0].min())
        if k % 2:
            segs = [a[::-1] for a in segs[::-1]]
        else:
            segs = [a if a[0, 0] <= a[1, 0] else a[::-1] for a in segs]
        for a in segs:
            out.append(Toolpath(role, a @ rotm.T))
    return out


def _seam(loop: np.ndarray, pos: np.ndarray, preference: str) -> np.ndarray:
    ring = loop[:-1]
    if preference == "fixed":
        k = 0
    else:
        d = np.hypot(ring[:, 0] - pos[0], ring[:, 1] - pos[1])
        k = int(np.argmin(d))  # argmin takes the lowest index on ties
    ring = np.roll(ring, -k, axis=0)
    return np.vstack([ring, ring[:1]])


def layer_toolpaths(parts: list[Polygon], config: PrintConfig, machine: MachineSpec,
                    layer_index: int, detect_guide: bool = True) -> list[Toolpath]:
    """Perimeters, then infill, then guide paths for one layer's region."""
    body, guide = split_guide(parts) if detect_guide else (parts, [])
    paths = generate_perimeters(body, config, machine)
    paths += generate_infill(body, config, machine, layer_index)
    if guide:
        paths += generate_perimeters(guide, config, machine, role="guide")
        paths += generate_infill(guide, config, machine, layer_index, role="guide")
    return paths


# G-code emission -------------------------------------------------------------------

def _move(code: str, x, y, z, e=None, f=None, comment=None) -> GcodeCommand:
    # coordinates to 1 micron, Z to 1e-6 mm, E to 1e-5 mm of filament
    params = {"X": round(float(x), 3) + 0.0, "Y": round(float(y), 3) + 0.0, "Z": round(float(z), 6) + 0.0}
    if e is not None:
        params["E"] = round(float(e), 5)
    if f is not None:
        params["F"] = float(f)
    return GcodeCommand(code, params, comment)


def header_block(machine: MachineSpec) -> tuple[list[GcodeCommand], list[Marker]]:
    cmds = [
        GcodeCommand("G28"),
        GcodeCommand("M140", {"S": float(machine.bed_temp)}),
        GcodeCommand("M104", {"S": float(machine.hotend_temp)}),
        GcodeCommand("M190", {"S": float(machine.bed_temp)}),
        GcodeCommand("M109", {"S": float(machine.hotend_temp)}),
        GcodeCommand("M82"),
        GcodeCommand("G92", {"E": 0.0}),
    ]
    return cmds, [Marker("HEADER_START", 0), Marker("HEADER_END", len(cmds))]


def footer_block(machine: MachineSpec, z: float) -> tuple[list[GcodeCommand], list[Marker]]:
    park = min(z + 10.0, machine.max_z)
    cmds = [
        GcodeCommand("M104", {"S": 0.0}),
        GcodeCommand("M140", {"S": 0.0}),
        GcodeCommand("M107"),
        _move("G0", 0.0, 0.0, park, f=machine.travel_feed),
        GcodeCommand("M84"),
    ]
    return cmds, [Marker("FOOTER_START", 0), Marker("FOOTER_END", len(cmds))]


def layer_block(paths: list[Toolpath], layer_index: int, z: float, config: PrintConfig,
                machine: MachineSpec) -> list[GcodeCommand]:
    """
    One layer: fan on, reset E, then each path as a travel to its start
    followed by extruding moves. E is absolute and grows by
    ``length * h * width / filament_area`` per move.
    """
    h, w = config.layer_height, machine.extrusion_width
    per_mm = h * w / machine.filament_area
    feed = machine.first_layer_feed if layer_index == 0 else machine.print_feed
    cmds = [GcodeCommand("M106", {"S": float(machine.fan_speed)}), GcodeCommand("G92", {"E": 0.0})]
    pos = np.zeros(2)
    e = 0.0
    for path in paths:
        pts = path.points
        if path.closed and path.role != "infill":
            pts = _seam(pts, pos, config.seam_preference)
        comment = GUIDE if path.role == "guide" else None
        cmds.append(_move("G0", pts[0, 0], pts[0, 1], z, f=machine.travel_feed, comment=comment))
        for a, b in zip(pts[:-1], pts[1:]):
            e += float(np.hypot(*(b - a))) * per_mm
            cmds.append(_move("G1", b[0], b[1], z, e, feed, comment))
        pos = pts[-1]
    return cmds


def _check_bed(paths: list[Toolpath], z: float, machine: MachineSpec) -> None:
    if not paths:
        return
    pts = np.concatenate([p.points for p in paths])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if lo[0] < 0 or lo[1] < 0 or hi[0] > machine.bed_x or hi[1] > machine.bed_y:
        raise SliceError(
            f"toolpaths span ({lo[0]:.3f}, {lo[1]:.3f})-({hi[0]:.3f}, {hi[1]:.3f}), "
            f"outside the {machine.bed_x:g} x {machine.bed_y:g} bed"
        )
    if z > machine.max_z:
        raise SliceError(f"layer height z={z:g} above machine max_z={machine.max_z:g}")


def _check_config(config: PrintConfig, machine: MachineSpec) -> None:
    if not machine.accepts_layer_height(config.layer_height):
        raise SliceError(
            f"layer height {config.layer_height:g} outside machine range "
            f"[{machine.layer_height_min:g}, {machine.layer_height_max:g}]"
        )


def assemble(blocks: list[tuple[int, list[GcodeCommand]]], machine: MachineSpec, last_z: float) -> GcodeProgram:
    """Header, ``;LAYER n`` blocks and footer as one marked program."""
    cmds, markers = header_block(machine)
    cmds, markers = list(cmds), list(markers)
    for index, block in blocks:
        markers.append(Marker("LAYER", len(cmds), index))
        cmds.extend(block)
    foot, fm = footer_block(machine, last_z)
    markers.extend(Marker(m.kind, m.index + len(cmds), m.arg) for m in fm)
    cmds.extend(foot)
    return GcodeProgram(tuple(cmds), tuple(markers))


def slice_slab(slab: Slab | Mesh, config: PrintConfig, machine: MachineSpec, position: str = "intermediate",
               detect_guide: bool = True) -> GcodeProgram:
    """
    Slice one slab into a complete single-layer program.

    Parameters
    ----------
    slab : Slab or Mesh
      The slab in absolute coordinates; its lowest point must sit at
      ``config.z_offset``.
    config : PrintConfig
      Design choices with ``z_offset`` set for this layer.
    machine : MachineSpec
      Machine choices and limits.
    position : {"first", "intermediate", "last"}
      Where the layer falls in the job; carried for symmetry with
      ``remove_redundant``. Every program is emitted with both header
      and footer regions marked.
    detect_guide : bool
      Print a recognised guide frame last, with ``;GUIDE`` comments.

    Returns
    -------
    GcodeProgram
      Header, one layer printed at ``z_offset + h + z_allowance``, footer.
    """
    _check_config(config, machine)
    h = config.layer_height
    index = int(round(config.z_offset / h))
    if isinstance(slab, Slab):
        if slab.index != index:
            raise SliceError(f"slab {slab.index} does not match z_offset {config.z_offset:g} (layer {index})")
        mesh = slab.mesh
    else:
        mesh = slab
    zs = mesh.vertices[:, 2]
    z_lo, z_hi = float(zs.min()), float(zs.max())
    # layer files carry float32 coordinates
    tol = 1e-6 + 2.4e-7 * abs(z_hi)
    if abs(z_lo - config.z_offset) > tol:
        raise SliceError(f"slab bottom z={z_lo:g} does not match z_offset {config.z_offset:g}")
    if z_hi - z_lo > h + 2 * tol:
        raise SliceError(f"slab is {z_hi - z_lo:g} mm thick, more than layer height {h:g}")
    parts = section_region(cross_section(mesh, (z_lo + z_hi) / 2))
    if not parts:
        raise SliceError(f"slab at z={z_lo:g} has an empty cross-section")
    z_print = config.z_offset + h + machine.z_allowance
    paths = layer_toolpaths(parts, config, machine, index, detect_guide)
    _check_bed(paths, z_print, machine)
    return assemble([(index, layer_block(paths, index, z_print, config, machine))], machine, z_print)


def slice_mesh(mesh: Mesh, config: PrintConfig, machine: MachineSpec) -> GcodeProgram:
    """
    Whole-mesh slicing with the same layer scheme as the streamed path:
    layer ``n`` is the section at the middle of ``[n*h, min((n+1)*h, top)]``
    printed at ``(n+1)*h``. Header and footer appear once.
    """
    _check_config(config, machine)
    h = config.layer_height
    zs = mesh.vertices[:, 2]
    if abs(float(zs.min())) > 1e-6:
        raise SliceError("mesh is not on the bed")
    blocks = []
    z_print = 0.0
    for n, (lo, hi) in enumerate(slab_bounds(float(zs.max()), h)):
        parts = section_region(cross_section(mesh, (lo + hi) / 2))
        z_print = n * h + h + machine.z_allowance
        paths = layer_toolpaths(parts, config.at_layer(n), machine, n, detect_guide=False)
        _check_bed(paths, z_print, machine)
        blocks.append((n, layer_block(paths, n, z_print, config, machine)))
    return assemble(blocks, machine, z_print)
