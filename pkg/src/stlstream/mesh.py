"""
mesh.py
-------

Triangle meshes in millimetre coordinates: STL input/output, rigid
transforms and the few geometric measures the rest of the package needs
(bounding boxes, signed volume, closedness).
"""
from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# area below which a facet is considered degenerate and dropped at parse time
DEGENERATE_AREA = 1e-12

STL_BANNER = b"stlstream binary STL"
_HEADER_SIZE = 80
_RECORD = struct.Struct("<12fH")
_RECORD_DTYPE = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)

PROVENANCES = ("original", "sectioned", "support-augmented")


class MeshError(ValueError):
    """Raised for malformed STL data or invalid mesh operations."""


class MeshNotClosed(MeshError):
    """Raised when an operation needs a closed mesh and gets an open one."""

    def __init__(self, boundary_edges):
        self.boundary_edges = boundary_edges
        shown = ", ".join(
            f"({a[0]:.4g},{a[1]:.4g},{a[2]:.4g})->({b[0]:.4g},{b[1]:.4g},{b[2]:.4g})"
            for a, b in boundary_edges[:8]
        )
        more = "" if len(boundary_edges) <= 8 else f" ... (+{len(boundary_edges) - 8})"
        super().__init__(f"mesh is not closed: {len(boundary_edges)} boundary edges: {shown}{more}")


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise MeshError(f"invalid bounding box {lo} > {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def translated(self, offset) -> "Aabb":
        offset = np.asarray(offset, dtype=np.float64)
        return Aabb(self.min + offset, self.max + offset)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation followed by translation: ``v -> R @ v + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise MeshError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise MeshError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_euler(cls, x: float = 0.0, y: float = 0.0, z: float = 0.0, translation=(0, 0, 0)):
        """Rotation about X, then Y, then Z (degrees, extrinsic axes)."""
        ax, ay, az = np.radians([x, y, z])
        cx, sx = math.cos(ax), math.sin(ax)
        cy, sy = math.cos(ay), math.sin(ay)
        cz, sz = math.cos(az), math.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, translation)

    @classmethod
    def translation_only(cls, offset) -> "RigidTransform":
        return cls(np.eye(3), offset)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def _face_normals(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from winding and the facet areas."""
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    unit = np.zeros_like(cross)
    ok = norm > 0
    unit[ok] = cross[ok] / norm[ok, None]
    return unit, norm / 2.0


class Mesh:
    """
    Immutable triangle soup.

    Parameters
    ----------
    triangles : (n, 3, 3) float
      Vertex coordinates of every facet, counter-clockwise seen
      from outside.
    provenance : str
      One of ``original``, ``sectioned``, ``support-augmented``.
    """

    __slots__ = ("triangles", "provenance", "dropped", "_normals", "_areas", "_topology")

    def __init__(self, triangles, provenance: str = "original", dropped: int = 0):
        tri = np.array(triangles, dtype=np.float64).reshape(-1, 3, 3)
        if not np.all(np.isfinite(tri)):
            raise MeshError("mesh contains non-finite coordinates")
        if provenance not in PROVENANCES:
            raise MeshError(f"unknown provenance {provenance!r}")
        tri.setflags(write=False)
        self.triangles = tri
        self.provenance = provenance
        # degenerate facets discarded while parsing this mesh
        self.dropped = dropped
        self._normals = None
        self._areas = None
        self._topology = None

    def __len__(self) -> int:
        return len(self.triangles)

    def __repr__(self) -> str:
        return f"Mesh({len(self)} triangles, {self.provenance})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.triangles.shape == other.triangles.shape and bool(
            np.array_equal(self.triangles, other.triangles)
        )

    __hash__ = None

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            self._normals, self._areas = _face_normals(self.triangles)
        return self._normals

    @property
    def areas(self) -> np.ndarray:
        if self._areas is None:
            self._normals, self._areas = _face_normals(self.triangles)
        return self._areas

    @property
    def vertices(self) -> np.ndarray:
        return self.triangles.reshape(-1, 3)

    @property
    def bounds(self) -> Aabb:
        if len(self) == 0:
            raise MeshError("empty mesh has no bounds")
        v = self.vertices
        return Aabb(v.min(axis=0), v.max(axis=0))

    def with_provenance(self, provenance: str) -> "Mesh":
        return Mesh(self.triangles, provenance)

    def concatenate(self, *others: "Mesh", provenance: str | None = None) -> "Mesh":
        parts = [self.triangles] + [o.triangles for o in others]
        return Mesh(np.concatenate(parts, axis=0), provenance or self.provenance)

    # topology -----------------------------------------------------------

    def _weld(self):
        if self._topology is None:
            flat = self.vertices
            uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
            faces = inverse.reshape(-1, 3)
            self._topology = (uniq, faces)
        return self._topology

    def boundary_edges(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """
        Directed edges left over after pairing each edge with an opposite one.

        Vertices are welded on exact coordinates, which is what every
        writer in this package produces for shared edges. Several shells
        touching along an edge are fine as long as every directed edge
        is balanced by the same number of reversed edges.
        """
        if len(self) == 0:
            return []
        uniq, faces = self._weld()
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        edges = edges[edges[:, 0] != edges[:, 1]]
        counts: dict[tuple[int, int], int] = {}
        for a, b in map(tuple, edges.tolist()):
            counts[(a, b)] = counts.get((a, b), 0) + 1
        bad = []
        for (a, b), n in counts.items():
            surplus = n - counts.get((b, a), 0)
            bad.extend([(uniq[a], uniq[b])] * max(surplus, 0))
        return bad

    @property
    def is_closed(self) -> bool:
        return len(self) > 0 and not self.boundary_edges()


def signed_volume(mesh: Mesh, check_closed: bool = True) -> float:
    """
    Enclosed volume by the divergence theorem.

    Positive for outward-wound closed meshes; raises ``MeshNotClosed``
    listing the boundary edges otherwise.
    """
    if len(mesh) == 0:
        raise MeshError("empty mesh")
    if check_closed:
        bad = mesh.boundary_edges()
        if bad:
            raise MeshNotClosed(bad)
    t = mesh.triangles
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def apply_transform(mesh: Mesh, t: RigidTransform) -> Mesh:
    tri = t.apply_points(mesh.vertices).reshape(-1, 3, 3)
    return Mesh(tri, mesh.provenance)


def translate(mesh: Mesh, offset) -> Mesh:
    return Mesh(mesh.triangles + np.asarray(offset, dtype=np.float64), mesh.provenance)


def drop_to_bed(mesh: Mesh) -> Mesh:
    """Translate along Z so the lowest vertex sits on z = 0."""
    if len(mesh) == 0:
        raise MeshError("empty mesh")
    zmin = mesh.vertices[:, 2].min()
    if zmin == 0.0:
        return mesh
    tri = mesh.triangles.copy()
    tri[:, :, 2] -= zmin
    # snap the bed contact exactly; float subtraction can leave -0.0 or ulps
    tri[:, :, 2][np.abs(tri[:, :, 2]) < 1e-12] = 0.0
    return Mesh(tri, mesh.provenance)


# STL input/output -------------------------------------------------------

def _looks_binary(data: bytes) -> bool:
    if len(data) < _HEADER_SIZE + 4:
        return False
    (count,) = struct.unpack_from("<I", data, _HEADER_SIZE)
    if len(data) == _HEADER_SIZE + 4 + 50 * count:
        return True
    return not data.lstrip()[:5].lower() == b"solid"


def _finish(tri: np.ndarray, source: str) -> Mesh:
    if len(tri) == 0:
        raise MeshError(f"{source} STL contains no triangles")
    if not np.all(np.isfinite(tri)):
        raise MeshError(f"{source} STL contains non-finite coordinates")
    _, areas = _face_normals(tri)
    keep = areas >= DEGENERATE_AREA
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d degenerate triangles", dropped)
    if not keep.any():
        raise MeshError(f"{source} STL contains only degenerate triangles")
    return Mesh(tri[keep], dropped=dropped)


def parse_stl(data: bytes) -> Mesh:
    """
    Parse binary or ASCII STL.

    Stored facet normals are ignored; normals always follow the vertex
    winding. Degenerate facets are dropped with a logged warning and
    counted in ``Mesh.dropped``.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise MeshError("STL input must be bytes")
    data = bytes(data)
    if _looks_binary(data):
        return _parse_binary(data)
    return _parse_ascii(data)


def _parse_binary(data: bytes) -> Mesh:
    if len(data) < _HEADER_SIZE + 4:
        raise MeshError("truncated binary STL header")
    (count,) = struct.unpack_from("<I", data, _HEADER_SIZE)
    body = len(data) - _HEADER_SIZE - 4
    if body < 50 * count:
        raise MeshError(f"truncated binary STL: {count} triangles declared, {body // 50} present")
    if body != 50 * count:
        raise MeshError(f"triangle count mismatch: {count} declared, body holds {body / 50:g}")
    rec = np.frombuffer(data, dtype=_RECORD_DTYPE, count=count, offset=_HEADER_SIZE + 4)
    tri = rec["vertices"].astype(np.float64)
    return _finish(tri, "binary")


_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(r"\S+")


def _parse_ascii(data: bytes) -> Mesh:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshError(f"ASCII STL is not ASCII: {exc}") from None
    tokens = _TOKEN.findall(text)
    if not tokens or tokens[0].lower() != "solid":
        raise MeshError("ASCII STL must start with 'solid'")
    verts: list[list[float]] = []
    i = 1
    # skip the optional solid name
    while i < len(tokens) and tokens[i].lower() not in ("facet", "endsolid"):
        i += 1
    n = len(tokens)

    def expect(word):
        nonlocal i
        if i >= n or tokens[i].lower() != word:
            got = tokens[i] if i < n else "end of file"
            raise MeshError(f"ASCII STL: expected {word!r}, got {got!r}")
        i += 1

    def number():
        nonlocal i
        if i >= n or not re.fullmatch(_FLOAT, tokens[i]):
            got = tokens[i] if i < n else "end of file"
            raise MeshError(f"ASCII STL: unparseable number {got!r}")
        i += 1
        return float(tokens[i - 1])

    while i < n and tokens[i].lower() == "facet":
        i += 1
        expect("normal")
        for _ in range(3):
            number()
        expect("outer")
        expect("loop")
        for _ in range(3):
            expect("vertex")
            verts.append([number(), number(), number()])
        expect("endloop")
        expect("endfacet")
    if i >= n or tokens[i].lower() != "endsolid":
        got = tokens[i] if i < n else "end of file"
        raise MeshError(f"ASCII STL: expected 'endsolid', got {got!r}")
    tri = np.array(verts, dtype=np.float64).reshape(-1, 3, 3)
    return _finish(tri, "ASCII")


def write_stl(mesh: Mesh, format: str = "binary") -> bytes:
    """Serialize a mesh; ``format`` is ``binary`` or ``ascii``."""
    if len(mesh) == 0:
        raise MeshError("cannot write an empty mesh")
    if format == "binary":
        tri32 = mesh.triangles.astype(np.float32)
        # normals from the rounded vertices so parse -> write is bit-exact
        normals, _ = _face_normals(tri32.astype(np.float64))
        rec = np.zeros(len(mesh), dtype=_RECORD_DTYPE)
        rec["normal"] = normals.astype(np.float32)
        rec["vertices"] = tri32
        header = STL_BANNER.ljust(_HEADER_SIZE, b" ")
        return header + struct.pack("<I", len(mesh)) + rec.tobytes()
    if format == "ascii":
        lines = ["solid stlstream"]
        for n, t in zip(mesh.normals, mesh.triangles):
            lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
            lines.append("    outer loop")
            for v in t:
                lines.append(f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append("endsolid stlstream")
        return ("\n".join(lines) + "\n").encode("ascii")
    raise MeshError(f"unknown STL format {format!r}")
