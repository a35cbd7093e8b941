import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import corpus
from stlstream import shapes
from stlstream.mesh import Mesh, MeshError, MeshNotClosed, RigidTransform, signed_volume, translate
from stlstream.sectioner import (
    GuideSpec, SupportSpec, generate_supports, guide_outline, prepare_mesh, section_job,
    section_mesh, slab_bounds, slab_count,
)


def test_three_mm_part_gives_ten_slabs():
    slabs = section_mesh(shapes.box((0, 0, 0), (5, 5, 3.0)), 0.3)
    assert len(slabs) == 10
    assert [s.filename for s in slabs][-1] == "layer_9.stl"


@given(st.integers(1, 5000), st.integers(5, 60))
def test_slab_count_matches_integer_ceiling(height_um10, h_um10):
    # heights and layer heights on a 0.01 mm grid; exact integer ceiling as oracle
    height, h = height_um10 / 100, h_um10 / 100
    assert slab_count(height, h) == -(-height_um10 // h_um10)


def test_slab_bounds_top_slab_thinner():
    bounds = slab_bounds(1.0, 0.3)
    assert len(bounds) == 4
    assert bounds[-1] == pytest.approx((0.9, 1.0))


@pytest.mark.parametrize("name", ["cube", "cone", "tube", "t_shape", "table", "gear"])
def test_slabs_closed_and_volume_conserved(name):
    mesh = corpus()[name]
    slabs = section_mesh(mesh, 0.3)
    for s in slabs:
        assert s.body.is_closed
        zs = s.body.vertices[:, 2]
        assert zs.min() >= s.z_lo and zs.max() <= s.z_hi
    total = sum(signed_volume(s.body) for s in slabs)
    assert total == pytest.approx(signed_volume(mesh), rel=1e-9)


@given(st.floats(0.5, 8), st.floats(0.5, 8), st.floats(0.2, 5), st.floats(0.1, 0.4),
       st.floats(-30, 30), st.floats(-30, 30))
def test_volume_conservation_rotated_boxes(sx, sy, sz, h, a, b):
    mesh = prepare_mesh(shapes.box((0, 0, 0), (sx, sy, sz)), h, RigidTransform.from_euler(a, b, 0),
                        supports=None, guide=None)
    slabs = section_mesh(mesh, h)
    assert len(slabs) == slab_count(mesh.bounds.max[2], h)
    assert sum(signed_volume(s.body) for s in slabs) == pytest.approx(signed_volume(mesh), rel=1e-7)


def test_no_supports_for_upright_cube():
    cube = shapes.cube(10)
    assert generate_supports(cube) is cube


def test_t_shape_arms_get_pillars():
    t = shapes.t_shape()
    with_supports = generate_supports(t, SupportSpec(45.0, 2.0, 0.3), 0.3)
    assert with_supports.provenance == "support-augmented"
    extra = with_supports.triangles[len(t):]
    assert len(extra) % 12 == 0 and len(extra) > 0
    pillars = extra.reshape(-1, 12, 3, 3)
    for p in pillars:
        lo, hi = p.reshape(-1, 3).min(axis=0), p.reshape(-1, 3).max(axis=0)
        assert lo[2] == 0.0
        # arm underside at z=6, clearance 0.3
        assert hi[2] == pytest.approx(5.7)
        # pillars sit under the arms, not under the stem
        assert hi[0] <= -2 + 1e-9 or lo[0] >= 2 - 1e-9 or not (lo[0] >= -2 and hi[0] <= 2)
    assert with_supports.is_closed


def test_steep_wall_needs_no_support():
    # a cone's sides point up; nothing overhangs
    assert generate_supports(shapes.cone(5, 6)).triangles.shape == shapes.cone(5, 6).triangles.shape


def test_supports_require_bed_contact():
    with pytest.raises(MeshError):
        generate_supports(translate(shapes.cube(1), (0, 0, 1)))


def test_guide_outline_geometry():
    job = shapes.cube(10).bounds
    outer, inner, dot = guide_outline(GuideSpec(margin=2, wall=1, dot_size=2, dot_corner="NE"), job)
    assert np.allclose(inner.min[:2], [-2, -2]) and np.allclose(inner.max[:2], [12, 12])
    assert np.allclose(outer.min[:2], [-3, -3]) and np.allclose(outer.max[:2], [13, 13])
    assert np.allclose(dot.min[:2], [15, 15]) and np.allclose(dot.max[:2], [17, 17])
    _, _, sw = guide_outline(GuideSpec(dot_corner="SW"), job)
    assert np.allclose(sw.max[:2], [-5, -5])


def test_every_slab_has_same_guide_footprint():
    mesh = prepare_mesh(shapes.cone(5, 6), 0.3, bed=(220, 220))
    slabs = section_job(mesh, 0.3)
    boxes = {(tuple(s.guide.bounds.min[:2]), tuple(s.guide.bounds.max[:2])) for s in slabs}
    assert len(boxes) == 1
    for s in slabs:
        assert s.mesh.is_closed
        assert s.mesh.provenance == "sectioned"


def test_prepare_centres_job_footprint_on_bed():
    mesh = prepare_mesh(shapes.cube(10), 0.3, bed=(220, 220))
    outer, _, dot = guide_outline(GuideSpec(), mesh.bounds)
    fp = outer.union(dot)
    assert np.allclose((fp.min[:2] + fp.max[:2]) / 2, [110, 110])


def test_section_rejects_bad_input():
    with pytest.raises(MeshError):
        section_mesh(translate(shapes.cube(1), (0, 0, 2)), 0.3)
    with pytest.raises(MeshNotClosed):
        section_mesh(Mesh(shapes.cube(1).triangles[:-1]), 0.3)
    with pytest.raises(ValueError):
        section_mesh(shapes.cube(1), 0.05, layer_range=(0.1, 0.4))
    with pytest.raises(ValueError):
        section_mesh(shapes.cube(1), 0.0)


def test_rotated_t_shape_with_supports_sections_cleanly():
    mesh = prepare_mesh(shapes.t_shape(), 0.3, RigidTransform.from_euler(0, 0, 30), bed=(220, 220))
    slabs = section_job(mesh, 0.3)
    assert all(s.mesh.is_closed for s in slabs)
    assert len(slabs) == math.ceil(8 / 0.3)


def test_cube_half_mm_slabs_are_boxes():
    slabs = section_mesh(shapes.cube(10), 0.5)
    assert len(slabs) == 20
    for s in slabs:
        assert signed_volume(s.body) == pytest.approx(50.0, abs=1e-6)
        assert np.allclose(s.body.bounds.extents, [10, 10, 0.5])


def test_cone_slabs_match_frustum_volumes():
    # true circular frustum as oracle; the 64-gon loses about 0.16 %
    r, height, h = 5.0, 6.0, 0.6
    slabs = section_mesh(shapes.cone(r, height), h)
    assert len(slabs) == 10
    for s in slabs:
        r0 = r * (1 - s.z_lo / height)
        r1 = r * (1 - s.z_hi / height)
        want = math.pi * (s.z_hi - s.z_lo) * (r0 * r0 + r0 * r1 + r1 * r1) / 3
        assert signed_volume(s.body) == pytest.approx(want, rel=0.02)


def test_slab_vertices_confined_to_interval():
    for s in section_mesh(shapes.gear(), 0.3):
        zs = s.body.vertices[:, 2]
        assert zs.min() >= s.z_lo - 1e-6 and zs.max() <= s.z_hi + 1e-6


def test_table_support_audit():
    spec, h = SupportSpec(45.0, 2.0, 0.3), 0.3
    table = shapes.table()
    out = generate_supports(table, spec, h)
    pillars = out.triangles[len(table):].reshape(-1, 12, 3, 3).reshape(-1, 36, 3)
    lo, hi = pillars.min(axis=1), pillars.max(axis=1)
    centres = (lo[:, :2] + hi[:, :2]) / 2
    assert np.all(lo[:, 2] == 0.0)
    cos_t = math.cos(math.radians(45.0))
    down = (-table.normals[:, 2] > cos_t) & (table.triangles.mean(axis=1)[:, 2] > h)
    assert down.any()
    for c in table.triangles[down].mean(axis=1):
        d = np.hypot(*(centres - c[:2]).T)
        k = int(np.argmin(d))
        assert d[k] <= spec.pillar_xy / math.sqrt(2) + 1e-9
        assert hi[k, 2] <= c[2] - spec.clearance + 1e-9


def test_guide_slabs_differ_by_layer_translation():
    mesh = prepare_mesh(shapes.cube(20), 0.3, supports=None, bed=(220, 220))
    a, b = section_job(mesh, 0.3)[3:5]
    assert np.allclose(b.guide.triangles, a.guide.triangles + np.array([0, 0, 0.3]), atol=1e-12)
    outer, _, _ = guide_outline(GuideSpec(margin=2, wall=1), mesh.bounds)
    assert np.allclose(outer.extents[:2], [26, 26])


def test_t_shape_job_slab_aabb_constant():
    mesh = prepare_mesh(shapes.t_shape(), 0.3, bed=(220, 220))
    boxes = np.array([np.r_[s.mesh.bounds.min[:2], s.mesh.bounds.max[:2]] for s in section_job(mesh, 0.3)])
    assert np.abs(boxes - boxes[0]).max() <= 1e-9
