import math

import numpy as np
import pytest
import shapely
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import Polygon, box

from conftest import corpus
from stlstream import shapes
from stlstream.config import MachineSpec, PrintConfig
from stlstream.gcode import layer_stats, validate
from stlstream.mesh import Mesh, translate
from stlstream.sectioner import prepare_mesh, section_job, section_mesh
from stlstream.slicer import (
    SliceError, Toolpath, cross_section, generate_infill, generate_perimeters, slice_mesh,
    slice_slab, split_guide,
)

M = MachineSpec()


def cfg(**kw):
    return PrintConfig(**kw)


def polygon_area(c):
    x, y = c[:, 0], c[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def test_cube_section_is_square():
    (c,) = cross_section(shapes.cube(10), 5.0)
    assert polygon_area(c) == pytest.approx(100.0)
    assert np.allclose(c.min(axis=0), [0, 0]) and np.allclose(c.max(axis=0), [10, 10])


def test_tube_section_orientation():
    rings = cross_section(shapes.tube(5, 3, 6), 3.0)
    areas = sorted(polygon_area(r) for r in rings)
    assert len(rings) == 2
    assert areas[0] < 0 < areas[1]


def test_cone_section_area():
    rings = cross_section(shapes.cone(5, 6), 3.0)
    assert sum(polygon_area(r) for r in rings) == pytest.approx(math.pi * 2.5 ** 2, rel=0.02)


def test_open_mesh_section_reports_gap():
    mesh = Mesh(shapes.cube(10).triangles[:-2])
    with pytest.raises(SliceError, match="gap|open"):
        cross_section(mesh, 5.0)


def test_one_perimeter_offset():
    (loop,) = generate_perimeters([box(0, 0, 10, 10)], cfg(perimeter_count=1), M)
    assert loop.closed
    lo, hi = loop.points.min(axis=0), loop.points.max(axis=0)
    assert np.allclose(hi - lo, [9.6, 9.6])


def test_no_perimeters_and_slivers():
    assert generate_perimeters([box(0, 0, 10, 10)], cfg(perimeter_count=0), M) == []
    assert generate_perimeters([box(0, 0, 10, 0.3)], cfg(perimeter_count=2), M) == []


def test_infill_line_count_at_full_density():
    paths = generate_infill([box(0, 0, 10, 10)], cfg(perimeter_count=0, fill_density=1.0, fill_angle=0.0), M, 0)
    assert len(paths) == math.floor(10 / 0.45) + 1
    ys = sorted(p.points[0, 1] for p in paths)
    assert np.allclose(np.diff(ys), 0.45)
    assert all(np.isclose(p.points[0, 1], p.points[1, 1]) for p in paths)


def test_infill_density_zero_and_parity():
    assert generate_infill([box(0, 0, 10, 10)], cfg(fill_density=0.0), M, 0) == []
    odd = generate_infill([box(0, 0, 10, 10)], cfg(perimeter_count=0, fill_angle=0.0), M, 1)
    assert all(np.isclose(p.points[0, 0], p.points[1, 0]) for p in odd)


@given(st.floats(0.1, 1.0), st.floats(0, 180), st.integers(0, 3))
def test_infill_stays_inside_region(density, angle, perims):
    region = Polygon([(0, 0), (12, 0), (12, 4), (4, 4), (4, 12), (0, 12)])
    config = cfg(fill_density=density, fill_angle=angle, perimeter_count=perims)
    grown = region.buffer(1e-6)
    for p in generate_infill([region], config, M, 0) + generate_perimeters([region], config, M):
        assert grown.contains(shapely.geometry.LineString(p.points))


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_infill_is_translation_invariant(dx, dy):
    region = Polygon(shapes.gear_outline())
    config = cfg(fill_density=0.5, fill_angle=30.0)
    a = generate_infill([region], config, M, 0)
    b = generate_infill([shapely.affinity.translate(region, dx, dy)], config, M, 0)
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert np.allclose(p.points + [dx, dy], q.points, atol=1e-6)


def test_toolpath_invariants():
    with pytest.raises(ValueError):
        Toolpath("infill", np.zeros((1, 2)))
    with pytest.raises(ValueError):
        Toolpath("skirt", np.zeros((2, 2)))
    assert Toolpath("infill", np.array([[0, 0], [3, 4.0]])).length == 5.0


def _slab(mesh, h, n):
    return section_mesh(mesh, h)[n]


def test_layer_z_rule():
    cube = translate(shapes.cube(10), (50, 50, 0))
    for n, z in [(0, 0.3), (7, 2.4)]:
        prog = slice_slab(_slab(cube, 0.3, n), cfg().at_layer(n), M)
        assert {c.get("Z") for c in prog.commands if c.code == "G1"} == {round(z, 6)}


def test_volumetric_extrusion_oracle():
    # deposited volume ~ slab volume; measured ratio is 1.010
    slab = _slab(translate(shapes.cube(10), (50, 50, 0)), 0.3, 0)
    (stats,) = layer_stats(slice_slab(slab, cfg(), M))
    want = 10 * 10 * 0.3 / M.filament_area
    assert stats.filament == pytest.approx(want, rel=0.10)


def test_sliced_layers_validate_and_are_deterministic():
    mesh = prepare_mesh(shapes.t_shape(), 0.3, bed=(M.bed_x, M.bed_y))
    slabs = section_job(mesh, 0.3)
    for s in slabs[::5]:
        prog = slice_slab(s, cfg().at_layer(s.index), M)
        assert validate(prog, M).accepted
        assert prog.to_text() == slice_slab(s, cfg().at_layer(s.index), M).to_text()


def test_guide_printed_last_and_separable():
    mesh = prepare_mesh(shapes.cone(5, 6), 0.3, bed=(M.bed_x, M.bed_y))
    with_guide = section_job(mesh, 0.3)[4]
    bare = section_job(mesh, 0.3, guide=None)[4]
    config = cfg().at_layer(4)
    a = slice_slab(with_guide, config, M)
    b = slice_slab(bare, config, M)
    guide = a.guide_indices
    assert guide and guide == list(range(guide[0], guide[-1] + 1))
    (sa,), (sb,) = layer_stats(a), layer_stats(b)
    assert sa.extruded_length == pytest.approx(sb.extruded_length, abs=1e-6)
    assert sa.guide_length > 0 and sb.guide_length == 0


def test_split_guide_geometry():
    frame = box(0, 0, 30, 30).difference(box(1, 1, 29, 29))
    part, dot = box(10, 10, 20, 20), box(32, 32, 34, 34)
    body, guide = split_guide([frame, part, dot])
    assert body == [part] and len(guide) == 2
    # a plain washer with nothing inside is not a guide
    body, guide = split_guide([frame])
    assert guide == []


def test_slice_errors():
    cube = translate(shapes.cube(10), (50, 50, 0))
    slab = _slab(cube, 0.3, 2)
    with pytest.raises(SliceError, match="does not match"):
        slice_slab(slab, cfg().at_layer(3), M)
    with pytest.raises(SliceError, match="outside machine range"):
        slice_slab(_slab(cube, 0.5, 0), cfg(layer_height=0.5), M)
    with pytest.raises(SliceError, match="bed"):
        slice_slab(_slab(translate(shapes.cube(10), (215, 0, 0)), 0.3, 0), cfg(), M)


def test_slice_mesh_layers_match_slab_count():
    mesh = prepare_mesh(shapes.cube(3), 0.3, supports=None, guide=None, bed=(M.bed_x, M.bed_y))
    prog = slice_mesh(mesh, cfg(), M)
    stats = layer_stats(prog)
    assert [s.index for s in stats] == list(range(10))
    assert [s.z for s in stats] == pytest.approx([0.3 * (n + 1) for n in range(10)])
    text = prog.to_text()
    assert text.count("G28") == 1 and text.count("M84") == 1
    assert validate(prog, M).accepted


@pytest.mark.parametrize("name", sorted(corpus()))
def test_every_corpus_model_slices(name):
    mesh = prepare_mesh(corpus()[name], 0.3, bed=(M.bed_x, M.bed_y))
    slabs = section_job(mesh, 0.3)
    for s in (slabs[0], slabs[len(slabs) // 2], slabs[-1]):
        prog = slice_slab(s, cfg(fill_density=0.7).at_layer(s.index), M)
        assert validate(prog, M).accepted
