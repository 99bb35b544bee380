import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionchannel.errors import ElementInversionError, GeometryError, InvalidMeshError, MeshFormatError
from ionchannel.mesh import (FACET_TAGS, REGIONS, ChannelGeometry, Mesh, build_channel_mesh, build_cylinder_mesh,
                             deform_mesh, extract_region, quality, read_mesh, write_mesh)

REG_TET = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)


def single_tet(vertices, tet=(0, 1, 2, 3)):
    faces = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    t = np.array(tet)
    return Mesh(vertices, [tet], [3], t[faces], [0, 0, 0, 0])


def oriented(p):
    from ionchannel.mesh import signed_volumes
    return single_tet(p) if signed_volumes(p, np.array([[0, 1, 2, 3]]))[0] > 0 else single_tet(p[[1, 0, 2, 3]])


def euler_characteristic(mesh):
    return mesh.n_vertices - len(mesh.edges()) + len(mesh.faces()) - mesh.n_tets


def test_block_topology_is_a_ball(block_mesh):
    assert euler_characteristic(block_mesh) == 1


def test_block_volume_matches_box(block_mesh):
    vol = block_mesh.volumes().sum()
    exact = (2 * 2e-9) ** 2 * 10e-9
    assert abs(vol - exact) / exact < 1e-12


def test_regions_and_tags(block_mesh):
    present = set(np.unique(block_mesh.regions).tolist())
    assert present == {0, 1, 2, 3}
    # middle third of the block is Omega2
    cz = block_mesh.vertices[block_mesh.tets].mean(axis=1)[:, 2]
    om2 = block_mesh.region_mask("Omega2")
    assert cz[om2].min() > 10e-9 / 3 - 1e-20 and cz[om2].max() < 2 * 10e-9 / 3
    # SideA/SideB lie on the channel cross-sections only
    for tag, z in (("SideA", 0.0), ("SideB", 10e-9)):
        f = block_mesh.facets_with(tag)
        p = block_mesh.vertices[f]
        assert np.allclose(p[:, :, 2], z, atol=1e-20)
        # staircase cross-section: inside the square circumscribing the disc
        assert np.abs(p[:, :, :2]).max() <= 1e-9 * (1 + 1e-12)
    sub, vmap = extract_region(block_mesh, "Channel")
    chan_faces = {tuple(sorted(vmap[f])) for f in sub.faces().tolist()}
    for tag in ("SideA", "SideB"):
        assert all(tuple(sorted(f)) in chan_faces for f in block_mesh.facets_with(tag).tolist())


def test_side_area_close_to_disc():
    areas = []
    for res in (0.5e-9, 0.25e-9):
        m = build_channel_mesh(ChannelGeometry(4e-9, 2e-9, 2e-9, res))
        areas.append(m.facet_areas("SideA").sum())
    disc = math.pi * 1e-9 ** 2
    errs = [abs(a - disc) / disc for a in areas]
    # area-matched cross-section: small error that does not grow under refinement
    assert errs[0] < 0.05 and errs[1] <= errs[0] + 1e-12


def test_fine_mesh_element_count_is_order_5e4():
    m = build_channel_mesh(ChannelGeometry(10e-9, 2e-9, 2e-9, 0.25e-9))
    assert 2e4 <= m.n_tets <= 2e5


def test_too_coarse_resolution():
    with pytest.raises(GeometryError):
        ChannelGeometry(10e-9, 2e-9, 2e-9, 2e-9)
    with pytest.raises(GeometryError):
        ChannelGeometry(10e-9, -2e-9, 2e-9, 0.1e-9)


def test_quality_regular_tet():
    q = quality(oriented(REG_TET))
    assert abs(q.max_ratio - math.sqrt(6)) < 1e-12
    assert abs(q.h - math.sqrt(8)) < 1e-12
    assert abs(q.min_dihedral_angle - math.acos(1 / 3)) < 1e-12


def test_quality_scale_invariant():
    q1 = quality(oriented(REG_TET))
    q2 = quality(oriented(10 * REG_TET))
    assert abs(q1.max_ratio - q2.max_ratio) < 1e-12


def test_quality_sliver():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1e-3]], dtype=float)
    assert quality(oriented(p)).max_ratio > 100


def test_quality_rejects_degenerate():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    m = Mesh(p, [[0, 1, 2, 3]], [3], [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], [0] * 4, validate=False)
    with pytest.raises(InvalidMeshError):
        quality(m)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2 * math.pi))
def test_quality_invariant_under_similarity(scale, tx, ty, tz, angle):
    p = np.array([[0, 0, 0], [1, 0.1, 0], [0.2, 1.1, 0], [0.3, 0.2, 0.9]])
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    q0 = quality(oriented(p))
    q1 = quality(oriented(scale * p @ R.T + [tx, ty, tz]))
    assert abs(q0.max_ratio - q1.max_ratio) < 1e-9 * q0.max_ratio
    assert abs(q0.min_dihedral_angle - q1.min_dihedral_angle) < 1e-9


def test_max_ratio_lower_bound(block_mesh):
    assert quality(block_mesh).max_ratio >= math.sqrt(6) - 1e-12


def test_deform_zero_is_identity(block_mesh):
    m = deform_mesh(block_mesh, np.zeros((block_mesh.n_vertices, 3)))
    assert np.array_equal(m.vertices, block_mesh.vertices)
    assert np.array_equal(m.tets, block_mesh.tets)
    assert np.array_equal(m.facet_tags, block_mesh.facet_tags)


def test_deform_translation_keeps_volumes(block_mesh):
    d = np.tile([1e-9, 0, 0], (block_mesh.n_vertices, 1))
    m = deform_mesh(block_mesh, d)
    v0, v1 = block_mesh.volumes(), m.volumes()
    assert np.max(np.abs(v1 - v0) / v0) < 1e-10


def test_radial_contraction(cylinder):
    x = cylinder.vertices
    d = -0.3 * np.column_stack([x[:, 0], x[:, 1], np.zeros(len(x))])
    m = deform_mesh(cylinder, d)
    assert np.all(m.volumes() < cylinder.volumes())
    # the map scales cross-sections by 0.7: volume ratio 0.49 exactly
    assert np.allclose(m.volumes() / cylinder.volumes(), 0.49, rtol=1e-12)


def test_deform_inversion_reports_element(cylinder):
    x = cylinder.vertices
    d = np.column_stack([-2 * x[:, 0], np.zeros(len(x)), np.zeros(len(x))])
    with pytest.raises(ElementInversionError) as info:
        deform_mesh(cylinder, d)
    assert info.value.element is not None and info.value.volume <= 0


def test_conformity_and_tags(block_mesh):
    from ionchannel.mesh import _LOCAL_FACES
    f = np.sort(block_mesh.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1)
    _, cnt = np.unique(f, axis=0, return_counts=True)
    assert set(cnt.tolist()) <= {1, 2}
    assert (cnt == 1).sum() == len(block_mesh.facets)
    assert np.all(block_mesh.signed_volumes() > 0)


def test_extract_region_channel(block_mesh):
    sub, vmap = extract_region(block_mesh, "Channel")
    assert np.all(sub.regions == REGIONS.index("Channel"))
    assert np.array_equal(sub.vertices, block_mesh.vertices[vmap])
    tags = set(np.unique(sub.facet_tags).tolist())
    assert tags == {FACET_TAGS.index(t) for t in ("SideA", "SideB", "LateralWall")}
    assert abs(sub.facet_areas("SideA").sum() - block_mesh.facet_areas("SideA").sum()) < 1e-30


def test_cylinder_mesh_tags(cylinder):
    assert set(np.unique(cylinder.facet_tags).tolist()) == {0, 1, 2}
    assert np.isclose(cylinder.vertices[:, 2].max(), 1.0)


def test_text_round_trip(tmp_path, block_mesh):
    path = tmp_path / "m.txt"
    write_mesh(block_mesh, path)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, block_mesh.vertices)
    assert np.array_equal(back.tets, block_mesh.tets)
    assert np.array_equal(back.regions, block_mesh.regions)
    assert np.array_equal(back.facet_tags, block_mesh.facet_tags)


def test_text_format_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("vertices 1\n0 0\n")
    with pytest.raises(MeshFormatError) as info:
        read_mesh(bad)
    assert info.value.line == 2
    bad.write_text("vertices 4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\ntets 1\n0 1 2 3 Nowhere\nfacets 0\n")
    with pytest.raises(MeshFormatError) as info:
        read_mesh(bad)
    assert info.value.line == 7
