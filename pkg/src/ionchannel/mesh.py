"""Tetrahedral meshes of the channel geometry.

The generator builds a structured extruded mesh.  The cross-section is a
rectangular grid split into right triangles, mirrored quadrant by quadrant so
that the triangles cut by the channel boundary follow the circle.  Every base
triangle is right-angled at its middle-ranked vertex, and each prism is split
into three tetrahedra by the global vertex order.  With this construction all
off-diagonal entries of the P1 Laplacian are nonpositive, which is the mesh
hypothesis of the exponentially fitted (EAFE) discrete maximum principle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ElementInversionError, GeometryError, InvalidMeshError, MeshFormatError

logger = logging.getLogger(__name__)

REGIONS = ("Omega1", "Omega2", "Omega3", "Channel")
FACET_TAGS = ("SideA", "SideB", "LateralWall", "OuterWall")

_LOCAL_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
_LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


@dataclass(frozen=True)
class ChannelGeometry:
    """Cylindrical channel of given length/diameter inside a square block (SI units)."""

    channel_length: float = 10e-9
    channel_diameter: float = 2e-9
    box_half_width: float = 2e-9
    resolution: float = 0.5e-9

    def __post_init__(self):
        for name in ("channel_length", "channel_diameter", "box_half_width", "resolution"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise GeometryError(f"{name} must be strictly positive, got {v!r}")
        if self.resolution >= self.channel_diameter:
            raise GeometryError(
                "resolution too coarse to resolve the cylinder: fewer than 2 elements "
                f"across the diameter ({self.resolution:g} >= {self.channel_diameter:g})"
            )
        if self.box_half_width <= self.channel_diameter / 2:
            raise GeometryError("box_half_width must exceed the channel radius")


@dataclass(frozen=True)
class MeshQualityReport:
    h: float
    max_ratio: float
    min_dihedral_angle: float


class Mesh:
    """Immutable tetrahedral mesh with region and boundary tags.

    Parameters
    ----------
    vertices : (nv, 3) float array, meters
    tets : (nt, 4) int array, positively oriented
    regions : (nt,) int array of indices into ``REGIONS``
    facets : (nf, 3) int array of boundary triangles
    facet_tags : (nf,) int array of indices into ``FACET_TAGS``
    """

    def __init__(self, vertices, tets, regions, facets, facet_tags, validate=True):
        self.vertices = _frozen(np.asarray(vertices, dtype=float).reshape(-1, 3))
        self.tets = _frozen(np.asarray(tets, dtype=np.int64).reshape(-1, 4))
        self.regions = _frozen(np.asarray(regions, dtype=np.int8).reshape(-1))
        self.facets = _frozen(np.asarray(facets, dtype=np.int64).reshape(-1, 3))
        self.facet_tags = _frozen(np.asarray(facet_tags, dtype=np.int8).reshape(-1))
        self._cache = {}
        if validate:
            self.check()

    # basic sizes
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def signed_volumes(self):
        if "svol" not in self._cache:
            self._cache["svol"] = _frozen(signed_volumes(self.vertices, self.tets))
        return self._cache["svol"]

    def volumes(self):
        return np.abs(self.signed_volumes())

    def edges(self):
        """Unique sorted vertex pairs, shape (ne, 2)."""
        if "edges" not in self._cache:
            e = self.tets[:, _LOCAL_EDGES].reshape(-1, 2)
            e = np.sort(e, axis=1)
            self._cache["edges"] = _frozen(np.unique(e, axis=0))
        return self._cache["edges"]

    def faces(self):
        """Unique sorted triangles, shape (nf, 3)."""
        f = np.sort(self.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1)
        return np.unique(f, axis=0)

    def region_mask(self, name):
        return self.regions == REGIONS.index(name)

    def facets_with(self, tag):
        return self.facets[self.facet_tags == FACET_TAGS.index(tag)]

    def boundary_vertices(self, *tags):
        if not tags:
            return np.unique(self.facets)
        sel = np.isin(self.facet_tags, [FACET_TAGS.index(t) for t in tags])
        return np.unique(self.facets[sel])

    def facet_areas(self, tag=None):
        f = self.facets if tag is None else self.facets_with(tag)
        p = self.vertices
        return 0.5 * np.linalg.norm(np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]]), axis=1)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def check(self):
        """Raise InvalidMeshError unless orientation, conformity and tagging hold."""
        nv = self.n_vertices
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise InvalidMeshError("tet vertex index out of range")
        vol = self.signed_volumes()
        if np.any(vol <= 0):
            k = int(np.argmin(vol))
            raise InvalidMeshError(f"tet {k} has nonpositive signed volume {vol[k]:.3e}")
        if len(self.facet_tags) != len(self.facets):
            raise InvalidMeshError("facet tag count does not match facet count")
        if self.facet_tags.size and (self.facet_tags.min() < 0 or self.facet_tags.max() >= len(FACET_TAGS)):
            raise InvalidMeshError("facet tag out of range")
        if self.regions.size and (self.regions.min() < 0 or self.regions.max() >= len(REGIONS)):
            raise InvalidMeshError("region tag out of range")
        allf = np.sort(self.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1)
        uf, cnt = np.unique(allf, axis=0, return_counts=True)
        if np.any(cnt > 2):
            raise InvalidMeshError("non-conforming mesh: a face is shared by more than two tets")
        bnd = uf[cnt == 1]
        tagged = np.unique(np.sort(self.facets, axis=1), axis=0)
        if len(tagged) != len(self.facets):
            raise InvalidMeshError("duplicate boundary facet")
        if len(bnd) != len(tagged) or not np.array_equal(bnd, tagged):
            raise InvalidMeshError("boundary facets do not match the exposed faces of the tets")

    def with_vertices(self, vertices):
        return Mesh(vertices, self.tets, self.regions, self.facets, self.facet_tags, validate=False)


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def signed_volumes(p, tets):
    a = p[tets[:, 1]] - p[tets[:, 0]]
    b = p[tets[:, 2]] - p[tets[:, 0]]
    c = p[tets[:, 3]] - p[tets[:, 0]]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


# ---------------------------------------------------------------- generator


def _grid_lines(inner, h, half_width, outer_step):
    """Symmetric grid lines: uniform spacing h up to inner*h, then to half_width."""
    core = np.arange(-inner, inner + 1) * h
    if half_width is None:
        return core, np.arange(-inner, inner + 1, dtype=float)
    gap = half_width - inner * h
    if gap <= 1e-9 * half_width:
        raise GeometryError("box_half_width too small to contain the channel cross-section")
    n_out = max(1, int(math.ceil(gap / outer_step - 1e-9)))
    outer = inner * h + gap * np.arange(1, n_out + 1) / n_out
    outer[-1] = half_width
    lines = np.concatenate([-outer[::-1], core, outer])
    units = np.concatenate([-(inner + np.arange(n_out, 0, -1)), np.arange(-inner, inner + 1),
                            inner + np.arange(1, n_out + 1)]).astype(float)
    return lines, units


def cross_section(radius, cells_per_radius, half_width=None, outer_step=None):
    """Right-triangle cross-section of a disc of the given radius.

    Returns (points, triangles, in_channel, rank) where rank is the global
    vertex order used for the prism split.  The grid spacing is chosen so that
    the polygonal channel section has exactly the disc area.
    """
    m = int(cells_per_radius)
    if m < 1:
        raise GeometryError("need at least one cell per radius")
    # Triangles are selected in integer grid units; spacing is fixed afterwards.
    lines_u = np.arange(-m - (0 if half_width is None else 1), m + 1 + (0 if half_width is None else 1))
    tris_u, chan_u = _triangulate(lines_u.astype(float), lines_u.astype(float), m)
    area_units = 0.5 * np.count_nonzero(chan_u)
    h = radius * math.sqrt(math.pi / area_units)
    if half_width is None:
        xs, _ = _grid_lines(m, h, None, None)
    else:
        xs, _ = _grid_lines(m, h, half_width, outer_step or h)
    n = len(xs)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    center = (n - 1) // 2
    gi = ii - center
    gj = jj - center
    # Global order: |y| major, then decreasing |x|; ties are never in a common triangle.
    order = np.lexsort((gj, gi, -np.abs(gi), np.abs(gj)))
    rank = np.empty(n * n, dtype=np.int64)
    rank[order] = np.arange(n * n)
    pts = np.column_stack([xs[ii], xs[jj]])
    units = np.arange(n, dtype=float) - center
    tris, chan = _triangulate(units, units, m, index=lambda a, b: a * n + b)
    return pts, tris, chan, rank, h


def _triangulate(xu, yu, m, index=None):
    """Split each grid cell into two right triangles; flag those inside radius m."""
    nx, ny = len(xu), len(yu)
    if index is None:
        index = lambda a, b: a * ny + b  # noqa: E731
    tris = []
    chan = []
    for a in range(nx - 1):
        for b in range(ny - 1):
            v00, v10, v11, v01 = index(a, b), index(a + 1, b), index(a + 1, b + 1), index(a, b + 1)
            cx = 0.5 * (xu[a] + xu[a + 1])
            cy = 0.5 * (yu[b] + yu[b + 1])
            if (cx > 0) == (cy > 0):
                # anti-diagonal v10-v01
                local = ((v00, v10, v01, (xu[a], yu[b]), (xu[a + 1], yu[b]), (xu[a], yu[b + 1])),
                         (v10, v11, v01, (xu[a + 1], yu[b]), (xu[a + 1], yu[b + 1]), (xu[a], yu[b + 1])))
            else:
                local = ((v00, v10, v11, (xu[a], yu[b]), (xu[a + 1], yu[b]), (xu[a + 1], yu[b + 1])),
                         (v00, v11, v01, (xu[a], yu[b]), (xu[a + 1], yu[b + 1]), (xu[a], yu[b + 1])))
            for t in local:
                tris.append(t[:3])
                c = np.mean(np.array(t[3:]), axis=0)
                chan.append(bool(np.hypot(c[0], c[1]) < m))
    return np.array(tris, dtype=np.int64), np.array(chan, dtype=bool)


def _extrude(p2, tris, rank, z):
    """Extrude a 2D triangulation along z; split prisms by global vertex rank."""
    nv = len(p2)
    nl = len(z) - 1
    verts = np.column_stack([np.tile(p2, (nl + 1, 1)), np.repeat(z, nv)])
    srt = np.take_along_axis(tris, np.argsort(rank[tris], axis=1), axis=1)
    a, b, c = srt[:, 0], srt[:, 1], srt[:, 2]
    off = (np.arange(nl) * nv)[:, None]
    A, B, C = a + off, b + off, c + off
    A2, B2, C2 = A + nv, B + nv, C + nv
    t1 = np.stack([A, B, C, C2], axis=-1)
    t2 = np.stack([A, B, B2, C2], axis=-1)
    t3 = np.stack([A, A2, B2, C2], axis=-1)
    tets = np.stack([t1, t2, t3], axis=2).reshape(-1, 4)  # layer, triangle, piece
    vol = signed_volumes(verts, tets)
    neg = vol < 0
    tets[neg] = tets[neg][:, [1, 0, 2, 3]]
    layer = np.repeat(np.arange(nl), len(tris) * 3)
    tri = np.tile(np.repeat(np.arange(len(tris)), 3), nl)
    return verts, tets, layer, tri


def _boundary_faces(tets):
    f = tets[:, _LOCAL_FACES].reshape(-1, 3)
    fs = np.sort(f, axis=1)
    _, inv, cnt = np.unique(fs, axis=0, return_inverse=True, return_counts=True)
    once = cnt[inv.ravel()] == 1
    owner = np.repeat(np.arange(len(tets)), 4)[once]
    return f[once], owner


def _z_layers(length, resolution, multiple):
    nz = int(math.ceil(length / resolution - 1e-9))
    nz = max(multiple, multiple * int(math.ceil(nz / multiple)))
    return np.linspace(0.0, length, nz + 1)


def _cells_per_radius(radius, resolution):
    return max(1, int(math.ceil(radius / resolution - 1e-9)))


def build_channel_mesh(geom: ChannelGeometry) -> Mesh:
    """Block [-W, W]^2 x [0, L] containing the tagged cylindrical channel."""
    R = geom.channel_diameter / 2
    m = _cells_per_radius(R, geom.resolution)
    p2, tris, chan, rank, h = cross_section(R, m, geom.box_half_width, geom.resolution)
    z = _z_layers(geom.channel_length, geom.resolution, 3)
    verts, tets, layer, tri = _extrude(p2, tris, rank, z)
    nl = len(z) - 1
    third = np.minimum(3 * layer // nl, 2)
    regions = np.where(chan[tri], REGIONS.index("Channel"), third).astype(np.int8)
    faces, owner = _boundary_faces(tets)
    fz = verts[faces][:, :, 2]
    end0 = np.all(np.abs(fz) < 1e-12 * geom.channel_length, axis=1)
    end1 = np.all(np.abs(fz - geom.channel_length) < 1e-12 * geom.channel_length, axis=1)
    in_chan = regions[owner] == REGIONS.index("Channel")
    tags = np.full(len(faces), FACET_TAGS.index("OuterWall"), dtype=np.int8)
    tags[end0 & in_chan] = FACET_TAGS.index("SideA")
    tags[end1 & in_chan] = FACET_TAGS.index("SideB")
    mesh = Mesh(verts, tets, regions, faces, tags)
    logger.info("channel mesh: %d vertices, %d tets (h_xy=%.3g m, %d layers)", mesh.n_vertices, mesh.n_tets, h, nl)
    return mesh


def build_cylinder_mesh(length, diameter, resolution, layers=None) -> Mesh:
    """Channel-only cylinder (tags SideA, SideB, LateralWall)."""
    geom = ChannelGeometry(length, diameter, diameter, resolution)
    R = geom.channel_diameter / 2
    m = _cells_per_radius(R, resolution)
    p2, tris, chan, rank, _ = cross_section(R, m)
    tris = tris[chan]
    used = np.unique(tris)
    remap = -np.ones(len(p2), dtype=np.int64)
    remap[used] = np.arange(len(used))
    p2, tris, rank = p2[used], remap[tris], rank[used]
    if layers is None:
        z = _z_layers(length, resolution, 1)
    else:
        z = np.linspace(0.0, length, int(layers) + 1)
    verts, tets, _, _ = _extrude(p2, tris, rank, z)
    regions = np.full(len(tets), REGIONS.index("Channel"), dtype=np.int8)
    faces, _ = _boundary_faces(tets)
    return Mesh(verts, tets, regions, faces, _end_tags(verts, faces, length))


def _end_tags(verts, faces, length):
    fz = verts[faces][:, :, 2]
    tags = np.full(len(faces), FACET_TAGS.index("LateralWall"), dtype=np.int8)
    tags[np.all(np.abs(fz) < 1e-12 * length, axis=1)] = FACET_TAGS.index("SideA")
    tags[np.all(np.abs(fz - length) < 1e-12 * length, axis=1)] = FACET_TAGS.index("SideB")
    return tags


def build_box_mesh(lower, upper, n, lateral_tag="LateralWall") -> Mesh:
    """Structured box of right-triangle prisms; z-faces tagged SideA/SideB.

    ``n`` is the number of cells per direction (int or 3-tuple).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    nx, ny, nz = (n, n, n) if np.isscalar(n) else tuple(int(v) for v in n)
    xs = np.linspace(lower[0], upper[0], nx + 1)
    ys = np.linspace(lower[1], upper[1], ny + 1)
    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    p2 = np.column_stack([xs[ii.ravel()], ys[jj.ravel()]])
    rank = np.lexsort((ii.ravel(), jj.ravel()))
    rank = np.argsort(rank)
    tris = []
    for a in range(nx):
        for b in range(ny):
            v00, v10 = a * (ny + 1) + b, (a + 1) * (ny + 1) + b
            v01, v11 = v00 + 1, v10 + 1
            tris += [(v00, v10, v11), (v00, v11, v01)]
    tris = np.array(tris, dtype=np.int64)
    z = np.linspace(lower[2], upper[2], nz + 1)
    verts, tets, _, _ = _extrude(p2, tris, rank, z)
    regions = np.full(len(tets), REGIONS.index("Channel"), dtype=np.int8)
    faces, _ = _boundary_faces(tets)
    fz = verts[faces][:, :, 2]
    span = upper[2] - lower[2]
    tags = np.full(len(faces), FACET_TAGS.index(lateral_tag), dtype=np.int8)
    tags[np.all(np.abs(fz - lower[2]) < 1e-12 * span, axis=1)] = FACET_TAGS.index("SideA")
    tags[np.all(np.abs(fz - upper[2]) < 1e-12 * span, axis=1)] = FACET_TAGS.index("SideB")
    return Mesh(verts, tets, regions, faces, tags)


def extract_region(mesh: Mesh, *names):
    """Submesh of the given regions; newly exposed faces are tagged LateralWall.

    Returns (submesh, vertex_map) with ``vertex_map[i]`` the parent index of
    submesh vertex i.
    """
    codes = [REGIONS.index(n) for n in names]
    keep = np.isin(mesh.regions, codes)
    tets = mesh.tets[keep]
    vmap = np.unique(tets)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[vmap] = np.arange(len(vmap))
    sub_tets = remap[tets]
    faces, _ = _boundary_faces(sub_tets)
    parent = {tuple(sorted(f)): t for f, t in zip(remap[mesh.facets].tolist(), mesh.facet_tags.tolist())}
    tags = np.array([parent.get(tuple(sorted(f)), FACET_TAGS.index("LateralWall")) for f in faces.tolist()],
                    dtype=np.int8)
    sub = Mesh(mesh.vertices[vmap], sub_tets, mesh.regions[keep], faces, tags)
    return sub, vmap


# ---------------------------------------------------------------- quality


def quality(mesh: Mesh) -> MeshQualityReport:
    p = mesh.vertices
    t = mesh.tets
    vol = signed_volumes(p, t)
    if np.any(vol <= 0):
        k = int(np.argmin(vol))
        raise InvalidMeshError(f"degenerate tet {k} (volume {vol[k]:.3e})")
    edges = p[t[:, _LOCAL_EDGES[:, 1]]] - p[t[:, _LOCAL_EDGES[:, 0]]]
    h_k = np.linalg.norm(edges, axis=2).max(axis=1)
    fv = p[t[:, _LOCAL_FACES]]  # (nt, 4, 3, 3)
    normals = np.cross(fv[:, :, 1] - fv[:, :, 0], fv[:, :, 2] - fv[:, :, 0])
    areas = 0.5 * np.linalg.norm(normals, axis=2)
    rho = 2.0 * 3.0 * vol / areas.sum(axis=1)
    # dihedral angle along edge (i, j) between the two faces not opposite i or j
    unit = normals / np.linalg.norm(normals, axis=2, keepdims=True)
    angles = []
    for i, j in _LOCAL_EDGES:
        cosang = -np.einsum("ij,ij->i", unit[:, i], unit[:, j])
        angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    dihedral = np.min(np.stack(angles, axis=1))
    return MeshQualityReport(float(h_k.max()), float((h_k / rho).max()), float(dihedral))


# ---------------------------------------------------------------- deformation


def deform_mesh(mesh: Mesh, d) -> Mesh:
    """Move every vertex by its displacement; connectivity and tags unchanged."""
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    if len(d) != mesh.n_vertices:
        raise ValueError("displacement must be given on every vertex")
    new = mesh.vertices + d
    vol = signed_volumes(new, mesh.tets)
    if np.any(vol <= 0):
        k = int(np.argmin(vol / np.abs(mesh.signed_volumes())))
        raise ElementInversionError(
            f"deformation inverts {int(np.sum(vol <= 0))} elements; worst is tet {k} "
            f"(volume {vol[k]:.3e} m^3)", element=k, volume=float(vol[k]))
    return mesh.with_vertices(new)


# ---------------------------------------------------------------- text format


def write_mesh(mesh: Mesh, path) -> None:
    lines = ["# ionchannel tetrahedral mesh", f"vertices {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"tets {mesh.n_tets}")
    lines += [f"{a} {b} {c} {d} {REGIONS[r]}" for (a, b, c, d), r in zip(mesh.tets.tolist(), mesh.regions.tolist())]
    lines.append(f"facets {len(mesh.facets)}")
    lines += [f"{a} {b} {c} {FACET_TAGS[t]}" for (a, b, c), t in zip(mesh.facets.tolist(), mesh.facet_tags.tolist())]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read the line-oriented text format written by :func:`write_mesh`."""
    rows = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            rows.append((no, s.split()))
    pos = 0

    def section(name, width, convert):
        nonlocal pos
        if pos >= len(rows):
            raise MeshFormatError(f"missing '{name}' header", None)
        no, tok = rows[pos]
        if len(tok) != 2 or tok[0] != name:
            raise MeshFormatError(f"expected '{name} <count>'", no)
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshFormatError(f"bad count {tok[1]!r}", no) from None
        pos += 1
        out = []
        for _ in range(count):
            if pos >= len(rows):
                raise MeshFormatError(f"unexpected end of file in '{name}' section", None)
            no, tok = rows[pos]
            if len(tok) != width:
                raise MeshFormatError(f"expected {width} fields, got {len(tok)}", no)
            try:
                out.append(convert(tok))
            except (ValueError, KeyError) as exc:
                raise MeshFormatError(str(exc), no) from None
            pos += 1
        return out

    def region(name):
        if name not in REGIONS:
            raise KeyError(f"unknown region {name!r}")
        return REGIONS.index(name)

    def tag(name):
        if name not in FACET_TAGS:
            raise KeyError(f"unknown boundary tag {name!r}")
        return FACET_TAGS.index(name)

    verts = section("vertices", 3, lambda t: [float(v) for v in t])
    tets = section("tets", 5, lambda t: [int(v) for v in t[:4]] + [region(t[4])])
    facets = section("facets", 4, lambda t: [int(v) for v in t[:3]] + [tag(t[3])])
    if pos != len(rows):
        raise MeshFormatError("trailing content after facets section", rows[pos][0])
    tets = np.array(tets, dtype=np.int64).reshape(-1, 5)
    facets = np.array(facets, dtype=np.int64).reshape(-1, 4)
    try:
        return Mesh(np.array(verts).reshape(-1, 3), tets[:, :4], tets[:, 4], facets[:, :3], facets[:, 3])
    except InvalidMeshError as exc:
        raise MeshFormatError(f"invalid mesh: {exc}") from None


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
