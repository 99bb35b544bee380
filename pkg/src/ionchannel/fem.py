"""Finite element building blocks on tetrahedra: P1/P2 spaces, quadrature,
vectorized assembly, lumped mass, harmonic averages and the Bernoulli function."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse
import scipy.special

from .errors import AssemblyError, DomainError
from .mesh import FACET_TAGS, Mesh, _LOCAL_EDGES, _LOCAL_FACES

# ---------------------------------------------------------------- Bernoulli

_TAYLOR_CUT = 1e-4


def bernoulli(x):
    """B(x) = x / (exp(x) - 1), with B(0) = 1; vectorized."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < _TAYLOR_CUT
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs * xs / 12.0 - xs ** 4 / 720.0
    pos = (~small) & (x > 0)
    xp = x[pos]
    out[pos] = xp * np.exp(-xp) / (-np.expm1(-xp))
    neg = (~small) & (x < 0)
    xn = x[neg]
    out[neg] = xn / np.expm1(xn)
    return out if out.ndim else float(out)


def harmonic_average_edge(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("harmonic average needs strictly positive values")
    out = 2.0 * a * b / (a + b)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class Quadrature:
    """Barycentric points (nq, d+1) and weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self):
        return len(self.weights)


def _gauss_jacobi01(n, alpha):
    x, w = scipy.special.roots_jacobi(n, alpha, 0.0)
    # map from [-1, 1] with weight (1-x)^alpha to [0, 1] with weight (1-t)^alpha
    t = (x + 1.0) / 2.0
    w = w / 2.0 ** (alpha + 1)
    return t, w


@lru_cache(maxsize=None)
def tet_quadrature(degree) -> Quadrature:
    """Rule exact for polynomials up to ``degree`` on any tetrahedron."""
    if degree <= 1:
        return Quadrature(np.full((1, 4), 0.25), np.ones(1))
    if degree == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        pts = np.full((4, 4), b)
        np.fill_diagonal(pts, a)
        return Quadrature(pts, np.full(4, 0.25))
    # Stroud conical product rule, exact to degree 2n - 1
    n = (degree + 2) // 2
    t1, w1 = _gauss_jacobi01(n, 2.0)
    t2, w2 = _gauss_jacobi01(n, 1.0)
    t3, w3 = _gauss_jacobi01(n, 0.0)
    pts, wts = [], []
    for a, wa in zip(t1, w1):
        for b, wb in zip(t2, w2):
            for c, wc in zip(t3, w3):
                x = a
                y = b * (1 - a)
                z = c * (1 - a) * (1 - b)
                pts.append([1 - x - y - z, x, y, z])
                wts.append(wa * wb * wc)
    wts = np.array(wts)
    return Quadrature(np.array(pts), wts / wts.sum())


@lru_cache(maxsize=None)
def tri_quadrature(degree) -> Quadrature:
    if degree <= 1:
        return Quadrature(np.full((1, 3), 1.0 / 3.0), np.ones(1))
    n = (degree + 2) // 2
    t1, w1 = _gauss_jacobi01(n, 1.0)
    t2, w2 = _gauss_jacobi01(n, 0.0)
    pts, wts = [], []
    for a, wa in zip(t1, w1):
        for b, wb in zip(t2, w2):
            x = a
            y = b * (1 - a)
            pts.append([1 - x - y, x, y])
            wts.append(wa * wb)
    wts = np.array(wts)
    return Quadrature(np.array(pts), wts / wts.sum())


# ---------------------------------------------------------------- geometry


def tet_geometry(vertices, tets):
    """Barycentric gradients (nt, 4, 3) and volumes (nt,)."""
    p = vertices[tets]  # (nt, 4, 3)
    J = (p[:, 1:] - p[:, :1]).transpose(0, 2, 1)  # columns are edge vectors
    det = np.linalg.det(J)
    if np.any(det <= 0):
        k = int(np.argmin(det))
        raise AssemblyError(f"tet {k} is degenerate or inverted (det {det[k]:.3e})")
    Jinv = np.linalg.inv(J)  # rows are gradients of lambda_1..3
    g = np.empty((len(tets), 4, 3))
    g[:, 1:] = Jinv
    g[:, 0] = -Jinv.sum(axis=1)
    return g, det / 6.0


def element_diameters(vertices, tets):
    e = vertices[tets[:, _LOCAL_EDGES[:, 1]]] - vertices[tets[:, _LOCAL_EDGES[:, 0]]]
    return np.linalg.norm(e, axis=2).max(axis=1)


# ---------------------------------------------------------------- spaces


@dataclass
class ElementSpace:
    kind: str
    dof_map: np.ndarray
    n_dofs: int
    mesh: Mesh = field(repr=False)
    edges: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_local(self):
        return self.dof_map.shape[1]

    def dof_coordinates(self):
        p = self.mesh.vertices
        if self.kind == "P1":
            return p.copy()
        return np.vstack([p, 0.5 * (p[self.edges[:, 0]] + p[self.edges[:, 1]])])

    def boundary_dofs(self, *tags):
        """Dofs lying on facets with the given tags (all facets when none)."""
        m = self.mesh
        if tags:
            sel = np.isin(m.facet_tags, [FACET_TAGS.index(t) for t in tags])
            facets = m.facets[sel]
        else:
            facets = m.facets
        verts = np.unique(facets)
        if self.kind == "P1":
            return verts
        fe = np.sort(np.concatenate([facets[:, [0, 1]], facets[:, [1, 2]], facets[:, [0, 2]]]), axis=1)
        fe = np.unique(fe, axis=0)
        ids = _edge_ids(self.edges, fe)
        return np.concatenate([verts, m.n_vertices + ids])


def _edge_ids(edges, query):
    nv = int(max(edges.max(), query.max())) + 1
    key = edges[:, 0] * nv + edges[:, 1]
    q = query[:, 0] * nv + query[:, 1]
    idx = np.searchsorted(key, q)
    if np.any(idx >= len(key)) or np.any(key[np.minimum(idx, len(key) - 1)] != q):
        raise AssemblyError("edge lookup failed")
    return idx


def p1_space(mesh: Mesh) -> ElementSpace:
    return ElementSpace("P1", np.asarray(mesh.tets), mesh.n_vertices, mesh)


def p2_space(mesh: Mesh) -> ElementSpace:
    edges = np.asarray(mesh.edges())
    loc = np.sort(mesh.tets[:, _LOCAL_EDGES], axis=2).reshape(-1, 2)
    ids = _edge_ids(edges, loc).reshape(-1, 6)
    dof_map = np.hstack([mesh.tets, mesh.n_vertices + ids])
    return ElementSpace("P2", dof_map, mesh.n_vertices + len(edges), mesh, edges)


def space(mesh, kind):
    return p1_space(mesh) if kind == "P1" else p2_space(mesh)


def basis_values(kind, bary):
    """Shape functions at barycentric points: (nq, nloc)."""
    L = np.asarray(bary, dtype=float)
    if kind == "P1":
        return L.copy()
    v = L * (2 * L - 1)
    e = 4 * L[:, _LOCAL_EDGES[:, 0]] * L[:, _LOCAL_EDGES[:, 1]]
    return np.hstack([v, e])


def basis_gradients(kind, bary, grads):
    """Shape gradients: (nt, nq, nloc, 3) from barycentric gradients (nt, 4, 3)."""
    L = np.asarray(bary, dtype=float)
    nq = len(L)
    if kind == "P1":
        return np.broadcast_to(grads[:, None], (len(grads), nq, 4, 3))
    gv = (4 * L - 1)[None, :, :, None] * grads[:, None, :, :]
    i, j = _LOCAL_EDGES[:, 0], _LOCAL_EDGES[:, 1]
    ge = 4 * (L[None, :, i, None] * grads[:, None, j, :] + L[None, :, j, None] * grads[:, None, i, :])
    return np.concatenate([gv, ge], axis=2)


def interpolate(space_, func):
    """Nodal interpolant of func(x) (x of shape (n, 3)) on the space's dofs."""
    return np.asarray(func(space_.dof_coordinates()), dtype=float)


def evaluate(space_, values, elements, bary):
    """Field values at one barycentric point per element; bary has shape (ne, 4)."""
    bary = np.atleast_2d(bary)
    phi = basis_values(space_.kind, bary)
    dofs = space_.dof_map[np.atleast_1d(elements)]
    return np.einsum("el,el->e", phi, np.asarray(values)[dofs])


# ---------------------------------------------------------------- assembly


def scatter(row_map, col_map, local, shape):
    """Sum local matrices (ne, nr, nc) into a canonical CSR matrix."""
    local = np.asarray(local, dtype=float)
    ne, nr, nc = local.shape
    if row_map.max(initial=-1) >= shape[0] or col_map.max(initial=-1) >= shape[1] \
            or row_map.min(initial=0) < 0 or col_map.min(initial=0) < 0:
        raise AssemblyError("dof index out of range during assembly")
    rows = np.repeat(row_map[:, :, None], nc, axis=2).ravel()
    cols = np.repeat(col_map[:, None, :], nr, axis=1).ravel()
    A = scipy.sparse.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def scatter_vector(dof_map, local, n):
    local = np.asarray(local, dtype=float)
    return np.bincount(dof_map.ravel(), weights=local.ravel(), minlength=n)


def assemble(mesh: Mesh, space_: ElementSpace, element_kernel):
    """Generic scatter-add: ``element_kernel(k)`` returns the local matrix of tet k,
    or an array (nt, nloc, nloc) of all local matrices."""
    if callable(element_kernel):
        local = np.array([element_kernel(k) for k in range(mesh.n_tets)])
    else:
        local = np.asarray(element_kernel)
    nloc = space_.n_local
    if local.shape != (mesh.n_tets, nloc, nloc):
        raise AssemblyError(f"kernel returned shape {local.shape}, expected {(mesh.n_tets, nloc, nloc)}")
    return scatter(space_.dof_map, space_.dof_map, local, (space_.n_dofs, space_.n_dofs))


def p1_stiffness_local(grads, vol, coef=None):
    K = vol[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    if coef is not None:
        K = K * np.asarray(coef)[:, None, None]
    return K


def p1_stiffness(mesh: Mesh, coef=None, geometry=None):
    """Matrix of (coef grad u, grad v) with elementwise-constant coef."""
    g, vol = geometry if geometry is not None else tet_geometry(mesh.vertices, mesh.tets)
    return scatter(mesh.tets, mesh.tets, p1_stiffness_local(g, vol, coef), (mesh.n_vertices,) * 2)


def p1_mass(mesh: Mesh, coef=None, geometry=None):
    _, vol = geometry if geometry is not None else tet_geometry(mesh.vertices, mesh.tets)
    loc = (np.ones((4, 4)) + np.eye(4)) / 20.0
    M = vol[:, None, None] * loc[None]
    if coef is not None:
        M = M * np.asarray(coef)[:, None, None]
    return scatter(mesh.tets, mesh.tets, M, (mesh.n_vertices,) * 2)


def lumped_mass(mesh: Mesh, weight=None, geometry=None):
    """Diagonal (vector) of the trapezoidal-rule mass: sum over K of |K|/4,
    optionally multiplied by a vertex weight."""
    _, vol = geometry if geometry is not None else tet_geometry(mesh.vertices, mesh.tets)
    m = scatter_vector(mesh.tets, np.repeat(vol[:, None] / 4.0, 4, axis=1), mesh.n_vertices)
    if weight is not None:
        m = m * np.asarray(weight, dtype=float)
    return m


def mass_matrix(space_: ElementSpace, degree=None, geometry=None):
    mesh = space_.mesh
    _, vol = geometry if geometry is not None else tet_geometry(mesh.vertices, mesh.tets)
    q = tet_quadrature(degree or (2 if space_.kind == "P1" else 4))
    phi = basis_values(space_.kind, q.points)
    loc = np.einsum("q,qi,qj->ij", q.weights, phi, phi)
    return scatter(space_.dof_map, space_.dof_map, vol[:, None, None] * loc[None], (space_.n_dofs,) * 2)


def load_vector(space_: ElementSpace, func, degree=4, geometry=None):
    """Integral of func(x) * v over the mesh (func vectorized on (n, 3) points)."""
    mesh = space_.mesh
    _, vol = geometry if geometry is not None else tet_geometry(mesh.vertices, mesh.tets)
    q = tet_quadrature(degree)
    x = np.einsum("qa,eac->eqc", q.points, mesh.vertices[mesh.tets])
    fx = np.asarray(func(x.reshape(-1, 3)), dtype=float).reshape(len(vol), q.n)
    phi = basis_values(space_.kind, q.points)
    loc = vol[:, None] * np.einsum("q,eq,qi->ei", q.weights, fx, phi)
    return scatter_vector(space_.dof_map, loc, space_.n_dofs)


def facet_normals(mesh: Mesh, facets=None):
    """Unit outward normals and areas of boundary facets."""
    facets = mesh.facets if facets is None else facets
    p = mesh.vertices
    n = np.cross(p[facets[:, 1]] - p[facets[:, 0]], p[facets[:, 2]] - p[facets[:, 0]])
    area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / (2 * area[:, None])
    # orient away from the owning tet
    owner = facet_owners(mesh, facets)
    opp = _opposite_vertex(mesh.tets[owner], facets)
    s = np.einsum("ij,ij->i", n, p[opp] - p[facets[:, 0]])
    n[s > 0] *= -1
    return n, area


def facet_owners(mesh: Mesh, facets):
    allf = np.sort(mesh.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1)
    nv = mesh.n_vertices
    key = (allf[:, 0] * nv + allf[:, 1]) * nv + allf[:, 2]
    sf = np.sort(facets, axis=1)
    q = (sf[:, 0] * nv + sf[:, 1]) * nv + sf[:, 2]
    order = np.argsort(key, kind="stable")
    pos = np.searchsorted(key[order], q)
    pos = np.minimum(pos, len(order) - 1)
    if np.any(key[order][pos] != q):
        raise AssemblyError("facet not found among tet faces")
    return order[pos] // 4


def _opposite_vertex(tets, facets):
    mask = ~((tets[:, :, None] == facets[:, None, :]).any(axis=2))
    return tets[mask]


# ---------------------------------------------------------------- harmonic average


def harmonic_average_element(q_vertex, degree=9, rtol=1e-14):
    """(mean of 1/q over K)^-1 for a P1 field given by its 4 vertex values.

    Accepts shape (4,) or (nt, 4).  Conical product rules of increasing degree
    are applied until two successive values agree to ``rtol``; constant q is
    returned exactly.
    """
    q = np.asarray(q_vertex, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if np.any(q <= 0):
        raise DomainError("harmonic average needs a strictly positive field")

    def rule_value(deg, qq):
        rule = tet_quadrature(deg)
        return 1.0 / (rule.weights @ (1.0 / (rule.points @ qq.T)))

    out = q[:, 0].copy()
    todo = np.flatnonzero(~np.all(q == q[:, :1], axis=1))
    prev = rule_value(degree, q[todo])
    deg = degree
    while todo.size and deg < 80:
        deg = 2 * deg + 1
        cur = rule_value(deg, q[todo])
        done = np.abs(cur - prev) <= rtol * cur
        out[todo[done]] = cur[done]
        todo, prev = todo[~done], cur[~done]
    out[todo] = prev
    return float(out[0]) if single else out


# ---------------------------------------------------------------- Dirichlet


def apply_dirichlet(A, b, dofs, values, symmetric=False):
    """Row replacement with unit diagonal; ``symmetric`` also eliminates the
    columns (lifting the data into the right-hand side)."""
    A = scipy.sparse.csr_matrix(A, dtype=float)
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    b = np.array(b, dtype=float)
    keep = np.ones(n)
    keep[dofs] = 0.0
    ind = 1.0 - keep
    if symmetric:
        g = np.zeros(n)
        g[dofs] = values
        b = b - A @ g
        A = scipy.sparse.diags(keep) @ A @ scipy.sparse.diags(keep)
    else:
        A = scipy.sparse.diags(keep) @ A
    A = (A + scipy.sparse.diags(ind)).tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    b[dofs] = values
    return A, b
