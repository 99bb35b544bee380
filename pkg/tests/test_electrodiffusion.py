import math

import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings, strategies as st

from ionchannel import electrodiffusion as ed, fem
from ionchannel.errors import DomainError, FloatingSystemError, GummelDivergenceError, RescalingError
from ionchannel.linalg import is_m_matrix_column_dominant, sparse_lu_solve
from ionchannel.mesh import build_box_mesh, build_cylinder_mesh

from oracles import drift_diffusion_1d, einstein, l2_error, observed_orders

UNIT = ed.ElectrostaticEnvironment(permittivity=1.0, charge=1.0, boltzmann=1.0)
K = ed.Species("K", 1, 1.0)


def chain(layers=16):
    return build_box_mesh((0, 0, 0), (0.1, 0.1, 1.0), (1, 1, layers))


# ---------------------------------------------------------------- Einstein


def test_einstein_table_values():
    for mob, ref_cm2 in ((7.2e-4, 1.8226e-5), (5.2e-4, 1.3163e-5)):
        sp = ed.Species("X", 1, mob * 1e-4)
        D = ed.einstein_diffusivity(sp, 293.75)
        assert abs(D * 1e4 - einstein(mob, 293.75)) <= 1e-12 * D * 1e4
        assert abs(D * 1e4 - ref_cm2) < 5e-4 * ref_cm2


def test_einstein_linear_in_T():
    sp = ed.Species("X", 2, 3e-8)
    assert ed.einstein_diffusivity(sp, 600.0) == 2 * ed.einstein_diffusivity(sp, 300.0)


def test_einstein_errors():
    with pytest.raises(DomainError):
        ed.einstein_diffusivity(ed.Species("N", 0, 1e-8), 300.0)
    with pytest.raises(DomainError):
        ed.einstein_diffusivity(K, -1.0, UNIT)
    with pytest.raises(DomainError):
        ed.Species("bad", 1, -1.0)


# ---------------------------------------------------------------- Poisson


def test_poisson_linear_profile():
    mesh = build_cylinder_mesh(10e-9, 2e-9, 0.5e-9)
    env = ed.ElectrostaticEnvironment(permittivity=80 * 8.8541878128e-12)
    phi = ed.solve_poisson(mesh, env, [], np.zeros((0, mesh.n_vertices)), {"SideA": 0.0, "SideB": 0.02})
    exact = 0.02 * mesh.vertices[:, 2] / 10e-9
    assert np.max(np.abs(phi - exact)) <= 1e-12 * 0.02


def test_poisson_neutral_plasma_same_as_uncharged():
    mesh = chain(8)
    sp = [ed.Species("K", 1, 1.0), ed.Species("Cl", -1, 1.0)]
    n = np.ones((2, mesh.n_vertices))
    a = ed.solve_poisson(mesh, UNIT, sp, n, {"SideA": 0.0, "SideB": 1.0})
    b = ed.solve_poisson(mesh, UNIT, [], np.zeros((0, mesh.n_vertices)), {"SideA": 0.0, "SideB": 1.0})
    assert np.allclose(a, b, atol=1e-13)


def test_poisson_all_neumann():
    mesh = chain(4)
    with pytest.raises(FloatingSystemError):
        ed.solve_poisson(mesh, UNIT, [], np.zeros((0, mesh.n_vertices)), {})


def poisson_mms(n):
    mesh = build_box_mesh((0, 0, 0), (1, 1, 1), n)
    z = mesh.vertices[:, 2]
    src = math.pi ** 2 * np.sin(math.pi * z)
    phi = ed.solve_poisson(mesh, UNIT, [], np.zeros((0, mesh.n_vertices)), {"SideA": 0.0, "SideB": 0.0}, source=src)
    return l2_error(mesh, phi, lambda x: np.sin(math.pi * x[:, 2]))


def test_poisson_manufactured_order():
    ns = [4, 8, 16]
    errs = [poisson_mms(n) for n in ns]
    orders = observed_orders([1 / n for n in ns], errs)
    assert np.all(orders >= 1.9), orders


def test_nonlinear_poisson_matches_boltzmann_charge():
    # the Gummel Poisson step with phi_ref = phi returns the linear solve at its fixed point
    mesh = chain(8)
    n = np.full((1, mesh.n_vertices), 0.5)
    T = np.ones(mesh.n_vertices)
    lin = ed.solve_poisson(mesh, UNIT, [K], n, {"SideA": 0.0, "SideB": 1.0})
    non = ed.solve_poisson(mesh, UNIT, [K], n, {"SideA": 0.0, "SideB": 1.0}, T=T, phi_ref=lin)
    assert np.allclose(non, lin, atol=1e-12)


# ---------------------------------------------------------------- Slotboom


def test_slotboom_zero():
    mesh = chain(4)
    s = ed.compute_slotboom(mesh, np.zeros(mesh.n_vertices), np.full(mesh.n_vertices, 300.0), K, 300.0, UNIT)
    assert np.all(s.psi_element == 0) and np.all(s.psi_vertex == 0)


def test_slotboom_thermal_voltage_gives_minus_one():
    mesh = chain(4)
    sp = ed.Species("K", 1, 7.2e-8)
    vt = 1.380649e-23 * 293.75 / 1.602176634e-19
    s = ed.compute_slotboom(mesh, np.full(mesh.n_vertices, vt), np.full(mesh.n_vertices, 293.75), sp, 293.75)
    assert np.allclose(s.psi_element, -1.0, atol=1e-14) and np.allclose(s.psi_vertex, -1.0, atol=1e-14)


def test_slotboom_temperature_term():
    mesh = chain(4)
    s = ed.compute_slotboom(mesh, np.zeros(mesh.n_vertices), np.full(mesh.n_vertices, math.e * 300), K, 300.0)
    assert np.allclose(s.psi_element, -1.0, atol=1e-14)
    with pytest.raises(DomainError):
        ed.compute_slotboom(mesh, np.zeros(mesh.n_vertices), np.zeros(mesh.n_vertices), K, 300.0)


def test_column_rescale_examples(rng):
    A = scipy.sparse.csr_matrix(rng.random((5, 5)))
    assert np.array_equal(ed.column_rescale(A, np.zeros(5)).toarray(), A.toarray())
    assert np.allclose(ed.column_rescale(A, np.full(5, 0.7)).toarray(), math.exp(-0.7) * A.toarray(), rtol=1e-15)
    with pytest.raises(RescalingError):
        ed.column_rescale(A, np.full(5, 600.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_column_rescale_solution_equivalence(seed):
    rng = np.random.default_rng(seed)
    Kt = rng.random((5, 5)) + 5 * np.eye(5)
    Psi = rng.uniform(-3, 3, 5)
    F = rng.random(5)
    nt = np.linalg.solve(Kt, F)
    n = sparse_lu_solve(ed.column_rescale(Kt, Psi), F)
    assert np.allclose(n, nt * np.exp(Psi), rtol=1e-12, atol=0)


def random_fields(mesh, rng, amp=3.0):
    phi = rng.uniform(-amp, amp, mesh.n_vertices)
    T = rng.uniform(0.8, 1.3, mesh.n_vertices)
    return phi, T


def test_slotboom_and_rescaled_agree_entrywise(rng):
    mesh = build_box_mesh((0, 0, 0), (1, 1, 1), 3)
    phi, T = random_fields(mesh, rng)
    n_old = rng.random(mesh.n_vertices) + 0.1
    Ks, F1, Psi = ed.assemble_np_eafe(mesh, K, phi, T, None, 0.1, n_old, 1.0, UNIT)
    Kn, F2 = ed.assemble_np_rescaled(mesh, K, phi, T, None, 0.1, n_old, 1.0, UNIT)
    Kr = ed.column_rescale(Ks, Psi).toarray()
    Kn = Kn.toarray()
    assert np.max(np.abs(Kr - Kn)) <= 1e-12 * np.max(np.abs(Kn))
    assert np.array_equal(F1, F2)


def test_eafe_reduces_to_laplacian():
    mesh = build_box_mesh((0, 0, 0), (1, 1, 1), 3)
    nv = mesh.n_vertices
    Kn, _ = ed.assemble_np_rescaled(mesh, K, np.zeros(nv), np.ones(nv), None, 0.5, np.ones(nv), 1.0, UNIT)
    ref = fem.p1_stiffness(mesh) + scipy.sparse.diags(fem.lumped_mass(mesh) / 0.5)
    assert abs(Kn - ref).max() <= 1e-13 * abs(ref).max()


@pytest.mark.parametrize("a", [-8.0, -1.0, 0.5, 6.0])
def test_scharfetter_gummel_exact(a):
    mesh = chain(16)
    z = mesh.vertices[:, 2]
    # psi = -phi/V_T = a z  with V_T = 1
    phi = -a * z
    sp = ed.Species("K", 1, 1.0, {"SideA": 1.0, "SideB": 0.2})
    n = ed.solve_nernst_planck(mesh, sp, phi, np.ones(mesh.n_vertices), None, np.inf, np.zeros(mesh.n_vertices),
                               1.0, UNIT)
    exact = drift_diffusion_1d(a, 1.0, 0.2, z)
    assert np.max(np.abs(n - exact) / exact) <= 1e-10


def test_dmp_random_fields(rng):
    mesh = build_channel_like()
    for _ in range(5):
        phi, T = random_fields(mesh, rng, 2.0)
        Kn, F = ed.assemble_np_rescaled(mesh, K, phi, T, None, 0.05, rng.random(mesh.n_vertices) + 0.01, 1.0, UNIT)
        ok, w = is_m_matrix_column_dominant(Kn)
        assert ok, w
        sp = ed.Species("K", 1, 1.0, {"SideA": 0.3, "SideB": 2.0})
        n = ed.solve_nernst_planck(mesh, sp, phi, T, None, 0.05, rng.random(mesh.n_vertices) + 0.01, 1.0, UNIT)
        assert np.all(n > 0)


def build_channel_like():
    return build_cylinder_mesh(1.0, 0.4, 0.1)


def test_mass_conservation_closed(rng):
    mesh = build_channel_like()
    nv = mesh.n_vertices
    eg = ed.EAFEGeometry.build(mesh)
    phi, T = random_fields(mesh, rng, 1.0)
    u = rng.normal(size=(nv, 3)) * 0.3
    n = rng.random(nv) + 0.5
    total = eg.mass @ n
    for scheme in ("be", "tr", "trbdf2"):
        K_, _ = ed.assemble_np_rescaled(mesh, K, phi, T, u, np.inf, n, 1.0, UNIT, eg)
        m = ed.time_stepped_solve(K_, eg.mass, n, 0.01, scheme)
        assert abs(eg.mass @ m - total) <= 1e-12 * total


def test_thermodiffusion_flux_direction():
    mesh = chain(16)
    nv = mesh.n_vertices
    z = mesh.vertices[:, 2]
    T = 1.0 + 0.5 * z
    n0 = np.ones(nv)
    n = ed.solve_nernst_planck(mesh, K, np.zeros(nv), T, None, 0.01, n0, 1.0, UNIT, dirichlet=(None, None))
    cold, hot = n[z == 0].mean(), n[z == 1].mean()
    assert cold > 1 > hot


def test_convection_pushes_downstream():
    mesh = chain(16)
    nv = mesh.n_vertices
    z = mesh.vertices[:, 2]
    sp = ed.Species("K", 1, 1.0, {"SideA": 1.0, "SideB": 0.1})
    base = ed.solve_nernst_planck(mesh, sp, np.zeros(nv), np.ones(nv), None, np.inf, np.ones(nv), 1.0, UNIT)
    u = np.tile([0.0, 0.0, 1.0], (nv, 1))
    conv = ed.solve_nernst_planck(mesh, sp, np.zeros(nv), np.ones(nv), u, np.inf, np.ones(nv), 1.0, UNIT)
    inner = (z > 0) & (z < 1)
    assert np.all(conv[inner] > base[inner])


def test_psi_guard():
    mesh = chain(4)
    nv = mesh.n_vertices
    with pytest.raises(RescalingError):
        ed.assemble_np_rescaled(mesh, K, np.full(nv, -600.0), np.ones(nv), None, 1.0, np.ones(nv), 1.0, UNIT)


# ---------------------------------------------------------------- inner cycle


def pnp_problem(mesh, phi_bc, species, lam2=0.05, **kw):
    env = ed.ElectrostaticEnvironment(permittivity=lam2, charge=1.0, boltzmann=1.0)
    return ed.PNPProblem(mesh, species, env, phi_bc, 1.0, **kw)


def test_symmetric_equilibrium_flat_potential():
    mesh = build_channel_like()
    nv = mesh.n_vertices
    sp = [ed.Species("K", 1, 1.0, {"SideA": 1.0, "SideB": 1.0}), ed.Species("Cl", -1, 1.0, {"SideA": 1.0, "SideB": 1.0})]
    prob = pnp_problem(mesh, {"SideA": 0.0, "SideB": 0.0}, sp)
    res = ed.tpnp_inner_cycle(prob, np.ones((2, nv)), np.zeros(nv), np.ones(nv), None, np.inf)
    assert np.max(np.abs(res.phi)) <= 1e-9


def test_boltzmann_equilibrium_closed_channel():
    mesh = build_channel_like()
    nv = mesh.n_vertices
    sp = [ed.Species("K", 1, 1.0, {"SideA": 1.0}), ed.Species("Na", 1, 0.7, {"SideA": 0.4})]
    prob = pnp_problem(mesh, {"SideA": 0.0, "SideB": 1.5}, sp)
    res = ed.tpnp_inner_cycle(prob, np.ones((2, nv)), np.zeros(nv), np.ones(nv), None, np.inf, toll=1e-8)
    for k, anchor in enumerate((1.0, 0.4)):
        exact = anchor * np.exp(-(res.phi - 0.0))
        assert np.max(np.abs(res.n[k] - exact) / exact) <= 1e-6


def test_species_order_independent():
    mesh = build_channel_like()
    nv = mesh.n_vertices
    sp = [ed.Species("K", 1, 1.0, {"SideA": 1.0, "SideB": 0.2}), ed.Species("Na", 1, 0.6, {"SideA": 0.1, "SideB": 0.9})]
    runs = []
    for order in ([0, 1], [1, 0]):
        prob = pnp_problem(mesh, {"SideA": 0.5, "SideB": 0.0}, sp, species_order=order)
        runs.append(ed.tpnp_inner_cycle(prob, np.ones((2, nv)), np.zeros(nv), np.ones(nv), None, 0.1, toll=1e-10))
    assert np.allclose(runs[0].n, runs[1].n, atol=1e-8)
    assert np.allclose(runs[0].phi, runs[1].phi, atol=1e-8)


def test_gummel_divergence_reports_history():
    mesh = build_channel_like()
    nv = mesh.n_vertices
    sp = [ed.Species("K", 1, 1.0, {"SideA": 1.0, "SideB": 0.2})]
    prob = pnp_problem(mesh, {"SideA": 3.0, "SideB": 0.0}, sp, lam2=1e-3)
    with pytest.raises(GummelDivergenceError) as info:
        ed.tpnp_inner_cycle(prob, np.ones((1, nv)), np.zeros(nv), np.ones(nv), None, 0.1, toll=1e-14, max_iter=2)
    assert len(info.value.history) == 2


def test_convergence_norm():
    assert ed.convergence_norm([1, 2], [1, 2]) == 0
    assert ed.convergence_norm([3, 4], [0, 0]) == 5
    assert ed.convergence_norm([6, 8], [0, 0]) == 2 * ed.convergence_norm([3, 4], [0, 0])


def test_electric_field_of_linear_potential():
    mesh = chain(4)
    E = ed.electric_field(mesh, 2.0 * mesh.vertices[:, 2] - mesh.vertices[:, 0])
    assert np.allclose(E, [1.0, 0.0, -2.0])
