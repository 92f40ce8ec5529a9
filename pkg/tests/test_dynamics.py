import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qmetasurf import bands, dynamics, lattice
from qmetasurf.errors import GeometryError

from conftest import S2, pair_closed_form


def small_array(n_l=10, absorber=True, d_over_lambda0=0.3):
    arr = lattice.build_lattice(lattice.GeometrySpec(n_l=n_l, d_over_lambda0=d_over_lambda0))
    if absorber:
        arr = lattice.apply_absorbing_boundary(arr, r_min=2.0, r_max=lattice.edge_radius(arr))
    return arr


def plaquette_impurity(arr, **kw):
    cfg = dict(kind="single", site="plaquette", polarization=(S2, S2, 0.0), gamma=0.002,
               detuning=bands.mode_energy(arr.spec))
    cfg.update(kw)
    return lattice.place_impurities(arr, cfg)


@pytest.fixture(scope="module")
def system10():
    arr = small_array(10)
    imps = plaquette_impurity(arr, gamma=0.05)
    ham = dynamics.build_hamiltonian(arr, imps)
    return arr, imps, ham


def test_single_site_hamiltonian():
    spec = lattice.GeometrySpec(n_l=2)
    arr = lattice.DipoleArray(np.zeros((1, 3)), spec.pol[None], np.ones(1), spec.k0, spec,
                              layer=np.zeros(1, int))
    ham = dynamics.build_hamiltonian(arr)
    np.testing.assert_array_equal(ham.matrix, [[-0.5j]])


def test_two_atom_block():
    spec = lattice.GeometrySpec(n_l=2, d_over_lambda0=0.3)
    pos = np.array([[0, 0, 0], [0.5 / 0.3, 0, 0]], float)
    arr = lattice.DipoleArray(pos, np.tile(spec.pol, (2, 1)), np.ones(2), spec.k0, spec,
                              layer=np.zeros(2, int))
    h = dynamics.build_hamiltonian(arr).matrix
    j, gam = pair_closed_form(np.pi)
    assert h[0, 1].real == pytest.approx(j, rel=1e-12)
    assert -2 * h[0, 1].imag == pytest.approx(-3 / (2 * np.pi**2), rel=1e-12)


def test_hamiltonian_structure(system10):
    arr, imps, ham = system10
    h = ham.matrix
    np.testing.assert_allclose(h, h.T, atol=1e-15)
    assert np.linalg.eigvalsh(ham.decay_matrix()).min() > -1e-8
    outer = np.argmax(arr.radius)
    assert h[outer, outer] == pytest.approx(-0.5j * (1 + arr.gamma_max))
    j = ham.n_sites
    assert h[j, j] == pytest.approx(imps.detunings[0] - 0.5j * imps.gammas[0])


def test_decoupled_impurity_decay():
    spec = lattice.GeometrySpec(d_over_lambda0=0.3)
    imp = lattice.ImpuritySet(np.zeros((1, 3)), np.array([[0, 1, 0]], complex),
                              np.zeros(1), np.array([0.3]), np.ones(1, complex))
    ham = dynamics.free_hamiltonian(imp, spec.k0)
    t = np.linspace(0, 20, 200)
    traj = dynamics.evolve(ham, None, t)
    np.testing.assert_allclose(traj.pop_imp, np.exp(-0.3 * t), atol=1e-8)


def test_dicke_pair():
    spec = lattice.GeometrySpec(d_over_lambda0=0.3)
    r = 1e-4 / spec.k0
    imp = lattice.ImpuritySet(np.array([[0, 0, 0], [r, 0, 0]]),
                              np.array([[0, 1, 0], [0, 1, 0]], complex), np.zeros(2),
                              np.ones(2), np.array([S2, S2], complex))
    ham = dynamics.free_hamiltonian(imp, spec.k0)
    t = np.linspace(0, 1.0, 101)
    traj = dynamics.evolve(ham, None, t)
    fit = dynamics.collective_decay_fit(t, traj.pop_imp, window=(0.0, 1.0))
    assert fit.rate == pytest.approx(2.0, rel=1e-2)


def test_time_grid():
    t = dynamics.time_grid(100.0, 50)
    assert t[0] == 0 and t[-1] == 100.0 and np.any(np.isclose(t, 90.0))
    assert np.all(np.diff(t) > 0)


def test_budget_norm_and_losses(system10):
    arr, imps, ham = system10
    t = dynamics.time_grid(200.0, 400)
    traj = dynamics.evolve(ham, None, t)
    assert traj.check_budget() < 1e-6
    norm = traj.pop_imp + traj.pop_lattice
    assert np.all(np.diff(norm) <= 1e-10)
    lt, la = dynamics.loss_accounting(traj, ham, channels=True)
    assert abs(lt[0]) < 1e-12
    assert np.max(np.abs(la.sum(axis=1) - lt)) < 1e-3
    lb = dynamics.boundary_loss(traj, arr)
    assert np.all(np.diff(lb) >= -1e-12) and np.all(np.diff(traj.loss_total) >= -1e-12)
    assert np.all(lb <= traj.loss_total + 1e-6)
    assert lb[-1] < traj.loss_total[-1]


def test_complete_decay(system10):
    _, _, ham = system10
    traj = dynamics.evolve(ham, None, dynamics.time_grid(5000.0, 300))
    lt, _ = dynamics.loss_accounting(traj)
    assert lt[-1] == pytest.approx(1.0, abs=1e-3)


def test_no_absorber_no_boundary_loss():
    arr = small_array(6, absorber=False)
    imps = plaquette_impurity(arr)
    traj = dynamics.evolve(dynamics.build_hamiltonian(arr, imps), None, np.linspace(0, 50, 60))
    assert np.all(dynamics.boundary_loss(traj, arr) == 0)
    assert np.all(traj.loss_boundary == 0)


def test_rim_loss_rate():
    arr = small_array(10)
    imps = plaquette_impurity(arr)
    ham = dynamics.build_hamiltonian(arr, imps)
    rim = np.flatnonzero(arr.rim)
    psi0 = np.zeros(ham.size, complex)
    psi0[rim] = 1 / np.sqrt(len(rim))
    t = np.array([0.0, 1e-6, 2e-6])
    traj = dynamics.evolve(ham, psi0, t)
    rate = (traj.loss_boundary[1] - traj.loss_boundary[0]) / 1e-6
    expect = np.sum(arr.extra_loss[rim] * np.abs(psi0[rim]) ** 2)
    assert rate == pytest.approx(expect, rel=1e-4)


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 10**6))
def test_linearity(a, b, seed):
    arr = small_array(4, absorber=False)
    imps = plaquette_impurity(arr, gamma=0.1)
    ham = dynamics.build_hamiltonian(arr, imps)
    rng = np.random.default_rng(seed)
    v1 = rng.normal(size=ham.size) + 1j * rng.normal(size=ham.size)
    v2 = rng.normal(size=ham.size) + 1j * rng.normal(size=ham.size)
    v1, v2 = v1 / np.linalg.norm(v1), v2 / np.linalg.norm(v2)
    mix = a * v1 + b * v2
    nrm = np.linalg.norm(mix)
    if nrm < 1e-3:
        return
    t = np.linspace(0, 5, 11)
    prop = dynamics.Propagator(ham)
    t1 = dynamics.evolve(ham, v1, t, propagator=prop, check=False).amplitudes
    t2 = dynamics.evolve(ham, v2, t, propagator=prop, check=False).amplitudes
    tm = dynamics.evolve(ham, mix / nrm, t, propagator=prop, check=False).amplitudes
    np.testing.assert_allclose(tm * nrm, a * t1 + b * t2, atol=1e-10)


def test_two_solvers_agree(system10):
    _, _, ham = system10
    t = dynamics.time_grid(100.0, 100)
    e = dynamics.evolve(ham, None, t, method="eig")
    o = dynamics.evolve(ham, None, t, method="ode")
    assert np.max(np.abs(e.amplitudes - o.amplitudes)) < 1e-6
    assert np.max(np.abs(e.loss_boundary - o.loss_boundary)) < 1e-6


@given(st.floats(0.0, 1.5), st.integers(0, 3))
def test_budget_property(z, site):
    arr = small_array(6)
    imps = lattice.place_impurities(arr, dict(
        kind="single", site=["plaquette", "on_top"][site % 2], z=z + 0.05 * (site % 2),
        polarization=(S2, S2, 0), gamma=0.01 * (1 + site)))
    traj = dynamics.evolve(dynamics.build_hamiltonian(arr, imps), None,
                           dynamics.time_grid(300.0, 150))
    assert traj.check_budget() < 1e-6


def test_far_impurity_radiates_to_free_space():
    arr = small_array(12)
    lam0 = 1 / 0.3
    imps = plaquette_impurity(arr, z=20 * lam0)
    _, res, _ = dynamics.simulate(arr, imps)
    assert res.value < 0.05


def test_integrated_population_matches_quadrature(system10):
    _, _, ham = system10
    t = np.linspace(0, 300, 3001)
    traj = dynamics.evolve(ham, None, t)
    sites = np.arange(5)
    exact = traj.integrated_population(sites)
    trap = np.trapezoid(np.abs(traj.amplitudes[:, sites]) ** 2, t, axis=0)
    np.testing.assert_allclose(exact, trap, rtol=1e-4, atol=1e-9)


def test_eigenmode_reciprocity_and_symmetry(spec03):
    r = np.array([0.5, 0.5, 0.0])
    k = np.array([np.pi, 0.0])
    alpha, beta = dynamics.eigenmode_fields(k, r, spec03)
    # p0 real: beta_k(r) = p0 . M(-k)(r) = alpha_{-k}(r) contracted the other way
    a_m, _ = dynamics.eigenmode_fields(-k, r, spec03)
    np.testing.assert_allclose(beta, a_m, atol=1e-10)
    assert np.all(np.isfinite(alpha))
    above = np.array([0.0, 0.0, 0.6])
    a0, _ = dynamics.eigenmode_fields(np.zeros(2), above, spec03)
    # mirror x -> -x leaves the y-polarised response without x or z components
    assert abs(a0[0]) < 1e-8 * abs(a0[1]) and abs(a0[2]) < 1e-8 * abs(a0[1])


def test_eigenmode_routes_agree(spec03):
    k = np.array([2.6, 0.7])
    r = np.array([0.5, 0.5, 0.3])
    weyl, _ = dynamics.eigenmode_fields(k, r, spec03, method="weyl", check=False)
    patch, _ = dynamics.eigenmode_fields(k, r, spec03, method="patch", half_width=100,
                                         check=False)
    assert np.max(np.abs(weyl - patch)) < 1e-3 * np.max(np.abs(weyl))


def test_lattice_frame():
    arr = small_array(10)
    plq = lattice.plaquette_center(arr)
    r = dynamics.lattice_frame(arr, np.array([plq[0], plq[1], 0.2]))
    np.testing.assert_allclose(np.abs(r), [0.5, 0.5, 0.2])


@given(st.integers(1, 30))
def test_midpoint_circle(radius):
    pts = dynamics.midpoint_circle(radius)
    rot = {(-y, x) for x, y in pts}
    assert rot == {tuple(p) for p in pts}
    assert np.all(np.abs(np.hypot(*pts.T) - radius) < 1.0)


def test_chi1d_synthetic():
    theta = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    pop = np.zeros(40)
    pop[5] = pop[25] = 1.0
    assert dynamics.chi1d_from_populations(pop, theta) == pytest.approx(1.0)
    uniform = dynamics.chi1d_from_populations(np.ones(40), theta)
    assert abs(uniform) < 1 / np.sqrt(40)
    assert dynamics.chi1d_from_populations(pop, theta, "fixed") == pytest.approx(
        np.cos(2 * (theta[5] - np.pi / 4)))
    with pytest.raises(GeometryError):
        dynamics.chi1d_from_populations(np.zeros(4), theta[:4])


def test_witness():
    t = np.linspace(0, 10, 1001)
    assert dynamics.nonmarkov_witness(np.exp(-0.5 * t)) == 0.0
    assert dynamics.nonmarkov_witness(np.abs(np.cos(np.pi * t))) == pytest.approx(1.0, abs=1e-9)


def test_fit_exact_exponential():
    t = np.linspace(0, 10, 200)
    fit = dynamics.collective_decay_fit(t, np.exp(-0.37 * t), gamma_a=0.37, gamma_ind=0.185)
    assert fit.rate == pytest.approx(0.37, abs=1e-6)
    assert fit.ratio_a == pytest.approx(1.0) and fit.ratio_ind == pytest.approx(2.0)
    assert not fit.flagged
    wiggle = np.exp(-0.37 * t) * (1 + 0.3 * np.sin(3 * t))
    assert dynamics.collective_decay_fit(t, wiggle).flagged


def test_free_pair_dicke_limit():
    spec = lattice.GeometrySpec(d_over_lambda0=0.3)
    arr = lattice.build_lattice(spec)
    imps = lattice.place_impurities(arr, dict(kind="pair", d_e=1e-4, site="plaquette",
                                              polarization=(S2, S2, 0), gamma=0.002))
    fit, _ = dynamics.collective_decay(None, imps, k0=spec.k0)
    assert fit.ratio_a == pytest.approx(2.0, rel=1e-2)
