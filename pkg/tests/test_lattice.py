import math

import numpy as np
import pytest

from kamlattice.action_angle import AngleActionChart, Potential
from kamlattice.errors import ConfigError, Diverged, UnstableStep
from kamlattice.kam import measure_error
from kamlattice.lattice import (Bond, BreatherConfig, CouplingPotential, LatticeModel, base_actions,
                                build_reduced_hamiltonian, canonical_derivatives, construct_breather,
                                integrate_lattice, lattice_profile, spectral_peak, verify_breather)
from kamlattice.spectral import SiteWindow, Truncation

QUARTIC = Potential.quartic()


def chain_forces(model, x):
    """x_n'' = -V'(x_n) + eps_n W'(x_{n+1} - x_n) - eps_{n-1} W'(x_n - x_{n-1})."""
    n = model.size
    out = -model.V.derivative(x)
    eps = {b.site - model.window.lo: b for b in model.bonds}
    for i in range(n):
        if i in eps:
            out[i] += eps[i].strength * eps[i].W.derivative(x[i + 1] - x[i])
        if i - 1 in eps:
            out[i] -= eps[i - 1].strength * eps[i - 1].W.derivative(x[i] - x[i - 1])
    return out


def test_chain_forces_match_nearest_neighbour_equation():
    model = LatticeModel.chain(3, QUARTIC, 0.2, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(-1, 1, model.size)
        assert np.allclose(model.forces(x), chain_forces(model, x), rtol=1e-13, atol=1e-14)


def test_network_with_unit_offsets_reproduces_chain():
    chain = LatticeModel.chain(3, QUARTIC, 0.2, 0.5)
    strengths = {(b.site, b.offset): b.strength for b in chain.bonds}
    net = LatticeModel.network(3, QUARTIC, strengths)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.uniform(-1, 1, chain.size)
        y = rng.uniform(-1, 1, chain.size)
        assert np.array_equal(net.forces(x), chain.forces(x))
        assert net.energy(x, y) == chain.energy(x, y)


def test_forces_are_energy_gradient():
    model = LatticeModel.network(2, QUARTIC, {(-2, 1): 0.3, (-1, 2): 0.1, (0, 1): 0.2},
                                 CouplingPotential((0, 0, 0, 0.5, 0.25)))
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, model.size)
    y = np.zeros(model.size)
    h = 1e-6
    for j in range(model.size):
        e = np.zeros(model.size)
        e[j] = h
        fd = (model.energy(x + e, y) - model.energy(x - e, y)) / (2 * h)
        assert -fd == pytest.approx(model.forces(x)[j], rel=1e-8, abs=1e-9)


def test_free_boundary_drops_outside_bonds():
    model = LatticeModel.chain(2, QUARTIC, 1.0, 1.0)
    assert len(model.bonds) == 4
    assert all(model.window.lo <= b.site + b.offset <= model.window.hi for b in model.bonds)


def test_model_validation():
    with pytest.raises(ConfigError):
        CouplingPotential((0.0, 1.0))
    with pytest.raises(ConfigError):
        CouplingPotential((0.0, 0.0))
    with pytest.raises(ConfigError):
        LatticeModel.network(1, QUARTIC, {(0, 0): 0.1})


def test_model_json_round_trip():
    model = LatticeModel.chain(2, QUARTIC, 1e-3, 2.0)
    back = LatticeModel.from_json(model.to_json())
    x = np.linspace(-0.5, 0.5, model.size)
    assert np.array_equal(back.forces(x), model.forces(x))
    assert back.coupling_l1 == model.coupling_l1


def single_harmonic():
    return LatticeModel(SiteWindow(0, 0), Potential.monomial(1), [])


def test_harmonic_closed_form():
    model = single_harmonic()
    periods = 100
    t_end = periods * 2 * math.pi / math.sqrt(2)
    traj = integrate_lattice(model, ([1.0], [0.0]), t_end, dt=1e-4, sample_dt=0.01)
    err = np.max(np.abs(traj.x[:, 0] - np.cos(math.sqrt(2) * traj.times)))
    assert err <= 1e-6


def test_time_reversal():
    model = LatticeModel.chain(1, QUARTIC, 0.1, 0.0)
    x0 = np.array([0.3, -0.2, 0.5])
    y0 = np.array([0.1, 0.4, -0.3])
    fwd = integrate_lattice(model, (x0, y0), 50.0, dt=1e-3)
    back = integrate_lattice(model, (fwd.x[-1], -fwd.y[-1]), 50.0, dt=1e-3)
    assert np.max(np.abs(back.x[-1] - x0)) <= 1e-8
    assert np.max(np.abs(-back.y[-1] - y0)) <= 1e-8


def test_coupled_energy_drift():
    model = LatticeModel.chain(3, QUARTIC, 0.05, 0.5)
    x0 = np.random.default_rng(3).uniform(-0.3, 0.3, model.size)
    traj = integrate_lattice(model, (x0, np.zeros(model.size)), 1e4, sample_dt=1.0)
    assert traj.energy_drift <= 1e-6


def test_integrator_rejects_bad_steps():
    model = single_harmonic()
    with pytest.raises(ConfigError):
        integrate_lattice(model, ([1.0], [0.0]), 10.0, dt=2.0)
    with pytest.raises(ConfigError):
        integrate_lattice(model, ([1.0, 0.0], [0.0]), 10.0)
    stiff = LatticeModel(SiteWindow(0, 0), Potential.monomial(1), [])
    with pytest.raises(UnstableStep):
        # just inside the stability bound 2 / sqrt(2) the energy error is large
        integrate_lattice(stiff, ([1.0], [0.0]), 10.0, dt=1.4)


def test_trajectory_csv_columns():
    model = LatticeModel.chain(1, QUARTIC, 0.0, 0.0)
    traj = integrate_lattice(model, (np.full(3, 0.1), np.zeros(3)), 1.0, dt=0.01, sample_dt=0.5)
    lines = traj.csv().splitlines()
    assert lines[0] == "t,x_-1,x_0,x_1"
    assert len(lines) == 1 + traj.times.size


def test_spectral_peak_recovers_frequency():
    dt = 0.25
    t = np.arange(40000) * dt
    for w in (1.1, 1.37, 2.9):
        assert spectral_peak(np.cos(w * t + 0.3), dt) == pytest.approx(w, abs=1e-4)


def test_uncoupled_reduction_is_integrable():
    model = LatticeModel.chain(2, QUARTIC, 0.0, 3.0)
    prof = lattice_profile(QUARTIC, 1.0, 0.1)
    xi = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
    H = build_reduced_hamiltonian(model, prof, xi)
    assert not H.blocks
    d1, d2, d3 = canonical_derivatives(prof, xi)
    for j in range(5):
        assert H.const[(j,)] == d1[j] and H.const[(j, j)] == d2[j] / 2 and H.const[(j, j, j)] == d3[j] / 6
    assert measure_error(H, d1, H.sigma) == (0.0, 0.0)


def two_site(eps, W):
    return LatticeModel(SiteWindow(0, 1), QUARTIC, [Bond(0, 1, eps, W)])


def test_two_site_cubic_coupling_matches_quadrature():
    W = CouplingPotential((0, 0, 0, 1.0))
    xi = np.array([0.3, 0.5])
    prof = lattice_profile(QUARTIC, 0.5, 0.3)
    chart = AngleActionChart(QUARTIC)
    caps = Truncation(16, 32)
    blocks = {}
    for eps in (1e-6, 1e-5):
        H = build_reduced_hamiltonian(two_site(eps, W), prof, xi, caps=caps, grid=64, chart=chart)
        blocks[eps] = H.blocks[()]
    # direct quadrature of eps W(x_1 - x_0) on a finer grid
    M = 96
    th = 2 * math.pi * np.arange(M) / M
    x0 = np.asarray(chart.forward(th, xi[0])[0], dtype=float)
    x1 = np.asarray(chart.forward(th, xi[1])[0], dtype=float)
    vals = W(x1[None, :] - x0[:, None])
    F = np.fft.fft2(vals) / M ** 2
    for eps, f in blocks.items():
        worst = 0.0
        for (k0, k1), c in zip(map(tuple, f.idx), f.coef):
            worst = max(worst, abs(c - eps * F[k0 % M, k1 % M]))
        assert worst <= 1e-9 * eps
    assert blocks[1e-5].norm(H.sigma) == pytest.approx(10 * blocks[1e-6].norm(H.sigma), rel=1e-9)


def test_default_chain_perturbation_bounded_by_coupling_mass():
    model = LatticeModel.chain(4, QUARTIC, 1e-6, 3.0)
    cfg = BreatherConfig(mode="small")
    xi = base_actions(model.window, cfg)
    prof = lattice_profile(QUARTIC, float(xi.max()), float(xi.min()))
    H = build_reduced_hamiltonian(model, prof, xi, caps=cfg.caps)
    # largest |W(x_{n+1} - x_n)| over the tori, from the chart
    chart = AngleActionChart(QUARTIC)
    amp = [float(np.max(np.abs(chart.forward(np.linspace(0, 2 * math.pi, 512), v)[0]))) for v in xi]
    w_max = max(float(CouplingPotential.quartic()(amp[i] + amp[i + 1])) for i in range(model.size - 1))
    p0 = H.blocks[()]
    grid = np.random.default_rng(0).uniform(0, 2 * math.pi, (4000, model.size))
    assert np.max(np.abs(p0.evaluate(grid))) <= model.coupling_l1 * w_max
    assert p0.norm(0.0) <= model.coupling_l1 * w_max


def test_uncoupled_breather_round_trip():
    model = LatticeModel.chain(1, QUARTIC, 0.0, 3.0)
    cfg = BreatherConfig(mode="large", xi_large=0.5)
    prof = lattice_profile(QUARTIC, 0.6, 0.4)
    cert = construct_breather(model, prof, cfg)
    assert np.array_equal(cert.omega.values, canonical_derivatives(prof, cert.xi)[0])
    assert all(u is None or u.is_zero() for u in cert.U)
    rep, _ = verify_breather(cert, model, horizon=2000.0)
    assert rep.passed, rep.to_json()
    assert rep.torus_distance <= 1e-6


def test_three_site_large_mode_certificate():
    model = LatticeModel.chain(1, QUARTIC, 1e-6, 3.0)
    cfg = BreatherConfig(mode="large", xi_large=0.5)
    prof = lattice_profile(QUARTIC, 0.6, 0.4)
    cert = construct_breather(model, prof, cfg)
    assert cert.verdict.holds
    assert cert.report.frequency_residual <= 1e-10


def test_large_coupling_diverges():
    model = LatticeModel.chain(1, QUARTIC, 0.1, 3.0)
    cfg = BreatherConfig(mode="large", xi_large=0.5)
    prof = lattice_profile(QUARTIC, 0.6, 0.4)
    with pytest.raises(Diverged):
        construct_breather(model, prof, cfg)


@pytest.fixture(scope="module")
def small_breather():
    model = LatticeModel.chain(3, QUARTIC, 1e-6, 3.0)
    cfg = BreatherConfig(mode="small")
    xi = base_actions(model.window, cfg)
    prof = lattice_profile(QUARTIC, float(xi.max()), float(xi.min()))
    return model, construct_breather(model, prof, cfg)


def test_off_torus_start_is_flagged(small_breather):
    model, cert = small_breather
    x0 = cert.x0.copy()
    x0[model.size // 2] += 1e-2
    rep, _ = verify_breather(cert, model, horizon=500.0, dt=5e-4, initial=(x0, cert.y0))
    assert not rep.checks["torus_distance"]
    assert not rep.passed
    on, _ = verify_breather(cert, model, horizon=500.0, dt=5e-4)
    assert on.torus_distance < rep.torus_distance


def test_small_mode_localization_rate(small_breather):
    model, cert = small_breather
    rep, _ = verify_breather(cert, model, horizon=500.0, dt=5e-4)
    assert rep.decay_rate is not None and rep.decay_rate >= model.R / 2
    # energies fall off at least as fast as the chosen actions
    assert rep.decay_orders >= 0.9 * math.log10(cert.xi.max() / cert.xi.min())
