import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biphoton.atomic import CONSTANTS, default_scheme
from biphoton.errors import ConfigurationError, StiffnessError
from biphoton.spectrum import SfwmParams, linear_susceptibility
from biphoton.zeeman import (
    MODES,
    DensityMatrixBlocks,
    MaxwellBlochModel,
    SimConfig,
    build_model,
    coupled_rhs,
    density_rhs,
    extinction_db,
    initial_state,
    integrate,
    kutta_merson_step,
    polarization_extinction,
    polarization_vector,
    propagate_fields,
    rabi_operator,
    run_ensemble,
    run_trajectory,
    to_linear,
    vacuum_seed_step,
)

SCHEME = default_scheme()
MODEL = build_model(SCHEME, SimConfig())


def two_level(od: float) -> MaxwellBlochModel:
    return MaxwellBlochModel(np.array([[1.0]]), np.ones((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1),
                             np.ones((1, 1, 1)), np.array([od / 2]), np.array([True]))


def lambda_system(delta: float, gamma12: float) -> MaxwellBlochModel:
    """|1>, |2> ground and |3> excited; probe on 1-3 and control on 2-3, no propagation."""
    r = math.sqrt(0.5)
    return MaxwellBlochModel(np.array([[r], [r]]), np.eye(2), np.array([[0.0, gamma12], [gamma12, 0.0]]),
                             np.array([0.0, -delta]), np.array([-delta]), np.array([[[1.0, 0.0]], [[0.0, 1.0]]]),
                             np.zeros(2), np.array([False, False]))


def random_state(seed: int, nz: int = 3, model: MaxwellBlochModel = MODEL) -> DensityMatrixBlocks:
    rng = np.random.default_rng(seed)
    n = model.n_ground + model.n_excited
    a = rng.normal(size=(nz, n, n)) + 1j * rng.normal(size=(nz, n, n))
    rho = a @ np.conj(np.swapaxes(a, 1, 2))
    rho /= np.trace(rho, axis1=1, axis2=2).real[:, None, None]
    ng = model.n_ground
    return DensityMatrixBlocks(rho[:, :ng, :ng], rho[:, ng:, :ng], rho[:, ng:, ng:])


# ---------------------------------------------------------------------------
# Kutta-Merson
# ---------------------------------------------------------------------------

def test_km_zero_rhs_leaves_state_unchanged():
    y = np.array([1.0, -2.0, 3.5])
    step = kutta_merson_step(lambda t, y: np.zeros_like(y), 0.0, y, 0.1, 1e-8)
    assert step.accepted
    assert step.error == 0.0
    assert np.array_equal(step.y, y)
    assert step.dt_next == pytest.approx(0.5)


def test_km_exponential_decay_within_tolerance():
    tol = 1e-8
    t, y, ok, _ = integrate(lambda t, y: -y, np.array([1.0]), (0.0, 1.0), tol=tol)
    assert t == 1.0
    assert abs(y[0] - math.exp(-1)) <= tol
    assert ok > 1


def test_km_harmonic_oscillator_amplitude_drift():
    tol = 1e-8
    f = lambda t, y: np.array([y[1], -y[0]])  # noqa: E731
    _, y, _, _ = integrate(f, np.array([1.0, 0.0]), (0.0, 200 * math.pi), tol=tol, dt0=0.1)
    assert abs(math.hypot(*y) - 1.0) <= 100 * tol


def test_km_rejects_large_error_and_shrinks_step():
    step = kutta_merson_step(lambda t, y: -50 * y, 0.0, np.array([1.0]), 1.0, 1e-10)
    assert not step.accepted
    assert step.dt_next == pytest.approx(0.2)
    assert step.y[0] == 1.0


def test_km_global_error_follows_tolerance():
    tols = 10.0 ** -np.arange(5, 11)
    errs = []
    for tol in tols:
        _, y, _, _ = integrate(lambda t, y: -y, np.array([1.0]), (0.0, 1.0), tol=tol)
        errs.append(abs(y[0] - math.exp(-1)))
    slope = np.polyfit(np.log(tols), np.log(errs), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.3)
    assert np.all(np.diff(errs) < 0)


def test_km_step_underflow_raises():
    with pytest.raises(StiffnessError):
        integrate(lambda t, y: -1e9 * y, np.array([1.0]), (0.0, 1.0), tol=1e-12, dt0=1.0, dt_min=1e-6)
    with pytest.raises(ConfigurationError):
        kutta_merson_step(lambda t, y: y, 0.0, np.array([1.0]), 0.1, 0.0)


def test_km_complex_state():
    _, y, _, _ = integrate(lambda t, y: 1j * y, np.array([1.0 + 0j]), (0.0, math.pi), tol=1e-10)
    assert y[0] == pytest.approx(-1.0, abs=1e-8)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def synthetic_source(z):
    return np.exp(1.3 * z) * np.cos(4 * z) + 1j * np.sin(3 * z)


def synthetic_integral(z):
    # -i * integral of the source from 0 to z
    a = 1.3**2 + 16
    re = np.exp(1.3 * z) * (1.3 * np.cos(4 * z) + 4 * np.sin(4 * z)) / a - 1.3 / a
    im = (1 - np.cos(3 * z)) / 3
    return -1j * (re + 1j * im)


def test_simpson_fourth_order_convergence():
    model = two_level(2.0)
    nodes = np.array([11, 21, 41, 81, 161])
    errs = []
    for nz in nodes:
        z = np.linspace(0, 1, nz)
        e = propagate_fields(synthetic_source(z).reshape(nz, 1, 1), np.zeros(1), model)[0]
        errs.append(np.abs(e - 1.0 * synthetic_integral(z)).max())
    slope = np.polyfit(np.log(1.0 / (nodes - 1)), np.log(errs), 1)[0]
    assert slope == pytest.approx(4.0, abs=0.3)
    assert errs[-2] / errs[-1] == pytest.approx(16, rel=0.1)


def test_propagation_needs_odd_node_count():
    with pytest.raises(ConfigurationError):
        propagate_fields(np.zeros((4, 1, 1)), np.zeros(1), two_level(1.0))
    with pytest.raises(ConfigurationError):
        coupled_rhs(two_level(1.0), np.zeros(1), 1)


def test_zero_source_keeps_fields_constant():
    boundary = np.arange(8) + 0.5j
    out = propagate_fields(np.zeros((7, 8, 8)), boundary, MODEL)
    assert np.array_equal(out, np.repeat(boundary[:, None], 7, axis=1))


def test_held_modes_ignore_the_source():
    rho = random_state(1, 5)
    out = propagate_fields(rho.eg, np.ones(8), MODEL)
    for m, name in enumerate(MODES):
        if name[0] in "PC":
            assert np.all(out[m] == 1.0)


@pytest.mark.parametrize("od", [0.5, 2.0, 4.0])
def test_two_level_weak_probe_beer_lambert(od):
    nz, probe = 21, 1e-4
    f, fields = coupled_rhs(two_level(od), np.array([probe + 0j]), nz)
    y0 = np.zeros((nz, 2, 2), complex)
    y0[:, 0, 0] = 1
    _, y, _, _ = integrate(f, y0.ravel(), (0.0, 30.0), tol=1e-9, dt_max=0.1)
    out = fields(y)[0, -1] / probe
    assert abs(out) == pytest.approx(math.exp(-od / 2), rel=0.02)
    assert abs(out.imag) < 1e-6


@pytest.mark.parametrize("delta", [-3.0, -1.0, -0.3, 0.0, 0.3, 1.0, 3.0])
def test_three_level_reduction_matches_eit_susceptibility(delta):
    omega_c, gamma12, probe = 2.8, 0.057, 1e-4
    f, _ = coupled_rhs(lambda_system(delta, gamma12), np.array([probe, omega_c], complex), 3)
    y0 = np.zeros((3, 3, 3), complex)
    y0[:, 0, 0] = 1
    _, y, _, _ = integrate(f, y0.ravel(), (0.0, 150.0), tol=1e-10, dt_max=0.2)
    chi_sim = -2 * y.reshape(3, 3, 3)[0, 2, 0] / probe

    params = SfwmParams(od=15.0, omega_p=1e6)
    g = params.gamma_d1
    params = params.replace(omega_c=omega_c * g, gamma12=gamma12 * g)
    scale = CONSTANTS.epsilon0 * CONSTANTS.hbar * g / params.scheme.dipoles.mu13**2
    chi = linear_susceptibility("AS", delta * g, params, density=1.0) * scale
    assert abs(chi_sim - chi) <= 0.05 * abs(chi)


# ---------------------------------------------------------------------------
# density matrix equations
# ---------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_full_matrix_rhs_matches_block_equations(seed):
    rng = np.random.default_rng(seed)
    boundary = rng.normal(size=8) + 1j * rng.normal(size=8)
    rho = random_state(seed, 5)
    f, _ = coupled_rhs(MODEL, boundary, 5)
    fast = f(0.0, rho.full().ravel()).reshape(5, 16, 16)
    omega = rabi_operator(propagate_fields(rho.eg, boundary, MODEL), MODEL)
    d = density_rhs(rho, omega, MODEL)
    assert np.allclose(fast, d.full(), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rhs_preserves_trace_and_hermiticity(seed):
    rng = np.random.default_rng(seed)
    rho = random_state(seed, 3)
    omega = rng.normal(size=(3, 8, 8)) + 1j * rng.normal(size=(3, 8, 8))
    d = density_rhs(rho, omega, MODEL)
    assert np.allclose(d.trace(), 0.0, atol=1e-12)
    assert d.hermiticity_error() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rhs_commutes_with_adjoint(seed):
    rng = np.random.default_rng(seed)
    rho = random_state(seed, 3)
    gg = rho.gg + 0.3j * rng.normal(size=rho.gg.shape)
    ee = rho.ee + 0.3j * rng.normal(size=rho.ee.shape)
    omega = rng.normal(size=(3, 8, 8)) + 1j * rng.normal(size=(3, 8, 8))

    def adj(a):
        return np.conj(np.swapaxes(a, 1, 2))

    d = density_rhs(DensityMatrixBlocks(gg, rho.eg, ee), omega, MODEL)
    d_adj = density_rhs(DensityMatrixBlocks(adj(gg), rho.eg, adj(ee)), omega, MODEL)
    assert np.allclose(adj(d.gg), d_adj.gg, atol=1e-12)
    assert np.allclose(adj(d.ee), d_adj.ee, atol=1e-12)


def test_dark_ground_state_is_stationary():
    rho = initial_state(SCHEME, SimConfig(z_nodes=3, initial_populations=tuple([0.1] * 5 + [0.25, 0.25, 0.0])))
    d = density_rhs(rho, np.zeros((3, 8, 8), complex), MODEL)
    assert np.abs(d.full()).max() == 0.0


@pytest.mark.parametrize("label, m", [("3", 0), ("4", 2), ("4", -1)])
def test_single_excited_state_decay(label, m):
    excited = SCHEME.excited_states()
    e = next(i for i, s in enumerate(excited) if s.manifold == label and s.M == m)
    p = 0.3
    gg = np.zeros((1, 8, 8), complex)
    gg[0, 0, 0] = 1 - p
    ee = np.zeros((1, 8, 8), complex)
    ee[0, e, e] = p
    d = density_rhs(DensityMatrixBlocks(gg, np.zeros((1, 8, 8), complex), ee), np.zeros((1, 8, 8), complex), MODEL)
    rate = SCHEME.linewidth(label) / SCHEME.gamma_d1
    assert d.ee[0, e, e].real == pytest.approx(-p * rate)
    assert np.count_nonzero(np.abs(d.ee[0]) > 1e-15) == 1
    assert np.trace(d.gg[0]).real == pytest.approx(p * rate)
    assert d.trace()[0] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(d.gg[0], np.diag(np.diag(d.gg[0])))


def test_density_rhs_rejects_shape_mismatch():
    rho = random_state(0, 3)
    with pytest.raises(ConfigurationError):
        density_rhs(rho, np.zeros((3, 8, 7)), MODEL)
    with pytest.raises(ConfigurationError):
        MaxwellBlochModel(np.ones((2, 1)), np.ones((3, 3)), np.zeros((2, 2)), np.zeros(2), np.zeros(1),
                          np.ones((1, 1, 2)), np.ones(1), np.ones(1, bool))


def test_model_structure():
    assert MODEL.n_ground == 8 and MODEL.n_excited == 8
    assert MODEL.names == MODES
    assert MODEL.coupling[MODES.index("AS+")] == pytest.approx(7.5)
    # ground decoherence only between distinct sublevels
    assert np.all(np.diag(MODEL.gamma) == 0)
    assert MODEL.gamma[0, 1] == pytest.approx(0.057)
    # no cross-line excited products in the decay matrix
    lines = [SCHEME.manifold(e.manifold).line for e in SCHEME.excited_states()]
    for i, a in enumerate(lines):
        for j, b in enumerate(lines):
            if a != b:
                assert MODEL.decay[i, j] == 0


def test_initial_state_validation():
    rho = initial_state(SCHEME, SimConfig(z_nodes=3))
    assert np.allclose(np.diag(rho.gg[0]).real, [1 / 3] * 3 + [0] * 5)
    with pytest.raises(ConfigurationError):
        initial_state(SCHEME, SimConfig(z_nodes=3, initial_populations=(0.5,) * 8))
    with pytest.raises(ConfigurationError):
        initial_state(SCHEME, SimConfig(z_nodes=3, initial_populations=(1.0,)))


# ---------------------------------------------------------------------------
# polarization bookkeeping
# ---------------------------------------------------------------------------

def test_linear_basis_is_orthonormal_and_rotates():
    h, v = polarization_vector("H"), polarization_vector("V")
    assert abs(np.vdot(h, v)) < 1e-15
    assert np.linalg.norm(h) == pytest.approx(1.0)
    rotation = np.array([np.exp(-1j * math.pi / 2), np.exp(1j * math.pi / 2)])
    assert np.allclose(rotation * h, v)
    assert np.allclose(to_linear(h), [1, 0]) and np.allclose(to_linear(v), [0, 1])
    with pytest.raises(ConfigurationError):
        polarization_vector("diagonal")


def mode_operator(field, pol):
    vec = polarization_vector(pol)
    return vec[0] * MODEL.modes[MODES.index(field + "+")] + vec[1] * MODEL.modes[MODES.index(field + "-")]


def test_isotropic_loop_amplitudes_pair_orthogonal_outputs():
    # weak-field amplitude of the closed loop 1 -P-> 4 -S-> 2 -C-> 3 -AS-> 1 for
    # an isotropic F=1 population: only the crossed combinations survive, with equal weight
    pops = np.diag([1 / 3] * 3 + [0] * 5)
    weight = {}
    for s in "HV":
        for a in "HV":
            loop = (mode_operator("AS", a).conj().T @ mode_operator("C", "V")
                    @ mode_operator("S", s).conj().T @ mode_operator("P", "H"))
            weight[s + a] = abs(np.trace(loop @ pops)) ** 2
    assert weight["HH"] < 1e-30 and weight["VV"] < 1e-30
    assert weight["HV"] == pytest.approx(weight["VH"])
    assert weight["HV"] == pytest.approx(1 / 20736)


def test_extinction_examples():
    t = np.linspace(0, 1, 11)
    sigma = np.tile(polarization_vector("sigma+"), (11, 1))
    assert extinction_db(sigma, t, "H") == pytest.approx(0.0, abs=1e-12)
    v = np.tile(polarization_vector("V"), (11, 1))
    assert extinction_db(v, t, "H") == 60.0
    assert extinction_db(v, t, "H", cap_db=30) == 30.0
    assert extinction_db(v, t, "V") == -60.0
    assert math.isnan(extinction_db(np.zeros((11, 2)), t, "H"))
    mixed = np.tile(0.1 * polarization_vector("H") + polarization_vector("V"), (11, 1))
    assert extinction_db(mixed, t, "H") == pytest.approx(20.0)


# ---------------------------------------------------------------------------
# vacuum seed
# ---------------------------------------------------------------------------

def test_vacuum_seed_limits():
    rng = np.random.default_rng(0)
    prev = np.array([0.3 + 0.1j, -0.2j])
    nxt = vacuum_seed_step(prev, 1e-14, rng, 1e-5)
    assert np.allclose(nxt, prev, atol=1e-11)
    with pytest.raises(ConfigurationError):
        vacuum_seed_step(prev, 0.0, rng, 1e-5)
    traj = run_trajectory(SimConfig(z_nodes=3, duration=0.5))
    assert np.all(traj.seed[0] == 0)


def test_vacuum_seed_stationary_statistics():
    e_vac, rate, dt = 1e-5, SCHEME.gamma_d2 / SCHEME.gamma_d1, 0.05
    rng = np.random.default_rng(1)
    e = np.zeros((5000, 2), complex)
    for _ in range(200):  # ten correlation times
        e = vacuum_seed_step(e, dt, rng, e_vac, rate)
    start = e.copy()
    lags, corr = [], []
    for k in range(1, 41):
        e = vacuum_seed_step(e, dt, rng, e_vac, rate)
        lags.append(k * dt)
        corr.append(abs(np.mean(e * np.conj(start))) ** 2)
    samples = start.ravel()
    assert np.mean(np.abs(samples) ** 2) == pytest.approx(e_vac**2, rel=0.05)
    tau = -1.0 / np.polyfit(lags, np.log(np.array(corr) / e_vac**4), 1)[0]
    assert tau == pytest.approx(1.0 / rate, rel=0.10)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def test_zero_pump_generates_nothing():
    traj = run_trajectory(SimConfig(z_nodes=3, duration=10.0, omega_p=0.0))
    seed_energy = traj.energy(traj.seed)
    assert seed_energy > 0
    assert traj.energy(traj.generated("S")) <= 1e-12 * seed_energy
    assert traj.energy(traj.generated("AS")) <= 1e-12 * seed_energy
    s, a = polarization_extinction(traj, SimConfig(omega_p=0.0))
    assert math.isnan(a)


@pytest.fixture(scope="module")
def short_run():
    cfg = SimConfig(z_nodes=5, duration=20.0)
    return cfg, run_trajectory(cfg, keep_state=True)


def test_trace_hermiticity_and_positivity(short_run):
    cfg, traj = short_run
    assert traj.trace_error <= 10 * cfg.tol
    assert traj.hermiticity_error <= 10 * cfg.tol
    assert traj.min_eigenvalue >= -10 * cfg.tol
    assert traj.final_state.trace() == pytest.approx(np.ones(5), abs=10 * cfg.tol)
    assert traj.steps > 100 and traj.output.shape == (traj.t.size, 8)


def test_drives_are_held_at_their_boundary(short_run):
    cfg, traj = short_run
    assert np.allclose(traj.field("P"), cfg.omega_p * polarization_vector("H"))
    assert np.allclose(traj.field("C"), cfg.omega_c * polarization_vector("V"))


def test_stokes_orthogonal_to_horizontal_pump(short_run):
    cfg, traj = short_run
    s_ext, _ = polarization_extinction(traj, cfg)
    assert s_ext > 0


def test_stokes_orthogonal_to_pump_in_parallel_configuration():
    cfg = SimConfig(z_nodes=5, duration=20.0, pump_polarization="V", control_polarization="V")
    s_ext, _ = polarization_extinction(run_trajectory(cfg), cfg)
    assert s_ext > 0


def test_trajectories_reproducible_by_seed():
    cfg = SimConfig(z_nodes=3, duration=2.0, seed=5)
    a, b = run_trajectory(cfg), run_trajectory(cfg)
    assert np.array_equal(a.output, b.output)
    c = run_trajectory(cfg.replace(seed=6))
    assert not np.array_equal(a.seed, c.seed)


def test_ensemble_is_executor_independent():
    cfg = SimConfig(z_nodes=3, duration=2.0, trajectories=3, seed=2)
    serial = run_ensemble(cfg)
    with ThreadPoolExecutor(2) as pool:
        threaded = run_ensemble(cfg, executor=pool)
    assert np.array_equal(serial.extinction_s, threaded.extinction_s)
    assert np.array_equal(serial.gain_as, threaded.gain_as)
    assert len(set(serial.extinction_s.tolist())) == 3
    summary = serial.summary()
    assert summary["trajectories"] == 3
    assert summary["trace_error_max"] <= 10 * cfg.tol


def test_sim_config_validation_and_roundtrip():
    for bad in ({"z_nodes": 4}, {"z_nodes": 1}, {"dt_max": 1.0}, {"tol": 0.0}, {"duration": -1.0},
                {"pump_polarization": "diagonal"}, {"e_vacuum": 0.0}):
        with pytest.raises(ConfigurationError):
            SimConfig(**bad)
    cfg = SimConfig(pump_polarization=(1.0, 1j), initial_populations=(0.5, 0.5) + (0.0,) * 6)
    again = SimConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigurationError):
        SimConfig.from_dict({"bogus": 1})
