import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sympy import Rational, S
from sympy.physics.wigner import clebsch_gordan as sympy_cg
from sympy.physics.wigner import wigner_6j

from biphoton.atomic import (
    CONSTANTS,
    LevelScheme,
    ZeemanState,
    build_structure_matrices,
    cg_coefficient,
    clebsch_gordan,
    default_scheme,
)
from biphoton.errors import ConfigurationError


def oracle_cg(F_e, M_e, F_g, M_g):
    q = M_e - M_g
    if abs(q) > 1:
        return 0.0
    return float(sympy_cg(S(F_g), S(1), S(F_e), S(M_g), S(q), S(M_e)))


def test_constants_positive():
    assert CONSTANTS.hbar > 0 and CONSTANTS.epsilon0 > 0 and CONSTANTS.c > 0
    assert CONSTANTS.c == 299792458.0


def test_selection_rules_return_zero():
    assert clebsch_gordan(2, 2, 1, 0) == 0.0
    assert clebsch_gordan(3, 0, 1, 0) == 0.0


def test_stretched_state_value():
    # <1 1; 1 1 | 2 2> = 1
    assert clebsch_gordan(2, 2, 1, 1) == pytest.approx(oracle_cg(2, 2, 1, 1), abs=1e-14)
    assert clebsch_gordan(2, 2, 1, 1) == pytest.approx(1.0)


@pytest.mark.parametrize("F_e", [0, 1, 2, 3])
@pytest.mark.parametrize("F_g", [0, 1, 2, 3])
def test_cg_matches_sympy_table(F_e, F_g):
    for M_e in range(-F_e, F_e + 1):
        for M_g in range(-F_g, F_g + 1):
            expected = oracle_cg(F_e, M_e, F_g, M_g) if abs(F_e - F_g) <= 1 else 0.0
            assert clebsch_gordan(F_e, M_e, F_g, M_g) == pytest.approx(expected, abs=1e-13)


def test_half_integer_coupling():
    value = cg_coefficient(Rational(1, 2), Rational(1, 2), Rational(1, 2), Rational(-1, 2), 1, 0)
    assert value == pytest.approx(1 / math.sqrt(2))


@given(st.integers(0, 4), st.data())
@settings(max_examples=60, deadline=None)
def test_orthogonality_sum_over_ground_and_photon(F_e, data):
    F_g = data.draw(st.integers(max(0, F_e - 1), F_e + 1))
    if F_e == 0 and F_g == 0:
        return
    M_e = data.draw(st.integers(-F_e, F_e))
    # sum over (M_g, q) of |<F_g M_g; 1 q | F_e M_e>|^2 = 1
    total = sum(clebsch_gordan(F_e, M_e, F_g, M_g) ** 2 for M_g in range(-F_g, F_g + 1))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_zeeman_state_rejects_large_m():
    with pytest.raises(ConfigurationError):
        ZeemanState("1", 1, 2)


def test_default_scheme_has_sixteen_states():
    scheme = default_scheme()
    assert scheme.n_states == 16
    assert scheme.n_ground == 8 and scheme.n_excited == 8
    assert scheme.gamma_d1 == pytest.approx(2 * math.pi * 5.75e6)
    assert scheme.gamma_d2 == pytest.approx(2 * math.pi * 6.06e6)
    assert scheme.gamma12 == pytest.approx(0.057 * scheme.gamma_d1)
    assert scheme.detuning == pytest.approx(53 * scheme.gamma_d2)


def test_scheme_roundtrip_through_dict():
    scheme = default_scheme()
    again = LevelScheme.from_dict(scheme.to_dict())
    assert again == scheme


def test_scheme_rejects_negative_rates():
    doc = default_scheme().to_dict()
    doc["decay_rates"]["D1"] = -1.0
    with pytest.raises(ConfigurationError):
        LevelScheme.from_dict(doc)


def test_structure_matrix_shapes():
    C_ge, R_g, gamma = build_structure_matrices(default_scheme())
    assert C_ge.shape == (8, 8)
    assert R_g.shape == (8, 8) and gamma.shape == (8, 8)


def test_kronecker_and_decoherence_entries():
    scheme = default_scheme()
    _, R_g, gamma = build_structure_matrices(scheme)
    ground = scheme.ground_states()
    idx = {(g.F, g.M): i for i, g in enumerate(ground)}
    assert R_g[idx[(1, -1)], idx[(1, 1)]] == 1.0
    assert R_g[idx[(1, 0)], idx[(2, 0)]] == 0.0
    assert gamma[idx[(1, 0)], idx[(2, 0)]] == pytest.approx(scheme.gamma12)
    assert gamma[idx[(2, 1)], idx[(2, 1)]] == 0.0
    assert np.allclose(gamma, gamma.T)
    assert np.all(np.diag(gamma) == 0)


def test_coupling_matrix_is_psd_and_hermitian():
    for branching in (True, False):
        C_ge, _, _ = build_structure_matrices(default_scheme(), branching=branching)
        prod = C_ge.T @ C_ge
        assert np.allclose(prod, prod.T)
        assert np.linalg.eigvalsh(prod).min() > -1e-12


def test_branching_weighting_gives_unit_decay():
    C_ge, _, _ = build_structure_matrices(default_scheme())
    assert np.allclose(np.diag(C_ge.T @ C_ge), 1.0)
    bare, _, _ = build_structure_matrices(default_scheme(), branching=False)
    # each excited sublevel couples to both ground manifolds with unit CG sums
    assert np.allclose(np.diag(bare.T @ bare), 2.0)


def _branching_oracle(J_e, F_e, F_g, I=Rational(3, 2), J_g=Rational(1, 2)):
    six = wigner_6j(J_e, F_e, I, F_g, J_g, 1)
    return float((2 * F_g + 1) * (2 * J_e + 1) * six**2)


def test_shipped_branching_ratios_match_6j():
    b = default_scheme().dipoles.branching
    assert b[("3", "1")] == pytest.approx(_branching_oracle(Rational(1, 2), 1, 1))
    assert b[("3", "2")] == pytest.approx(_branching_oracle(Rational(1, 2), 1, 2))
    assert b[("4", "1")] == pytest.approx(_branching_oracle(Rational(3, 2), 2, 1))
    assert b[("4", "2")] == pytest.approx(_branching_oracle(Rational(3, 2), 2, 2))


def test_configurable_excited_f_changes_state_count():
    doc = default_scheme().to_dict()
    for m in doc["manifolds"]:
        if m["label"] == "4":
            m["F"] = 1
    doc["branching"]["4->1"] = 5 / 6
    doc["branching"]["4->2"] = 1 / 6
    scheme = LevelScheme.from_dict(doc)
    assert scheme.n_states == 14
    C_ge, _, _ = build_structure_matrices(scheme)
    assert C_ge.shape == (8, 6)
