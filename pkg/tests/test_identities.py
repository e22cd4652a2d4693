"""Coefficient tables: seeds, worked orders, oracle equivalence, bounds."""

from fractions import Fraction
from math import e, factorial

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kirchhoffkit import identities as idn
from kirchhoffkit import symbolic as sym
from kirchhoffkit.errors import BoundViolation
from kirchhoffkit.geometry import skew


# ---------------------------------------------------------------------------
# index sets and shifts
# ---------------------------------------------------------------------------


def test_fluid_index_set_k1():
    assert idn.enum_fluid_indices(1) == {(0, 0)}


def test_fluid_index_set_k2():
    assert idn.enum_fluid_indices(2) == {(1, 0), (0, 1), (0, 0, 0)}


@pytest.mark.parametrize("k", range(1, 13))
def test_fluid_index_count(k):
    assert len(idn.enum_fluid_indices(k)) == 2**k - 1


@pytest.mark.parametrize("k", range(1, 9))
def test_body_index_count_closed_form(k):
    assert len(idn.enum_body_indices(k)) == 3**k - 1


def test_shift_examples():
    assert idn.t_shift((0, 0), 1) == (1, 0)
    assert idn.t_insert((3, 4), 1) == (0, 3, 4)


@given(st.lists(st.integers(min_value=0, max_value=9), min_size=1, max_size=6),
       st.data())
def test_insert_delete_roundtrip(alpha, data):
    alpha = tuple(alpha)
    j = data.draw(st.integers(min_value=1, max_value=len(alpha) + 1))
    assert idn.t_delete(idn.t_insert(alpha, j), j) == alpha


@given(st.lists(st.integers(min_value=0, max_value=7), min_size=1, max_size=7))
def test_tau_prefix_property(sp):
    sp = tuple(sp)
    tau = idn.tau_positions(sp)
    # recompute by the alternative route: each tau_j is tau_{j-1} + s'_j
    alt = [0]
    for v in sp:
        alt.append(alt[-1] + v)
    assert tau == tuple(alt)
    assert tau[-1] == sum(sp)


# ---------------------------------------------------------------------------
# div / curl tables
# ---------------------------------------------------------------------------


def test_div_seed():
    c1, c2 = idn.div_curl_coefficients(1)
    assert dict(c1.items()) == {(0, 0): 1}
    assert dict(c2.items()) == {(0, 0): 1}


def test_div_k2_hand_expansion():
    # D tr{grad u grad psi} + source, expanded by hand
    c1, _ = idn.div_curl_coefficients(2)
    assert dict(c1.items()) == {(1, 0): 1, (0, 1): 2, (0, 0, 0): -2}


def test_div_growth_sane():
    for k in range(1, 9):
        c1, _ = idn.div_curl_coefficients(k)
        total = sum(abs(c) for _, c in c1.items())
        assert total / (factorial(k) * e**k) < 1.0


def test_wall_seed_and_k2():
    c3 = idn.wall_normal_coefficients(1)
    assert dict(c3.items()) == {(0, 0): -1}
    c3 = idn.wall_normal_coefficients(2)
    assert dict(c3.items()) == {(1, 0): -1, (0, 1): -2, (0, 0, 0): -1}


@pytest.mark.parametrize("k", range(1, 9))
def test_wall_all_nonpositive(k):
    c3 = idn.wall_normal_coefficients(k)
    assert all(c <= 0 for _, c in c3.items())


# ---------------------------------------------------------------------------
# body tables
# ---------------------------------------------------------------------------


def test_body_seed_k1():
    d1, d2 = idn.body_coefficients(1)
    assert dict(d1.items()) == {((1,), (0, 0)): 1, ((0, 0), (0, 0)): -1}
    assert dict(d2.items()) == {
        ((0,), (1,)): 1,
        ((0, 0), (0, 0)): 1,
        ((1,), (0, 0)): -1,
    }


def test_body_d1_k2_hand_expansion():
    d1, _ = idn.body_coefficients(2)
    expected = {
        ((1,), (1, 0)): 1,
        ((1,), (0, 1)): 2,
        ((0, 1), (0, 0, 0)): 2,
        ((2,), (0, 0, 0)): -1,
        ((0, 0), (1, 0)): -1,
        ((0, 0), (0, 1)): -2,
        ((0, 0, 0), (0, 0, 0)): -1,
        ((1, 0), (0, 0, 0)): 1,
    }
    assert dict(d1.items()) == expected


def test_body_d2_keeps_pure_derivative_chain():
    for k in (1, 2, 3, 4):
        _, d2 = idn.body_coefficients(k)
        assert d2[((0,), (k,))] == 1


# ---------------------------------------------------------------------------
# rotation table
# ---------------------------------------------------------------------------


def test_rotation_low_orders():
    assert dict(idn.rotation_coefficients(1).items()) == {(0,): 1}
    assert dict(idn.rotation_coefficients(2).items()) == {(1,): 1, (0, 0): 1}
    assert dict(idn.rotation_coefficients(3).items()) == {
        (2,): 1, (1, 0): 2, (0, 1): 1, (0, 0, 0): 1}


def _fd_weights(nodes, k):
    """Weights w with sum w_j f(x_j) ~ f^(k)(0); solves the moment system."""
    n = len(nodes)
    A = np.vander(nodes, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[k] = factorial(k)
    return np.linalg.solve(A, rhs)


def _integrate_Q(r_of_t, t_end, n_steps):
    """RK4 for Q' = (r ∧ ·)Q from 0 to t_end (either sign)."""
    Q = np.eye(3)
    dt = t_end / n_steps
    t = 0.0
    for _ in range(n_steps):
        k1 = skew(r_of_t(t)) @ Q
        k2 = skew(r_of_t(t + dt / 2)) @ (Q + dt / 2 * k1)
        k3 = skew(r_of_t(t + dt / 2)) @ (Q + dt / 2 * k2)
        k4 = skew(r_of_t(t + dt)) @ (Q + dt * k3)
        Q = Q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    return Q


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_rotation_identity_vs_finite_differences(k):
    # r(t) = (t, t^2, 1): r(0)=(0,0,1), r'(0)=(1,0,0), r''(0)=(0,2,0), rest 0
    def r_of_t(t):
        return np.array([t, t * t, 1.0])

    r_derivs = {0: np.array([0.0, 0.0, 1.0]),
                1: np.array([1.0, 0.0, 0.0]),
                2: np.array([0.0, 2.0, 0.0])}

    table = idn.rotation_coefficients(k)
    Qk = np.zeros((3, 3))
    for alpha, c in table.items():
        M = np.eye(3)
        for b in alpha:
            rb = r_derivs.get(b, np.zeros(3))
            M = M @ skew(rb)
        Qk += c * M  # times Q(0) = Id

    h = 0.08
    m = 5
    nodes = np.arange(-m, m + 1) * h
    w = _fd_weights(nodes, k)
    est = np.zeros((3, 3))
    for node, wj in zip(nodes, w):
        if node == 0.0:
            Qn = np.eye(3)
        else:
            Qn = _integrate_Q(r_of_t, node, max(1, int(round(abs(node) / 2e-4))))
        est += wj * Qn
    rel = np.linalg.norm(est - Qk) / max(np.linalg.norm(Qk), 1e-30)
    assert rel < 1e-5, rel


# ---------------------------------------------------------------------------
# Kato remainder
# ---------------------------------------------------------------------------


def test_kato_low_orders():
    assert dict(idn.kato_pressure_expansion(1).items()) == {}
    assert dict(idn.kato_pressure_expansion(2).items()) == {(0, 1): -1}
    assert dict(idn.kato_pressure_expansion(3).items()) == {
        (0, 2): -2, (1, 1): -1}


def test_kato_gradient_variant():
    tab = idn.kato_gradient_expansion(1)
    assert dict(tab.items()) == {(0, 0): -1}


# ---------------------------------------------------------------------------
# oracle equivalence (the core acceptance property, k <= 5)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("k", range(1, 6))
def test_oracle_div_curl(k):
    c1, c2 = idn.div_curl_coefficients(k)
    expanded = {sym.prod_to_fluid_index(t): c for t, c in sym.expand_div(k)}
    assert expanded == dict(c1.items()) == dict(c2.items())


@pytest.mark.parametrize("k", range(1, 6))
def test_oracle_wall_normal(k):
    c3 = idn.wall_normal_coefficients(k)
    expanded = {sym.prod_to_fluid_index(t): c
                for t, c in sym.expand_wall_normal(k)}
    assert expanded == dict(c3.items())


@pytest.mark.parametrize("k", range(1, 6))
def test_oracle_body_tables(k):
    d1, d2 = idn.body_coefficients(k)
    got1 = {sym.hbody_to_body_index(t): c
            for t, c in sym.expand_body_normal(k)}
    got2 = {sym.hbody_to_body_index(t): c
            for t, c in sym.expand_body_flux(k)}
    assert got1 == dict(d1.items())
    assert got2 == dict(d2.items())


@pytest.mark.parametrize("k", range(1, 6))
def test_oracle_rotation(k):
    ck = idn.rotation_coefficients(k)
    got = {t[1]: c for t, c in sym.expand_rotation(k)}
    assert got == dict(ck.items())


@pytest.mark.parametrize("k", range(1, 6))
def test_oracle_kato(k):
    tab = idn.kato_pressure_expansion(k)
    got = {t[1]: c for t, c in sym.expand_kato(k)}
    assert got == dict(tab.items())


# ---------------------------------------------------------------------------
# bounds, exhaustive to k = 8
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("k", range(1, 9))
def test_all_bounds_hold(k):
    c1, c2 = idn.div_curl_coefficients(k)
    c3 = idn.wall_normal_coefficients(k)
    d1, d2 = idn.body_coefficients(k)
    ck = idn.rotation_coefficients(k)
    for tab in (c1, c2, c3, d1, d2, ck,
                idn.kato_pressure_expansion(k)):
        assert tab.check_bounds()


def test_bound_violation_raises():
    bad = idn.IdentityExpansion("div", 2, {(0, 1): 5})
    with pytest.raises(BoundViolation):
        bad.check_bounds()


# ---------------------------------------------------------------------------
# Upsilon sums and gamma(L)
# ---------------------------------------------------------------------------


def test_upsilon_examples():
    assert idn.upsilon_sum(1, 4) == Fraction(1, 25)
    # compositions (0,2), (1,1), (2,0): 1/9 + 1/16 + 1/9 (Upsilon is a
    # product over both entries, so (1,1) contributes 1/16)
    assert idn.upsilon_sum(2, 2) == Fraction(1, 9) + Fraction(1, 16) + Fraction(1, 9)
    assert idn.upsilon_sum(2, 2) == Fraction(41, 144)
    assert idn.upsilon_bound(2, 2) == Fraction(400, 9)


def test_upsilon_bound_exhaustive():
    for s in range(1, 6):
        for m in range(0, 13):
            assert idn.upsilon_sum(s, m) <= idn.upsilon_bound(s, m)


def test_gamma_monotone_and_limits():
    Ls = np.geomspace(10, 1e4, 13)
    vals = [idn.gamma_of_L(L) for L in Ls]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    # value frozen from direct evaluation of the defining formula:
    # sup at k=1: 3*2*(c_rho C_d)^2*20^2*((k+1)/(k-s+2))^2 / L = 38400/L
    assert idn.gamma_of_L(1e6) == pytest.approx(0.0384, rel=1e-12)
    assert idn.gamma_of_L(1e6, c_rho=4.0) > idn.gamma_of_L(1e6, c_rho=2.0)


def test_smallest_L_satisfies_condition():
    c_r = 3.0
    L = idn.smallest_L(c_r)
    assert idn.gamma_of_L(L) <= 1.0 / (3.0 * c_r)
    assert idn.gamma_of_L(L / 1.1) > 1.0 / (3.0 * c_r)


def test_table_rows_csv_view():
    rows = idn.table_rows("body-normal", 2)
    assert all(set(r) == {"kind", "k", "s", "s_prime", "alpha",
                          "coefficient", "bound", "slack"} for r in rows)
    assert any(r["coefficient"] == "-2" for r in rows)
    for r in rows:
        assert Fraction(r["slack"]) >= 0
