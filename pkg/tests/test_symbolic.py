"""Worked instances of the term-rewriting rules."""

import pytest

from kirchhoffkit import symbolic as sym
from kirchhoffkit.errors import UnknownAtom


def test_D_of_gradient_factor():
    # D(grad psi) = grad(D psi) - grad u . grad psi
    f = sym.SymbolicField({("prod", (("psi", 0),)): 1})
    got = f.D()
    assert got.terms == {
        ("prod", (("psi", 1),)): 1,
        ("prod", (("u", 0), ("psi", 0))): -1,
    }


def test_D_of_gradient_of_u_matches_commutator_rule():
    # with psi = u the rule reads D(grad u) = grad Du - grad u . grad u
    f = sym.SymbolicField({("prod", (("u", 0),)): 1})
    got = f.D()
    assert got.terms == {
        ("prod", (("u", 1),)): 1,
        ("prod", (("u", 0), ("u", 0))): -1,
    }


def test_D_of_body_hessian_three_groups():
    # D( grad^2 rho {u-v, psi} ) expanded by hand from the rigid-tensor rules:
    #   + grad^2 rho {D(u-v), psi} + grad^2 rho {u-v, D psi}   (Leibniz)
    #   + grad^3 rho {u-v, u-v, psi}                            (transport)
    #   - grad^2 rho {R(r)(u-v), psi} - grad^2 rho {u-v, R(r) psi}
    f = sym.SymbolicField({("hbody", (((), "phi", 0), ((), "psi", 0))): 1})
    got = f.D()
    assert got.terms == {
        ("hbody", (((), "phi", 1), ((), "psi", 0))): 1,
        ("hbody", (((), "phi", 0), ((), "psi", 1))): 1,
        ("hbody", (((), "phi", 0), ((), "phi", 0), ((), "psi", 0))): 1,
        ("hbody", (((0,), "phi", 0), ((), "psi", 0))): -1,
        ("hbody", (((), "phi", 0), ((0,), "psi", 0))): -1,
    }


def test_D_of_rotation_word():
    f = sym.SymbolicField({("rot", (0,)): 1})
    got = f.D()
    assert got.terms == {("rot", (1,)): 1, ("rot", (0, 0)): 1}


def test_wall_term_gains_leading_u_argument():
    f = sym.SymbolicField({("hwall", (("u", 0), ("psi", 0))): 1})
    got = f.D()
    assert got.terms == {
        ("hwall", (("u", 1), ("psi", 0))): 1,
        ("hwall", (("u", 0), ("psi", 1))): 1,
        ("hwall", (("u", 0), ("u", 0), ("psi", 0))): 1,
    }


def test_cancellation_is_collected():
    f = sym.SymbolicField()
    f.add(("rot", (0,)), 2)
    f.add(("rot", (0,)), -2)
    assert len(f) == 0


def test_unknown_atom_raises():
    f = sym.SymbolicField({("mystery", ()): 1})
    with pytest.raises(UnknownAtom):
        f.D()


def test_slot_pattern_enforced_in_conversion():
    with pytest.raises(UnknownAtom):
        sym.prod_to_fluid_index(("prod", (("psi", 0), ("u", 0))))


def test_str_roundtrippable_enough():
    f = sym.SymbolicField({("prod", (("u", 0), ("psi", 2))): -3})
    assert "∇D^0u" in str(f) and "∇D^2psi" in str(f) and "-3" in str(f)
