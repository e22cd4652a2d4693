"""Term-rewriting oracle for the coefficient tables in `identities`.

Terms are formal expressions over the atoms

* matrix factors  grad D^a u  /  grad D^a psi   (products taken under tr/as),
* multilinear forms  grad^s rho { arg_1, ..., arg_s },
* rotation words  R(r^(b1)) ... R(r^(bm)) applied to arguments or to Q,
* contracted pairs  grad D^a u . D^b (.)  for the pressure remainder.

The material derivative acts through the primitive commutator and transport
rules (Leibniz on products and arguments; grad D^a v -> grad D^{a+1} v minus
a left grad-u insertion; static tensors transported by u; body tensors by
u - v plus rotation insertions). Expanding D^k of a seed expression and
collecting structurally equal terms reproduces the integer tables, which the
tests check term by term.

A term is `(kind, payload)`:

* ("prod",  ((field, order), ...))           field in {"u", "psi"}
* ("hwall", ((field, order), ...))
* ("hbody", (((rot_orders), field, order), ...))  field in {"phi", "psi", "sigma"}
* ("rot",   (orders...))                      the word R_alpha[r] applied to Q
* ("kato",  (a, b))
"""

from __future__ import annotations

from .errors import UnknownAtom

__all__ = [
    "SymbolicField",
    "symbolic_D",
    "expand_div",
    "expand_wall_normal",
    "expand_body_normal",
    "expand_body_flux",
    "expand_rotation",
    "expand_kato",
    "prod_to_fluid_index",
    "hbody_to_body_index",
]


class SymbolicField:
    """A finite integer combination of formal terms."""

    def __init__(self, terms=None):
        self.terms = dict(terms or {})

    def copy(self):
        return SymbolicField(self.terms)

    def add(self, term, coeff=1):
        if coeff == 0:
            return
        new = self.terms.get(term, 0) + coeff
        if new == 0:
            self.terms.pop(term, None)
        else:
            self.terms[term] = new

    def __eq__(self, other):
        return isinstance(other, SymbolicField) and self.terms == other.terms

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(sorted(self.terms.items()))

    def D(self):
        """Material derivative, term by term."""
        out = SymbolicField()
        for term, coeff in self.terms.items():
            for t2, c2 in _d_term(term):
                out.add(t2, coeff * c2)
        return out

    def __str__(self):
        bits = []
        for term, coeff in sorted(self.terms.items()):
            bits.append(f"{'+' if coeff >= 0 else '-'}{abs(coeff)}*{_fmt(term)}")
        return " ".join(bits) if bits else "0"

    __repr__ = __str__


def symbolic_D(expr: SymbolicField) -> SymbolicField:
    return expr.D()


def _fmt(term):
    kind, payload = term
    if kind == "prod":
        return "·".join(f"∇D^{o}{f}" for f, o in payload)
    if kind == "hwall":
        args = ", ".join(f"D^{o}{f}" for f, o in payload)
        return f"∇^{len(payload)}ρΩ{{{args}}}"
    if kind == "hbody":
        args = []
        for rots, f, o in payload:
            pre = "".join(f"R(r^{b})" for b in rots)
            args.append(f"{pre}D^{o}{f}")
        return f"∇^{len(payload)}ρ{{{', '.join(args)}}}"
    if kind == "rot":
        return "".join(f"R(r^{b})" for b in payload) + "Q"
    if kind == "kato":
        a, b = payload
        return f"∇D^{a}u·D^{b}u"
    raise UnknownAtom(f"unknown term kind {kind!r}")


# ---------------------------------------------------------------------------
# derivative rules
# ---------------------------------------------------------------------------


def _d_term(term):
    kind, payload = term
    if kind == "prod":
        return _d_prod(payload)
    if kind == "hwall":
        return _d_hwall(payload)
    if kind == "hbody":
        return _d_hbody(payload)
    if kind == "rot":
        return _d_rot(payload)
    if kind == "kato":
        raise UnknownAtom(
            "kato terms are expanded by their own driver, not by D")
    raise UnknownAtom(f"unknown term kind {kind!r}")


def _d_prod(factors):
    """Leibniz + the gradient commutator on a matrix product."""
    out = []
    for i, (f, o) in enumerate(factors):
        bumped = factors[:i] + ((f, o + 1),) + factors[i + 1:]
        out.append((("prod", bumped), 1))
        inserted = factors[:i] + (("u", 0),) + factors[i:]
        out.append((("prod", inserted), -1))
    return out


def _d_hwall(args):
    """Leibniz over arguments + transport of the static wall tensor by u."""
    out = []
    for i, (f, o) in enumerate(args):
        out.append((("hwall", args[:i] + ((f, o + 1),) + args[i + 1:]), 1))
    out.append((("hwall", (("u", 0),) + args), 1))
    return out


def _d_hbody(args):
    """Leibniz + the rigid-tensor transport rule (new first argument u-v,
    minus one extra rotation on each argument)."""
    out = []
    for i, (rots, f, o) in enumerate(args):
        for m in range(len(rots)):
            r2 = rots[:m] + (rots[m] + 1,) + rots[m + 1:]
            out.append((("hbody", args[:i] + ((r2, f, o),) + args[i + 1:]), 1))
        out.append((("hbody", args[:i] + ((rots, f, o + 1),) + args[i + 1:]), 1))
    out.append((("hbody", (((), "phi", 0),) + args), 1))
    for i, (rots, f, o) in enumerate(args):
        r2 = (0,) + rots
        out.append((("hbody", args[:i] + ((r2, f, o),) + args[i + 1:]), -1))
    return out


def _d_rot(orders):
    """d/dt of R_alpha[r] Q: bump one rotation order or append R(r) from Q'."""
    out = []
    for m in range(len(orders)):
        out.append((("rot", orders[:m] + (orders[m] + 1,) + orders[m + 1:]), 1))
    out.append((("rot", orders + (0,)), 1))
    return out


# ---------------------------------------------------------------------------
# expansion drivers (each replays the derivation that proves the identity)
# ---------------------------------------------------------------------------


def expand_div(k):
    """Terms of tr{F^k[u, psi]} obtained by iterating the div commutator."""
    cur = SymbolicField({("prod", (("u", 0), ("psi", 0))): 1})
    for order in range(1, k):
        cur = cur.D()
        cur.add(("prod", (("u", 0), ("psi", order))), 1)
    return cur


def expand_wall_normal(k):
    """Terms of H^k[u, psi] on the fixed wall."""
    cur = SymbolicField({("hwall", (("u", 0), ("psi", 0))): -1})
    for order in range(1, k):
        cur = cur.D()
        cur.add(("hwall", (("u", 0), ("psi", order))), -1)
    return cur


def expand_body_normal(k):
    """Terms of H^k[r, u-v, psi] on the moving body."""
    cur = SymbolicField({
        ("hbody", (((0,), "psi", 0),)): 1,
        ("hbody", (((), "phi", 0), ((), "psi", 0))): -1,
    })
    for order in range(1, k):
        cur = cur.D()
        cur.add(("hbody", (((0,), "psi", order),)), 1)
        cur.add(("hbody", (((), "phi", 0), ((), "psi", order))), -1)
    return cur


def expand_body_flux(k):
    """Terms of D^k K_i = D^k grad rho {sigma_i} (no extra sources)."""
    cur = SymbolicField({("hbody", (((), "sigma", 0),)): 1})
    for _ in range(k):
        cur = cur.D()
    return cur


def expand_rotation(k):
    """Terms of Q^(k): iterate d/dt on R_alpha[r] Q words."""
    cur = SymbolicField({("rot", (0,)): 1})
    for _ in range(1, k):
        cur = cur.D()
    return cur


def expand_kato(k):
    """K^k[u] by the recursion K^{k+1} = D K^k + grad u . K^k - grad u . D^k u.

    The grad-u insertions produced by D on the matrix part are cancelled
    exactly by the +grad u . K^k term, leaving the pure two-slot recursion
    (a,b) -> (a+1,b) + (a,b+1) with source -(0,k).
    """
    cur = {}
    for order in range(1, k):
        new = {}
        for (a, b), c in cur.items():
            new[(a + 1, b)] = new.get((a + 1, b), 0) + c
            new[(a, b + 1)] = new.get((a, b + 1), 0) + c
        new[(0, order)] = new.get((0, order), 0) - 1
        cur = {ab: c for ab, c in new.items() if c != 0}
    return SymbolicField({("kato", ab): c for ab, c in cur.items()})


# ---------------------------------------------------------------------------
# conversions to index keys
# ---------------------------------------------------------------------------


def prod_to_fluid_index(term):
    """('prod'|'hwall', factors) -> bare alpha tuple, checking the u..u,psi slot
    pattern."""
    kind, payload = term
    if kind not in ("prod", "hwall"):
        raise UnknownAtom(f"not a fluid term: {kind}")
    fields = [f for f, _ in payload]
    if fields[-1] != "psi" or any(f != "u" for f in fields[:-1]):
        raise UnknownAtom(f"unexpected slot pattern {fields}")
    return tuple(o for _, o in payload)


def hbody_to_body_index(term):
    """('hbody', args) -> (sp, alpha) with rotation orders first."""
    kind, payload = term
    if kind != "hbody":
        raise UnknownAtom(f"not a body term: {kind}")
    fields = [f for _, f, _ in payload]
    last = fields[-1]
    if last not in ("psi", "sigma") or any(f != "phi" for f in fields[:-1]):
        raise UnknownAtom(f"unexpected slot pattern {fields}")
    sp = tuple(len(rots) for rots, _, _ in payload)
    alpha = tuple(b for rots, _, _ in payload for b in rots) \
        + tuple(o for _, _, o in payload)
    return sp, alpha
