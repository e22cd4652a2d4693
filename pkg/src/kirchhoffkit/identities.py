"""Integer coefficient tables for iterated material derivative identities.

The tables answer: what combination of elementary products expresses
div D^k psi, curl D^k psi, the wall normal trace n . D^k psi, the moving-body
normal trace, the iterated derivatives of the body flux data K_i, the time
derivatives of the rotation matrix, and the pressure-commutator remainder.

Index conventions:

* fluid index  theta = (s, alpha), alpha a tuple of s naturals, stored as the
  bare alpha tuple (s = len(alpha)); member of A_k iff 2 <= s <= k+1 and
  |alpha| = k+1-s;
* body index   zeta = (sp, alpha): sp the per-argument rotation counts
  (s = len(sp), s' = sum(sp)); alpha has length s+s', rotation-derivative
  orders first (grouped by argument), then the s derivative orders of the
  arguments; member of B_k iff |alpha| + s + s' = k+1 and 2 <= s+s' <= k+1
  (the table for D^k K_i additionally carries the single chain with
  s+s' = 1, see the bound note on `body_coefficients`);
* rotation index: alpha tuple with |alpha| = k - len(alpha).

All coefficients are exact Python integers; every bound check is done in
integer arithmetic, never floating point.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from math import comb, factorial

import numpy as np

from .errors import BoundViolation, SignViolation

__all__ = [
    "t_shift",
    "t_insert",
    "t_delete",
    "tau_positions",
    "enum_fluid_indices",
    "enum_body_indices",
    "enum_rotation_indices",
    "IdentityExpansion",
    "div_curl_coefficients",
    "wall_normal_coefficients",
    "body_coefficients",
    "rotation_coefficients",
    "kato_pressure_expansion",
    "kato_gradient_expansion",
    "upsilon_sum",
    "upsilon_bound",
    "gamma_of_L",
    "smallest_L",
    "table_rows",
]


# ---------------------------------------------------------------------------
# index shifts
# ---------------------------------------------------------------------------


def t_shift(alpha, j):
    """T_{s,j}: add 1 to the j-th entry (1-based), arity preserved."""
    s = len(alpha)
    if not 1 <= j <= s:
        raise ValueError(f"shift position {j} outside 1..{s}")
    return alpha[: j - 1] + (alpha[j - 1] + 1,) + alpha[j:]


def t_insert(alpha, j):
    """T~_{s,j}: insert a zero before position j (1-based), arity s+1."""
    if not 1 <= j <= len(alpha) + 1:
        raise ValueError(f"insert position {j} outside 1..{len(alpha)+1}")
    return alpha[: j - 1] + (0,) + alpha[j - 1:]


def t_delete(alpha, j):
    """Remove entry j (1-based); inverse of t_insert when that entry is 0."""
    if not 1 <= j <= len(alpha):
        raise ValueError(f"delete position {j} outside 1..{len(alpha)}")
    return alpha[: j - 1] + alpha[j:]


def tau_positions(sp):
    """Prefix sums tau_j(s') of the rotation-count tuple, tau_0 = 0."""
    out = [0]
    for v in sp:
        out.append(out[-1] + v)
    return tuple(out)


# ---------------------------------------------------------------------------
# index sets
# ---------------------------------------------------------------------------


def _compositions(total, parts):
    """All tuples of `parts` naturals summing to `total`."""
    if parts == 0:
        return [()] if total == 0 else []
    out = []
    for bars in combinations(range(total + parts - 1), parts - 1):
        comp = []
        prev = -1
        for b in bars:
            comp.append(b - prev - 1)
            prev = b
        comp.append(total + parts - 2 - prev)
        out.append(tuple(comp))
    return out


def enum_fluid_indices(k):
    """The set A_k as bare alpha tuples; |A_k| = 2^k - 1."""
    if k < 1:
        raise ValueError("k >= 1 required")
    out = set()
    for s in range(2, k + 2):
        for alpha in _compositions(k + 1 - s, s):
            out.add(alpha)
    return out


def enum_body_indices(k, min_arity=2):
    """The set B_k as (sp, alpha) pairs; |B_k| = 3^k - 1 for min_arity=2."""
    if k < 1:
        raise ValueError("k >= 1 required")
    out = set()
    for s in range(1, k + 2):
        for sp in _compositions_up_to(k + 1 - s, s):
            sprime = sum(sp)
            m = s + sprime
            if not (min_arity <= m <= k + 1):
                continue
            for alpha in _compositions(k + 1 - m, m):
                out.add((sp, alpha))
    return out


def _compositions_up_to(max_total, parts):
    out = []
    for total in range(max_total + 1):
        out.extend(_compositions(total, parts))
    return out


def enum_rotation_indices(k):
    """A_{k-1,s} for s = 1..k: alpha in N^s with |alpha| = k - s."""
    out = set()
    for s in range(1, k + 1):
        for alpha in _compositions(k - s, s):
            out.add(alpha)
    return out


# ---------------------------------------------------------------------------
# expansion container
# ---------------------------------------------------------------------------

_KINDS = ("div", "curl", "wall-normal", "body-normal", "body-K", "rotation",
          "kato", "kato-grad")


@dataclass(frozen=True)
class IdentityExpansion:
    """Sparse integer coefficient table of one identity at one order."""

    kind: str
    k: int
    coefficients: dict

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown identity kind {self.kind!r}")

    def __getitem__(self, index):
        return self.coefficients.get(index, 0)

    def items(self):
        return self.coefficients.items()

    def __len__(self):
        return len(self.coefficients)

    def bound(self, index):
        """The proven integer bound for |coefficient| at this index."""
        k = self.k
        if self.kind in ("div", "curl"):
            return Fraction(factorial(k), _alpha_factorial(index))
        if self.kind == "wall-normal":
            s = len(index)
            return Fraction(factorial(k),
                            _alpha_factorial(index) * factorial(s - 1))
        if self.kind in ("body-normal", "body-K"):
            sp, alpha = index
            s = len(sp)
            return Fraction(3 ** (s + sum(sp)) * factorial(k),
                            _alpha_factorial(alpha) * factorial(s - 1))
        if self.kind == "rotation":
            s = len(index)
            return Fraction(factorial(k - 1),
                            _alpha_factorial(index) * factorial(s - 1))
        if self.kind in ("kato", "kato-grad"):
            a, b = index
            n = k - 1 if self.kind == "kato" else k
            return Fraction(comb(n, a + 1))
        raise AssertionError

    def check_bounds(self):
        """Exact integer verification of every coefficient bound."""
        for index, c in self.coefficients.items():
            b = self.bound(index)
            if abs(c) * b.denominator > b.numerator:
                raise BoundViolation(
                    f"{self.kind} k={self.k}: |{c}| > {b} at {index}")
        if self.kind == "wall-normal":
            for index, c in self.coefficients.items():
                if c > 0:
                    raise SignViolation(
                        f"wall-normal k={self.k}: positive {c} at {index}")
        return True


def _alpha_factorial(alpha):
    out = 1
    for a in alpha:
        out *= factorial(a)
    return out


# ---------------------------------------------------------------------------
# fluid tables: c1 (div), c2 (curl), c3 (wall normal)
# ---------------------------------------------------------------------------


def _assert_fluid_membership(table, k):
    for alpha in table:
        s = len(alpha)
        if not (2 <= s <= k + 1 and sum(alpha) == k + 1 - s):
            raise BoundViolation(f"index {alpha} escaped A_{k}")


def div_curl_coefficients(k):
    """(c1_k, c2_k) for div D^k psi and curl D^k psi.

    Both satisfy the same recursion with the same seed (the div and curl
    commutators produce the identical source term), so the tables coincide;
    they are generated once and returned as two expansions.
    """
    if k < 1:
        raise ValueError("k >= 1 required")
    cur = {(0, 0): 1}
    for order in range(1, k):
        new = {}
        for alpha, c in cur.items():
            s = len(alpha)
            for j in range(1, s + 1):
                _add(new, t_shift(alpha, j), c)
            for j in range(1, s + 1):
                _add(new, t_insert(alpha, j), -c)
        _add(new, (0, order), 1)
        cur = {a: c for a, c in new.items() if c != 0}
        _assert_fluid_membership(cur, order + 1)
    _assert_fluid_membership(cur, k)
    c1 = IdentityExpansion("div", k, dict(cur))
    c2 = IdentityExpansion("curl", k, dict(cur))
    c1.check_bounds()
    c2.check_bounds()
    return c1, c2


def wall_normal_coefficients(k):
    """c3_k for the fixed-wall normal trace; all entries are <= 0."""
    if k < 1:
        raise ValueError("k >= 1 required")
    cur = {(0, 0): -1}
    for order in range(1, k):
        new = {}
        for alpha, c in cur.items():
            s = len(alpha)
            _add(new, t_insert(alpha, 1), c)
            for j in range(1, s + 1):
                _add(new, t_shift(alpha, j), c)
        _add(new, (0, order), -1)
        cur = {a: c for a, c in new.items() if c != 0}
        _assert_fluid_membership(cur, order + 1)
    _assert_fluid_membership(cur, k)
    c3 = IdentityExpansion("wall-normal", k, dict(cur))
    c3.check_bounds()
    return c3


# ---------------------------------------------------------------------------
# body tables: d1 (normal trace), d2 (flux data K_i)
# ---------------------------------------------------------------------------


def _body_step(cur):
    """One application of the moving-body derivative rules to a body table."""
    new = {}
    for (sp, alpha), c in cur.items():
        s = len(sp)
        total = len(alpha)
        for j in range(1, total + 1):
            _add(new, (sp, t_shift(alpha, j)), c)
        _add(new, ((0,) + sp, t_insert(alpha, sum(sp) + 1)), c)
        tau = tau_positions(sp)
        for j in range(1, s + 1):
            _add(new, (t_shift(sp, j), t_insert(alpha, tau[j - 1] + 1)), -c)
    return {z: c for z, c in new.items() if c != 0}


def _assert_body_membership(table, k, min_arity):
    for sp, alpha in table:
        s = len(sp)
        sprime = sum(sp)
        ok = (min_arity <= s + sprime <= k + 1
              and len(alpha) == s + sprime
              and sum(alpha) + s + sprime == k + 1)
        if not ok:
            raise BoundViolation(f"index {(sp, alpha)} escaped B_{k}")


def body_coefficients(k):
    """(d1_k, d2_k) for n . D^k psi on the body and for D^k K_i.

    d2 keeps the pure-derivative chain (s, s', alpha) = (1, (0), (k))
    produced by the recursion (the term with every derivative landing on the
    flux argument); it fails the nominal 2 <= s+s' membership but satisfies
    the same bound, so membership for d2 is checked with arity >= 1.
    """
    if k < 1:
        raise ValueError("k >= 1 required")
    d1 = {((1,), (0, 0)): 1, ((0, 0), (0, 0)): -1}
    for order in range(1, k):
        d1 = _body_step(d1)
        _add(d1, ((1,), (0, order)), 1)
        _add(d1, ((0, 0), (0, order)), -1)
        d1 = {z: c for z, c in d1.items() if c != 0}
        _assert_body_membership(d1, order + 1, 2)
    _assert_body_membership(d1, k, 2)

    d2 = {((0,), (0,)): 1}
    for _ in range(k):
        d2 = _body_step(d2)
    _assert_body_membership(d2, k, 1)

    e1 = IdentityExpansion("body-normal", k, dict(d1))
    e2 = IdentityExpansion("body-K", k, dict(d2))
    e1.check_bounds()
    e2.check_bounds()
    return e1, e2


# ---------------------------------------------------------------------------
# rotation table
# ---------------------------------------------------------------------------


def rotation_coefficients(k):
    """c_k over A_{k-1,s}: Q^(k) = sum c_k(alpha) R_alpha[r] Q."""
    if k < 1:
        raise ValueError("k >= 1 required")
    cur = {(0,): 1}
    for _ in range(1, k):
        new = {}
        for alpha, c in cur.items():
            for j in range(1, len(alpha) + 1):
                _add(new, t_shift(alpha, j), c)
            _add(new, alpha + (0,), c)
        cur = {a: c for a, c in new.items() if c != 0}
    for alpha in cur:
        s = len(alpha)
        if not (1 <= s <= k and sum(alpha) == k - s):
            raise BoundViolation(f"index {alpha} escaped A_{k-1},s")
    ck = IdentityExpansion("rotation", k, dict(cur))
    ck.check_bounds()
    return ck


# ---------------------------------------------------------------------------
# pressure commutator (Kato remainder)
# ---------------------------------------------------------------------------


def kato_pressure_expansion(k):
    """K^k[u] as {(a, b): coeff} meaning coeff * grad D^a u . D^b u.

    K^1 = 0; for k >= 2, K^k = -sum_{r=1}^{k-1} C(k-1, r) grad D^{r-1}u . D^{k-r}u.
    """
    if k < 1:
        raise ValueError("k >= 1 required")
    if k == 1:
        return IdentityExpansion("kato", 1, {})
    coeffs = {(r - 1, k - r): -comb(k - 1, r) for r in range(1, k)}
    return IdentityExpansion("kato", k, coeffs)


def kato_gradient_expansion(k):
    """K^k[u, psi] for scalar psi: -sum_{r=1}^{k} C(k, r) grad D^{r-1}u . D^{k-r} grad psi."""
    if k < 1:
        raise ValueError("k >= 1 required")
    coeffs = {(r - 1, k - r): -comb(k, r) for r in range(1, k + 1)}
    return IdentityExpansion("kato-grad", k, coeffs)


def _add(d, key, val):
    d[key] = d.get(key, 0) + val


# ---------------------------------------------------------------------------
# scalar growth machinery
# ---------------------------------------------------------------------------


def upsilon_sum(s, m):
    """Exact rational sum of Upsilon(s, alpha) over |alpha| = m, alpha in N^s."""
    if s < 1 or m < 0:
        raise ValueError("need s >= 1, m >= 0")
    total = Fraction(0)
    for alpha in _compositions(m, s):
        term = Fraction(1)
        for a in alpha:
            term /= (1 + a) ** 2
        total += term
    return total


def upsilon_bound(s, m):
    """The bound 20^s/(m+1)^2 as an exact rational."""
    return Fraction(20**s, (m + 1) ** 2)


def gamma_of_L(L, k_max=200, c_rho=2.0, C_d=1.0, C_Omega=1.0):
    """gamma(L): sup over k of the two bracketed sums of the majorant recursion.

    For L <= 20 c_rho C_d the inner sum grows geometrically in s, the sup over
    k is infinite, and +inf is returned. The sup is truncated at k_max; if the
    truncation looks active without clear divergence, a ValueError asks for a
    larger k_max.
    """
    if L <= 0:
        raise ValueError("L must be positive")
    cc = c_rho * C_d
    vals = []
    for k in range(1, k_max + 1):
        tot = 0.0
        for s in range(2, k + 2):
            tot += 3.0 * L ** (1 - s) * s * cc**s \
                * ((k + 1) / (k - s + 2)) ** 2 * 20.0**s
        for s in range(1, k):
            tot += C_Omega * (k - s) / (L * k * s) \
                * ((k + 1) / ((k - s + 1) * s)) ** 2
        vals.append(tot)
    best = max(vals)
    best_k = 1 + int(np.argmax(vals))
    if best_k > 0.9 * k_max:
        if L <= 20.0 * cc or vals[-1] > vals[-2] > vals[-3]:
            return float("inf")
        raise ValueError(
            f"gamma sup attained at k={best_k} near truncation {k_max}; "
            "increase k_max")
    return best


def smallest_L(c_frak_r, k_max=200, c_rho=2.0, C_d=1.0, C_Omega=1.0,
               L_hi=1e16):
    """Smallest L (by bisection) with gamma(L) <= 1/(3 c_frak_r)."""
    target = 1.0 / (3.0 * c_frak_r)
    lo, hi = 1.0, 2.0
    while gamma_of_L(hi, k_max, c_rho, C_d, C_Omega) > target:
        lo, hi = hi, hi * 4.0
        if hi > L_hi:
            raise ValueError("no admissible L below L_hi")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gamma_of_L(mid, k_max, c_rho, C_d, C_Omega) <= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * hi:
            break
    return hi


# ---------------------------------------------------------------------------
# CSV-facing view
# ---------------------------------------------------------------------------


def table_rows(kind, k):
    """Rows (kind, k, s, s', alpha, coefficient, bound, slack) for one table."""
    if kind in ("div", "curl"):
        exp = div_curl_coefficients(k)[0 if kind == "div" else 1]
    elif kind == "wall-normal":
        exp = wall_normal_coefficients(k)
    elif kind in ("body-normal", "body-K"):
        exp = body_coefficients(k)[0 if kind == "body-normal" else 1]
    elif kind == "rotation":
        exp = rotation_coefficients(k)
    elif kind == "kato":
        exp = kato_pressure_expansion(k)
    elif kind == "kato-grad":
        exp = kato_gradient_expansion(k)
    else:
        raise ValueError(f"unknown identity kind {kind!r}")

    rows = []
    for index in sorted(exp.coefficients):
        c = exp.coefficients[index]
        b = exp.bound(index)
        if kind in ("body-normal", "body-K"):
            sp, alpha = index
            s, sprime = len(sp), sum(sp)
            sp_str = " ".join(map(str, sp))
        else:
            alpha = index
            s, sprime, sp_str = len(alpha), 0, ""
        rows.append({
            "kind": kind,
            "k": k,
            "s": s,
            "s_prime": sp_str if sp_str else str(sprime),
            "alpha": " ".join(map(str, alpha)),
            "coefficient": str(c),
            "bound": str(b),
            "slack": str(b - abs(c)),
        })
    return rows
