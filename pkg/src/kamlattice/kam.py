"""Frequency-preserving Kolmogorov iteration on Fourier-Taylor Hamiltonians.

A Hamiltonian is stored as a polynomial of degree <= 3 in the actions y with
torus-function coefficients. Each monomial is a sorted tuple of site
positions (column indices of the window), so ``(i, i)`` means y_i^2. The
coefficient of a monomial is a real scalar from ``const`` plus an optional
torus function from ``blocks``; keeping the two apart lets the small parts
of the coefficients be tracked at their own scale.

One step builds the generating function
    F(x, kappa) = <x + b(x), kappa> + a(x) + <alpha, x>
so that y = alpha + a_x + (I + B) kappa with B_ij = d_i b_j, and
xi = x + b(x). The new Hamiltonian is expanded exactly in kappa and then
re-expressed in xi through x = xi + d(xi), d = -b(xi + d).
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (AliasingBudgetExceeded, ConfigError, DegenerateHessian, Diverged,
                     InversionDiverged)
from .spectral import (DivisorPolicy, SiteWindow, TorusFunction, Truncation, multiply, partial_derivative,
                       solve_homological)

Monomial = tuple


def monomials(size: int, degree: int):
    return list(itertools.combinations_with_replacement(range(size), degree))


def _add(u, v):
    if u is None:
        return v
    if v is None:
        return u
    return u + v


def _mul(u, v, floor: float = 0.0):
    """Product, or None when zero; with ``floor`` coefficients below it are not formed."""
    if u is None or v is None:
        return None
    if floor > 0:
        if u.norm(0.0) * v.norm(0.0) < floor:
            return None
        out = multiply(u, v, floor=floor)
    else:
        out = u * v
    return None if out.is_zero() else out


def _mul_chain(factors, floor: float = 0.0):
    """Left-to-right product; each partial product only keeps what can reach ``floor``."""
    factors = list(factors)
    if any(f is None for f in factors):
        return None
    norms = [f.norm(0.0) for f in factors]
    if floor > 0 and math.prod(norms) < floor:
        return None
    out = factors[0]
    for k in range(1, len(factors)):
        rest = math.prod(norms[k + 1:]) if k + 1 < len(norms) else 1.0
        out = _mul(out, factors[k], floor / rest if floor > 0 and rest > 0 else 0.0)
        if out is None:
            return None
    return out


def _assemble(window, caps, products, extras=(), rel: float = 1e-19, floor_abs: float = 0.0):
    """Sum of products (lists of factors) plus extra terms.

    Coefficients far below the largest product bound cannot show at the
    block's working precision, so partial products skip them.
    """
    products = [p for p in products if p is not None and all(f is not None for f in p)]
    bounds = [math.prod(f.norm(0.0) for f in p) for p in products]
    floor = max(rel * max(bounds, default=0.0), floor_abs)
    terms = [_mul_chain(p, floor) for p in products] + list(extras)
    return _cut(_sum(window, caps, terms), floor_abs)


def _cut(f, floor: float):
    if f is None or floor <= 0:
        return f
    return _nz(f.prune_below(floor))


def _average_of_product(u, v) -> float:
    """Zero mode of u v without forming the product."""
    if u is None or v is None:
        return 0.0
    a = np.ascontiguousarray(u.idx)
    b = np.ascontiguousarray(-v.idx)
    view = np.dtype((np.void, a.dtype.itemsize * a.shape[1])) if a.shape[1] else None
    if view is None:
        return float((u.coef.sum() * v.coef.sum()).real)
    _, ia, ib = np.intersect1d(a.view(view).ravel(), b.view(view).ravel(), return_indices=True)
    return float(np.sum(u.coef[ia] * v.coef[ib]).real)


def _nz(u):
    return None if u is None or u.is_zero() else u


def _sum(window, caps, terms):
    """Sum of torus functions (None entries skipped) with a single canonicalisation."""
    terms = [t for t in terms if t is not None and not t.is_zero()]
    if not terms:
        return None
    if len(terms) == 1:
        return terms[0]
    idx = np.vstack([t.idx for t in terms])
    coef = np.concatenate([t.coef for t in terms])
    out = TorusFunction(window, caps, idx, coef, lost=sum(t.lost for t in terms))
    return _nz(out)


def _norm(u, sigma=0.0):
    return 0.0 if u is None else u.norm(sigma)


class FourierTaylorHamiltonian:
    """H(x, y) = sum_m (const[m] + blocks[m](x)) y^m over monomials of degree <= 3."""

    def __init__(self, window: SiteWindow, caps: Truncation, const=None, blocks=None,
                 sigma: float = 0.1, r: float = 1.0):
        self.window = window
        self.caps = caps
        self.sigma = float(sigma)
        self.r = float(r)
        self.const = {}
        for m, c in (const or {}).items():
            m = tuple(sorted(m))
            self._check_mono(m)
            if c != 0:
                self.const[m] = float(np.real(c))
        self.blocks = {}
        for m, f in (blocks or {}).items():
            m = tuple(sorted(m))
            self._check_mono(m)
            if f is not None and not f.is_zero():
                if f.window != window:
                    raise ConfigError("block lives on a different window")
                self.blocks[m] = f

    def _check_mono(self, m):
        if len(m) > 3 or any(not 0 <= k < self.window.size for k in m):
            raise ConfigError(f"invalid monomial {m}")

    @property
    def size(self) -> int:
        return self.window.size

    def coefficient(self, m) -> TorusFunction | None:
        """Full coefficient of y^m as a torus function (None when zero)."""
        m = tuple(sorted(m))
        c = self.const.get(m, 0.0)
        f = self.blocks.get(m)
        if f is None:
            return None if c == 0 else TorusFunction.constant(self.window, self.caps, c)
        return f.add_constant(c) if c else f

    def hessian_entry(self, i: int, j: int) -> TorusFunction | None:
        """Q_ij, the second y-derivative at y = 0."""
        f = self.coefficient((i, j))
        if f is None:
            return None
        return f.scale(2.0) if i == j else f

    def hessian_average(self) -> np.ndarray:
        n = self.size
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                f = self.hessian_entry(i, j)
                if f is not None:
                    out[i, j] = out[j, i] = f.average().real
        return out

    def degree_blocks(self, degree: int):
        keys = set(m for m in self.const if len(m) == degree) | set(m for m in self.blocks if len(m) == degree)
        return sorted(keys)

    def evaluate(self, x, y) -> np.ndarray:
        """Pointwise H at points x (..., S) and actions y (..., S)."""
        x = np.asarray(x)
        y = np.asarray(y)
        out = np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), dtype=complex)
        for m in set(self.const) | set(self.blocks):
            mono = np.prod([y[..., k] for k in m], axis=0) if m else 1.0
            val = self.const.get(m, 0.0)
            if m in self.blocks:
                val = val + self.blocks[m].evaluate(x)
            out = out + val * mono
        return out

    def map_blocks(self, fn) -> "FourierTaylorHamiltonian":
        return FourierTaylorHamiltonian(self.window, self.caps, self.const,
                                        {m: fn(f) for m, f in self.blocks.items()}, self.sigma, self.r)

    def nterms(self) -> int:
        return sum(f.nterms for f in self.blocks.values())

    def hermitian_defect(self) -> float:
        return max((f.reality_defect() for m, f in self.blocks.items() if len(m) == 2), default=0.0)

    def to_json(self) -> dict:
        return {"window": self.window.to_json(), "caps": {"L": self.caps.per_site, "O": self.caps.total},
                "sigma": self.sigma, "r": self.r,
                "const": [{"mono": list(m), "value": v} for m, v in sorted(self.const.items())],
                "blocks": [{"mono": list(m), "function": f.to_json()} for m, f in sorted(self.blocks.items())]}

    @classmethod
    def from_json(cls, data) -> "FourierTaylorHamiltonian":
        window = SiteWindow.from_json(data["window"])
        caps = Truncation(int(data["caps"]["L"]), int(data["caps"]["O"]))
        const = {tuple(e["mono"]): float(e["value"]) for e in data.get("const", [])}
        blocks = {tuple(e["mono"]): TorusFunction.from_json(e["function"], caps) for e in data.get("blocks", [])}
        return cls(window, caps, const, blocks, float(data.get("sigma", 0.1)), float(data.get("r", 1.0)))


def integrable_hamiltonian(window: SiteWindow, caps: Truncation, omega, hessian_diag, cubic_diag=None,
                           sigma: float = 0.1) -> FourierTaylorHamiltonian:
    """<omega, y> + 1/2 sum A_j y_j^2 + sum c_j y_j^3."""
    const = {}
    for j, w in enumerate(np.asarray(omega, dtype=float)):
        const[(j,)] = w
    for j, a in enumerate(np.asarray(hessian_diag, dtype=float)):
        const[(j, j)] = 0.5 * a
    if cubic_diag is not None:
        for j, c in enumerate(np.asarray(cubic_diag, dtype=float)):
            const[(j, j, j)] = c
    return FourierTaylorHamiltonian(window, caps, const, {}, sigma)


def pendulum_hamiltonian(delta: float = 1e-4, omega: float = 1.0, caps: Truncation | None = None,
                         sigma: float = 0.1) -> FourierTaylorHamiltonian:
    """omega y + y^2 / 2 + delta cos x on a single site."""
    window = SiteWindow(0, 0, 2.0)
    caps = caps or Truncation(96, 96)
    H = integrable_hamiltonian(window, caps, [omega], [1.0], sigma=sigma)
    if delta:
        H.blocks[()] = TorusFunction.from_terms(window, caps, {(1,): delta / 2, (-1,): delta / 2})
    return H


def coupled_chain_hamiltonian(omega, coupling: float = 1e-6, hessian_diag=(0.7, 0.8, 0.9), cubic: float = 0.1,
                              caps: Truncation | None = None, sigma: float = 0.05) -> FourierTaylorHamiltonian:
    """Integrable chain plus nearest-neighbour perturbation.

    Each bond (a, a+1) adds coupling cos(x_a) cos(x_{a+1}) to the angle block
    and coupling cos(x_a) y_a to the linear block.
    """
    w = np.asarray(omega, dtype=float)
    n = w.size
    window = SiteWindow(-(n // 2), n - 1 - n // 2, 2.0)
    caps = caps or Truncation(12, 24)
    H = integrable_hamiltonian(window, caps, w, list(hessian_diag)[:n], [cubic] * n, sigma=sigma)
    if not coupling:
        return H
    zero = TorusFunction.zero(window, caps)
    for a in range(n - 1):
        terms = {}
        for k1 in (-1, 1):
            for k2 in (-1, 1):
                r = np.zeros(n, dtype=int)
                r[a], r[a + 1] = k1, k2
                terms[tuple(r)] = coupling / 4
        H.blocks[()] = (H.blocks.get(()) or zero) + TorusFunction.from_terms(window, caps, terms)
        r = np.zeros(n, dtype=int)
        r[a] = 1
        H.blocks[(a,)] = (H.blocks.get((a,)) or zero) + TorusFunction.from_terms(
            window, caps, {tuple(r): coupling / 2, tuple(-r): coupling / 2})
    return H


def _frequency_values(omega) -> np.ndarray:
    return np.asarray(getattr(omega, "values", omega), dtype=float)


def measure_error(H: FourierTaylorHamiltonian, omega, sigma: float):
    """(||h0 - <h0>||_sigma, max_j ||h_{e_j} - omega_j||_sigma)."""
    w = _frequency_values(omega)
    h0 = H.coefficient(())
    e_value = 0.0 if h0 is None else h0.oscillating().norm(sigma)
    e_freq = 0.0
    for j in range(H.size):
        dev = _linear_deviation(H, j, w[j])
        e_freq = max(e_freq, _norm(dev, sigma))
    return e_value, e_freq


def frequency_residual(H: FourierTaylorHamiltonian, omega) -> float:
    """max_j |<h_{e_j}> - omega_j|."""
    w = _frequency_values(omega)
    out = 0.0
    for j in range(H.size):
        dev = _linear_deviation(H, j, w[j])
        if dev is not None:
            out = max(out, abs(dev.average()))
    return out


def _linear_deviation(H, j, w_j):
    block = H.blocks.get((j,))
    shift = H.const.get((j,), 0.0) - w_j
    if block is None:
        return None if shift == 0 else TorusFunction.constant(H.window, H.caps, shift)
    return block.add_constant(shift) if shift else block


# Taylor shift F(xi) -> F(xi + d(xi))

class TaylorShift:
    """Composition with a near-identity shift via sum_alpha d^alpha F / alpha! * d^alpha.

    Powers of d are memoised so every block of a Hamiltonian reuses them.
    Terms whose norm bound falls below ``tol`` times ||F||_0 are skipped.
    """

    def __init__(self, window: SiteWindow, caps: Truncation, d, tol: float = 1e-17, max_order: int = 64,
                 floor: float = 0.0):
        self.window = window
        self.floor = floor
        self.caps = caps
        self.d = [_nz(dj) for dj in d]
        self.active = [j for j, dj in enumerate(self.d) if dj is not None]
        self.dnorm = {j: self.d[j].norm(0.0) for j in self.active}
        self.tol = tol
        self.max_order = max_order
        self._powers = {}
        self.lost = 0.0

    def power(self, alpha: tuple) -> TorusFunction:
        if alpha in self._powers:
            return self._powers[alpha]
        if len(alpha) == 1:
            out = self.d[alpha[0]]
        else:
            out = multiply(self.power(alpha[:-1]), self.d[alpha[-1]], floor=1e-3 * self.floor)
            self.lost += out.lost
        self._powers[alpha] = out
        return out

    def __call__(self, F):
        if F is None or F.is_zero() or not self.active:
            return F
        ref = F.norm(0.0)
        absc = np.abs(F.coef)
        pieces = [F]
        for order in range(1, self.max_order + 1):
            best = 0.0
            for alpha in itertools.combinations_with_replacement(self.active, order):
                factor = np.ones(F.nterms)
                denom = 1.0
                bound = 1.0
                for j, grp in itertools.groupby(alpha):
                    k = len(list(grp))
                    factor = factor * F.idx[:, j].astype(float) ** k
                    denom *= math.factorial(k)
                    bound *= self.dnorm[j] ** k
                bound *= float(np.sum(absc * np.abs(factor))) / denom
                best = max(best, bound)
                if bound <= max(self.tol * ref, self.floor):
                    continue
                keep = factor != 0
                deriv = F._like(F.idx[keep], F.coef[keep] * factor[keep] * (1j ** order / denom), canonical=True)
                term = multiply(deriv, self.power(alpha), floor=self.floor)
                self.lost += term.lost
                pieces.append(term)
            if best <= max(self.tol * ref, self.floor):
                break
        else:
            raise InversionDiverged("Taylor shift did not converge; the shift is too large for the caps")
        return _cut(_sum(self.window, self.caps, pieces), self.floor)


# one Kolmogorov step

@dataclass
class KolmogorovStepData:
    a: TorusFunction | None
    alpha: np.ndarray
    b: list
    d: list
    z: list
    B: list
    norms: dict
    conjugacy_defect: float
    inversion_iterations: int
    lost_mass: float
    hessian_condition: float

    @classmethod
    def from_generating(cls, a, alpha, b) -> "KolmogorovStepData":
        """Step data holding only the generating functions; compose_push derives the rest."""
        return cls(a, np.asarray(alpha, dtype=float), list(b), [], [], [], {}, 0.0, 0, 0.0, 1.0)


@dataclass
class KAMState:
    H: FourierTaylorHamiltonian
    nu: int
    sigma_nu: float
    eps_nu: float
    q: float
    sigma: float
    history: list = field(default_factory=list)

    def next_sigma(self) -> float:
        return 0.5 * self.sigma * (1.0 + self.q ** (self.nu + 1))


def default_q(eta: float) -> float:
    lo = 2.0 ** -eta
    return 0.5 * (lo + 0.5 * (lo + 1.0))


def _cubic_grad_hess(H, z, grad_floor: float = 0.0, hess_floor: float = 0.0):
    """Gradient and Hessian of the cubic part at y = z (z a list of torus functions)."""
    n = H.size
    grad = [[] for _ in range(n)]
    hess = {}
    for m in H.degree_blocks(3):
        c = H.coefficient(m)
        # product rule over the three factor positions
        for k in range(3):
            rest = [m[l] for l in range(3) if l != k]
            grad[m[k]].append(_mul_chain([c, z[rest[0]], z[rest[1]]], grad_floor))
            for l in range(3):
                if l == k:
                    continue
                other = [m[t] for t in range(3) if t not in (k, l)][0]
                key = (m[k], m[l])
                hess.setdefault(key, []).append(_mul(c, z[other], hess_floor))
    grad = [_sum(H.window, H.caps, g) for g in grad]
    hess = {key: _sum(H.window, H.caps, v) for key, v in hess.items()}
    return grad, hess


def _cubic_products(H, z):
    return [[H.coefficient(m), z[m[0]], z[m[1]], z[m[2]]] for m in H.degree_blocks(3)]


def solve_shift(window, caps, b, *, max_iter: int = 50, tol: float = 1e-15, fail_tol: float = 1e-13,
                taylor_tol: float = 1e-17, floor: float = 0.0):
    """Fixed point d = -b(xi + d), the inverse of xi = x + b(x) written as x = xi + d(xi)."""
    d = [None if bj is None else -bj for bj in b]
    scale = max((_norm(bj) for bj in b), default=0.0)
    if scale == 0.0:
        return d, 0, 0.0
    lost = 0.0
    for it in range(1, max_iter + 1):
        shift = TaylorShift(window, caps, d, tol=taylor_tol, floor=floor)
        new = [None if bj is None else -shift(bj) for bj in b]
        lost += shift.lost
        change = max(_norm(_add(nj, None if dj is None else -dj)) for nj, dj in zip(new, d))
        d = new
        if change <= max(tol * scale, floor):
            return d, it, lost
    if change > fail_tol * scale:
        raise InversionDiverged(f"shift inversion stalled at relative change {change / scale:.2e}")
    return d, max_iter, lost


def kolmogorov_step(H: FourierTaylorHamiltonian, omega, policy: DivisorPolicy = DivisorPolicy(), *,
                    exact_cancellation: bool = True, cond_max: float = 1e8, taylor_tol: float = 1e-17,
                    higher_drop: float = 1e-16, coef_floor: float = 0.0):
    """One frequency-preserving step. Returns (new Hamiltonian in xi, step data).

    With ``exact_cancellation`` the pieces that the three homological
    equations cancel identically are removed symbolically; the leftover
    roundoff of the degree-1 average is reported as ``conjugacy_defect``.
    Without it the cancelling terms are added numerically (used to check
    the symbolic route).
    """
    w = _frequency_values(omega)
    n = H.size
    window, caps = H.window, H.caps
    sites = window.sites

    h0 = H.coefficient(())
    avg0 = 0.0 if h0 is None else h0.average().real
    a_flux = None if h0 is None else _nz(-h0.oscillating())
    a = None if a_flux is None else _cut(_nz(solve_homological(a_flux, w, policy)), coef_floor)
    a_x = [None if a is None else _nz(partial_derivative(a, int(s))) for s in sites]

    Q = [[H.hessian_entry(i, j) for j in range(n)] for i in range(n)]
    T1 = [_linear_deviation(H, j, w[j]) for j in range(n)]
    Qavg = H.hessian_average()
    cond = float(np.linalg.cond(Qavg)) if n else 1.0
    if not np.isfinite(cond) or cond > cond_max:
        raise DegenerateHessian(f"averaged Hessian has condition number {cond:.3e} > {cond_max:.1e}")
    rhs = np.zeros(n)
    for i in range(n):
        acc = 0.0 if T1[i] is None else T1[i].average().real
        for j in range(n):
            acc += _average_of_product(Q[i][j], a_x[j])
        rhs[i] = -acc
    alpha = np.linalg.solve(Qavg, rhs) if n else np.zeros(0)

    z = []
    for j in range(n):
        zj = a_x[j]
        if alpha[j] != 0:
            zj = TorusFunction.constant(window, caps, alpha[j]) if zj is None else zj.add_constant(alpha[j])
        z.append(_nz(zj))

    Qz = [_assemble(window, caps, [[Q[i][j], z[j]] for j in range(n)], floor_abs=coef_floor) for i in range(n)]
    v = [_add(T1[j], Qz[j]) for j in range(n)]
    defect = max((abs(vj.average()) for vj in v if vj is not None), default=0.0)
    b = []
    for j in range(n):
        flux = None if v[j] is None else _nz(-v[j].oscillating())
        b.append(None if flux is None else _cut(_nz(solve_homological(flux, w, policy)), coef_floor))
    B = [[None if b[j] is None else _nz(partial_derivative(b[j], int(sites[i]))) for j in range(n)]
         for i in range(n)]

    contraction = max((sum(_norm(B[i][j]) for i in range(n)) for j in range(n)), default=0.0)
    if contraction >= 1.0:
        raise InversionDiverged(f"max_j sum_i ||d_i b_j||_0 = {contraction:.3e} >= 1, shift inversion cannot contract")

    # blocks of degree >= 2 only act at order kappa^2 on the torus; they are kept
    # to roundoff of the coefficient scale rather than of their own (small) size
    scale = max([abs(c) for m, c in H.const.items() if len(m) >= 2] +
                [f.max_abs() for m, f in H.blocks.items() if f is not None and len(m) >= 2] + [0.0])
    floor = max(higher_drop * scale, coef_floor)

    def coarse(f):
        return None if f is None else _nz(f.prune_below(floor))

    half_z = [None if zj is None else zj.scale(0.5) for zj in z]
    products0 = [[T1[j], z[j]] for j in range(n)] + [[half_z[i], Qz[i]] for i in range(n)]
    products0 += _cubic_products(H, z)
    bound0 = max((math.prod(f.norm(0.0) for f in p) for p in products0 if all(f is not None for f in p)),
                 default=0.0)
    gradC, hessC = _cubic_grad_hess(H, z, grad_floor=max(1e-19 * bound0, coef_floor),
                                  hess_floor=floor)

    # degree 0: h0 + omega.a_x cancels to <h0>; the rest is second order
    extras0 = []
    if not exact_cancellation:
        extras0.append(h0)
        if a is not None:
            extras0.append(a.directional_derivative(w))
        const0 = float(np.dot(w, alpha))
    else:
        const0 = avg0 + float(np.dot(w, alpha))
    new0 = _assemble(window, caps, products0, extras0, floor_abs=coef_floor)

    # degree 1: omega + v + omega.d b cancels to omega + <v>
    G = [_add(v[i], gradC[i]) for i in range(n)]
    new1 = []
    for j in range(n):
        extras = [gradC[j]]
        if not exact_cancellation:
            extras.append(v[j])
            if b[j] is not None:
                extras.append(b[j].directional_derivative(w))
        new1.append(_assemble(window, caps, [[G[i], B[i][j]] for i in range(n)], extras, floor_abs=coef_floor))

    Bc = [[coarse(B[i][j]) for j in range(n)] for i in range(n)]
    hessC = {key: coarse(f) for key, f in hessC.items()}

    # degree 2: M^T P M with P = Q + hess C(z), M = I + B
    P = [[_add(Q[i][j], hessC.get((i, j))) for j in range(n)] for i in range(n)]
    PB = [[_sum(window, caps, [_mul(P[i][k], Bc[k][j], floor) for k in range(n)]) for j in range(n)]
          for i in range(n)]
    BtPB = [[_sum(window, caps, [_mul(Bc[k][i], PB[k][j], floor) for k in range(n)]) for j in range(n)]
            for i in range(n)]
    new2 = {}
    for i in range(n):
        for j in range(i, n):
            extra = _sum(window, caps, [hessC.get((i, j)), PB[i][j], PB[j][i], BtPB[i][j]])
            old = H.blocks.get((i, j))
            if extra is not None:
                extra = extra.scale(0.5) if i == j else extra
            new2[(i, j)] = _add(old, extra)

    # degree 3: C(M kappa) = C(kappa) + every expansion term with at least one B factor
    rows = [[(p, None)] + [(q, Bc[p][q]) for q in range(n) if Bc[p][q] is not None] for p in range(n)]
    cubic_terms = {m: [H.blocks.get(m)] for m in H.degree_blocks(3)}
    for m in H.degree_blocks(3):
        c = H.coefficient(m)
        for picks in itertools.product(*(rows[p] for p in m)):
            factors = [f for _, f in picks if f is not None]
            if not factors:
                continue
            term = _mul_chain([c] + factors, floor)
            if term is None:
                continue
            key = tuple(sorted(q for q, _ in picks))
            cubic_terms.setdefault(key, []).append(term)
    new3 = {m: _sum(window, caps, t) for m, t in cubic_terms.items()}

    d, iterations, lost_inv = solve_shift(window, caps, b, taylor_tol=taylor_tol, floor=coef_floor)
    shift = TaylorShift(window, caps, d, tol=taylor_tol, floor=coef_floor)

    const = dict(H.const)
    const[()] = const0
    for j in range(n):
        const[(j,)] = float(w[j])
    blocks = {(): shift(new0)}
    for j in range(n):
        blocks[(j,)] = shift(new1[j])
    for m, f in new2.items():
        blocks[m] = shift(f)
    for m, f in new3.items():
        blocks[m] = shift(f)
    blocks = {m: _nz(f.real_part()) for m, f in blocks.items() if f is not None}
    for m in list(blocks):
        blocks[m] = coarse(blocks[m]) if len(m) >= 2 else _cut(blocks[m], coef_floor)
    newH = FourierTaylorHamiltonian(window, caps, const, blocks, H.sigma, H.r)

    lost = shift.lost + lost_inv
    lost += sum(f.lost for f in blocks.values() if f is not None)
    norms = {
        "a": _norm(a, H.sigma),
        "a_x": max((_norm(t, H.sigma) for t in a_x), default=0.0),
        "alpha_plus_a_x": max((_norm(t, H.sigma) for t in z), default=0.0),
        "b_x": contraction,
        "alpha": float(np.max(np.abs(alpha))) if n else 0.0,
    }
    data = KolmogorovStepData(a, alpha, b, d, z, B, norms, float(defect), iterations, float(lost), cond)
    return newH, data


def compose_push(H: FourierTaylorHamiltonian, step: KolmogorovStepData, new_sigma: float | None = None, *,
                 taylor_tol: float = 1e-17, loss_budget: float | None = None) -> FourierTaylorHamiltonian:
    """H o psi for the map x = xi + d(xi), y = alpha + a_x + (I + b_x) kappa, expanded without cancellation.

    Only ``a``, ``alpha`` and ``b`` of the step are used. The y-substitution
    is affine, so the result stays cubic in kappa and nothing is projected.
    """
    n = H.size
    window, caps = H.window, H.caps
    sites = window.sites
    alpha = np.zeros(n) if step.alpha is None or len(step.alpha) == 0 else np.asarray(step.alpha, dtype=float)
    b = list(step.b) if step.b else [None] * n
    z = []
    for j in range(n):
        zj = None if step.a is None else _nz(partial_derivative(step.a, int(sites[j])))
        if alpha[j] != 0:
            zj = TorusFunction.constant(window, caps, alpha[j]) if zj is None else zj.add_constant(alpha[j])
        z.append(zj)
    B = [[None if b[q] is None else _nz(partial_derivative(b[q], int(sites[p]))) for q in range(n)]
         for p in range(n)]
    # factor y_p = z_p + kappa_p + sum_q B[p][q] kappa_q
    picks = [[(None, z[p])] + [(q, (TorusFunction.constant(window, caps, 1.0) if q == p else None))
                               for q in range(n)] for p in range(n)]
    for p in range(n):
        for q in range(n):
            if B[p][q] is not None:
                k = picks[p][q + 1][1]
                picks[p][q + 1] = (q, B[p][q] if k is None else _add(k, B[p][q]))
    terms = {}
    monos = set(H.const) | set(H.blocks)
    for m in sorted(monos):
        c = H.coefficient(m)
        if c is None:
            continue
        for choice in itertools.product(*(picks[p] for p in m)):
            if any(f is None for _, f in choice):
                continue
            prod = _mul_chain([c] + [f for _, f in choice])
            if prod is None:
                continue
            key = tuple(sorted(q for q, _ in choice if q is not None))
            terms.setdefault(key, []).append(prod)
    d, _, lost = solve_shift(window, caps, b, taylor_tol=taylor_tol)
    shift = TaylorShift(window, caps, d, tol=taylor_tol)
    const, blocks = {}, {}
    for key, pieces in terms.items():
        f = _sum(window, caps, pieces)
        if f is None:
            continue
        f = _nz(shift(f).real_part())
        if f is None:
            continue
        const[key] = f.average().real
        blocks[key] = _nz(f.oscillating())
    lost += shift.lost
    if loss_budget is not None and lost > loss_budget:
        raise AliasingBudgetExceeded(f"composition dropped mass {lost:.3e} beyond the budget {loss_budget:.3e}")
    return FourierTaylorHamiltonian(window, caps, const, blocks, H.sigma if new_sigma is None else new_sigma, H.r)


# torus embedding

def compose_embedding(steps, window: SiteWindow, caps: Truncation, taylor_tol: float = 1e-17, floor: float = 0.0):
    """Torus xi -> (xi + U(xi), V(xi)) of the composed map psi^0 o ... o psi^nu at kappa = 0.

    Coefficients below the absolute ``floor`` are dropped along the way.
    """
    n = window.size
    U = [None] * n
    Y = [None] * n
    for step in reversed(steps):
        inner = TaylorShift(window, caps, U, tol=taylor_tol, floor=floor)
        U = [_add(U[j], inner(step.d[j])) for j in range(n)]
        outer = TaylorShift(window, caps, U, tol=taylor_tol, floor=floor)
        newY = []
        for i in range(n):
            terms = [outer(step.z[i]), Y[i]]
            for j in range(n):
                if step.B[i][j] is not None and Y[j] is not None:
                    terms.append(_mul(outer(step.B[i][j]), Y[j], floor))
            newY.append(_cut(_sum(window, caps, terms), floor))
        Y = [None if t is None else _nz(t.real_part()) for t in newY]
        U = [None if t is None else _nz(t.real_part()) for t in U]
    return U, Y


def apply_step_pointwise(step: KolmogorovStepData, window: SiteWindow, xi, kappa, *, tol: float = 1e-14):
    """psi(xi, kappa) at real points by Newton on xi = x + b(x) (independent of the Taylor shift)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
    n = window.size
    sites = window.sites
    x = xi.copy()
    for _ in range(100):
        bx = np.stack([np.zeros(len(x)) if bj is None else bj.evaluate(x).real for bj in step.b], axis=-1)
        jac = np.zeros((len(x), n, n))
        for j in range(n):
            jac[:, j, j] = 1.0
            for i in range(n):
                if step.B[i][j] is not None:
                    jac[:, j, i] += step.B[i][j].evaluate(x).real
        resid = x + bx - xi
        dx = np.linalg.solve(jac, resid[..., None])[..., 0]
        x = x - dx
        if np.max(np.abs(dx)) < tol:
            break
    else:
        raise InversionDiverged("pointwise Newton inversion failed")
    y = np.stack([np.zeros(len(x)) if zj is None else zj.evaluate(x).real for zj in step.z], axis=-1) + kappa
    for i in range(n):
        for j in range(n):
            if step.B[i][j] is not None:
                y[:, i] += step.B[i][j].evaluate(x).real * kappa[:, j]
    return x, y


def step_jacobian(step: KolmogorovStepData, window: SiteWindow, xi, kappa):
    """Analytic Jacobian of psi at one point, blocks [[dx/dxi, 0], [dy/dxi, dy/dkappa]]."""
    x, _ = apply_step_pointwise(step, window, xi, kappa)
    x = x[0]
    kappa = np.asarray(kappa, dtype=float).reshape(-1)
    n = window.size
    sites = window.sites
    Bm = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if step.B[i][j] is not None:
                Bm[i, j] = step.B[i][j].evaluate(x[None])[0].real
    dxi_dx = np.eye(n) + Bm.T
    dx_dxi = np.linalg.inv(dxi_dx)
    hess = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            if step.a is not None:
                f = partial_derivative(partial_derivative(step.a, int(sites[i])), int(sites[k]))
                hess[i, k] += f.evaluate(x[None])[0].real
            for j in range(n):
                if step.b[j] is not None and kappa[j] != 0:
                    f = partial_derivative(partial_derivative(step.b[j], int(sites[i])), int(sites[k]))
                    hess[i, k] += kappa[j] * f.evaluate(x[None])[0].real
    jac = np.zeros((2 * n, 2 * n))
    jac[:n, :n] = dx_dxi
    jac[n:, :n] = hess @ dx_dxi
    jac[n:, n:] = np.eye(n) + Bm
    return jac


def symplectic_defect(jac: np.ndarray) -> float:
    n = jac.shape[0] // 2
    Omega = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    return float(np.max(np.abs(jac.T @ Omega @ jac - Omega)))


# iteration driver

@dataclass
class KAMConfig:
    sigma: float = 0.1
    eta: float = 2.0
    q: float | None = None
    target: float = 1e-150
    max_steps: int = 8
    caps: Truncation = field(default_factory=lambda: Truncation(96, 96))
    y_degree: int = 3
    divisor_floor: float = 1e-13
    gamma: float | None = None
    mu: float | None = None
    loss_budget_rel: float = 1e-3
    taylor_tol: float = 1e-17
    record_timings: bool = False
    coef_floor: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma:
            raise ConfigError("sigma must be positive")
        if not self.eta >= 2:
            raise ConfigError("eta must be >= 2")
        lo = 2.0 ** -self.eta
        if self.q is None:
            self.q = default_q(self.eta)
        if not lo < self.q < 0.5 * (lo + 1):
            raise ConfigError(f"q must lie in ({lo}, {0.5 * (lo + 1)})")
        if self.y_degree != 3:
            raise ConfigError("only y_degree = 3 is supported")
        if self.max_steps < 0 or not self.target > 0:
            raise ConfigError("max_steps must be >= 0 and target > 0")

    @property
    def policy(self) -> DivisorPolicy:
        return DivisorPolicy(floor_rel=self.divisor_floor, gamma=self.gamma, mu=self.mu)

    @classmethod
    def from_json(cls, data) -> "KAMConfig":
        data = dict(data)
        caps = data.pop("caps", None)
        if caps is not None:
            caps = dict(caps)
            caps.pop("N", None)
            data["y_degree"] = int(caps.pop("y_degree", 3))
            data["caps"] = Truncation(int(caps.get("L", 96)), int(caps.get("O", 96)))
        return cls(**data)


@dataclass
class KAMReport:
    history: list
    steps: list
    H: FourierTaylorHamiltonian
    omega: np.ndarray
    converged: bool
    fitted_C: float | None
    fitted_exponent: float | None
    loglog_slope: float | None
    envelope_K: float | None
    frequency_residual: float
    embedding: tuple | None = None

    def summary(self) -> dict:
        return {"converged": self.converged, "steps": len(self.steps), "fitted_C": self.fitted_C,
                "fitted_exponent": self.fitted_exponent, "loglog_slope": self.loglog_slope,
                "loglog_slope_over_log2": None if self.loglog_slope is None else self.loglog_slope / math.log(2),
                "envelope_K": self.envelope_K, "frequency_residual": self.frequency_residual,
                "final_eps": self.history[-1]["eps"] if self.history else None}

    def jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.history)


def fit_convergence(eps: list, eta: float, sigma: float, window_len: int = 4):
    """Quadratic-convergence fits on a measured error sequence.

    Returns (C, exponent, loglog slope, K) where C = max eps_{k+1} / eps_k^2,
    exponent is the log-log regression slope of eps_{k+1} on eps_k, the
    loglog slope is fitted over the last ``window_len`` positive errors and
    K is the largest constant with eps_k <= exp(-2^k K sigma^(-2/eta)).
    """
    eps = [e for e in eps]
    pos = [(k, e) for k, e in enumerate(eps) if 0 < e < 1]
    C = exponent = slope = K = None
    pairs = [(eps[k], eps[k + 1]) for k in range(len(eps) - 1) if eps[k] > 0 and eps[k + 1] > 0]
    if pairs:
        C = max(b / a ** 2 for a, b in pairs)
    if len(pairs) >= 2:
        xs = np.log([a for a, _ in pairs])
        ys = np.log([b for _, b in pairs])
        exponent = float(np.polyfit(xs, ys, 1)[0])
    if len(pos) >= 3:
        tail = pos[-window_len:]
        ks = np.array([k for k, _ in tail], dtype=float)
        ll = np.log(-np.log([e for _, e in tail]))
        slope = float(np.polyfit(ks, ll, 1)[0])
    if pos:
        K = min(-math.log(e) / (2.0 ** k * sigma ** (-2.0 / eta)) for k, e in pos)
    return C, exponent, slope, K


def run_iteration(H0: FourierTaylorHamiltonian, omega, config: KAMConfig, *, embedding: bool = True,
                  exact_cancellation: bool = True) -> KAMReport:
    """Iterate Kolmogorov steps until eps < target or max_steps; Diverged after two rises in a row."""
    w = _frequency_values(omega)
    sigma = config.sigma
    H = H0
    if config.coef_floor > 0:
        H = FourierTaylorHamiltonian(H0.window, H0.caps, H0.const,
                                     {m: _cut(f, config.coef_floor) for m, f in H0.blocks.items()}, H0.sigma, H0.r)
    state = KAMState(H, 0, sigma, 0.0, config.q, sigma)
    e_val, e_freq = measure_error(H, w, sigma)
    eps = max(e_val, e_freq)
    state.eps_nu = eps
    history = [_record(0, sigma, e_val, e_freq, frequency_residual(H, w), H, None, None)]
    steps = []
    rises = 0
    while eps >= config.target and state.nu < config.max_steps:
        t0 = time.perf_counter()
        H, data = kolmogorov_step(H, w, config.policy, exact_cancellation=exact_cancellation,
                                  taylor_tol=config.taylor_tol, coef_floor=config.coef_floor)
        elapsed = time.perf_counter() - t0
        if data.lost_mass > config.loss_budget_rel * max(eps, 1e-300):
            raise AliasingBudgetExceeded(
                f"step {state.nu + 1} dropped mass {data.lost_mass:.3e} beyond the caps "
                f"(budget {config.loss_budget_rel:.1e} x eps = {config.loss_budget_rel * eps:.3e})")
        steps.append(data)
        state.sigma_nu = state.next_sigma()
        state.nu += 1
        e_val, e_freq = measure_error(H, w, state.sigma_nu)
        new_eps = max(e_val, e_freq)
        rec = _record(state.nu, state.sigma_nu, e_val, e_freq, frequency_residual(H, w), H, data,
                      elapsed if config.record_timings else None)
        history.append(rec)
        rises = rises + 1 if new_eps > eps else 0
        eps = new_eps
        state.eps_nu = eps
        if rises >= 2:
            raise Diverged(f"error increased on two consecutive steps (nu = {state.nu}, eps = {eps:.3e})")
    C, exponent, slope, K = fit_convergence([r["eps"] for r in history], config.eta, config.sigma)
    for rec in history:
        rec["envelope"] = None if K is None else math.exp(-(2.0 ** rec["nu"]) * K * config.sigma ** (-2.0 / config.eta))
    emb = compose_embedding(steps, H0.window, H0.caps, config.taylor_tol, config.coef_floor) if embedding and steps else None
    return KAMReport(history, steps, H, w, eps < config.target, C, exponent, slope, K,
                     frequency_residual(H, w), emb)


def _record(nu, sigma_nu, e_val, e_freq, residual, H, data, elapsed):
    rec = {"nu": nu, "sigma_nu": sigma_nu, "eps_value": e_val, "eps_freq": e_freq, "eps": max(e_val, e_freq),
           "freq_residual": residual, "terms": H.nterms()}
    if data is not None:
        rec["norms"] = {k: float(v) for k, v in sorted(data.norms.items())}
        rec["conjugacy_defect"] = data.conjugacy_defect
        rec["inversion_iterations"] = data.inversion_iterations
        rec["lost_mass"] = data.lost_mass
        rec["hessian_condition"] = data.hessian_condition
    if elapsed is not None:
        rec["timings"] = {"step_seconds": elapsed}
    return rec


# Taylor estimates

@dataclass(frozen=True)
class TaylorReport:
    M: float
    y_norm: float
    value_lhs: float
    value_rhs: float
    gradient_lhs: float
    gradient_rhs: float
    remainder_lhs: float
    remainder_rhs: float

    @property
    def margins(self) -> tuple:
        return (self.value_rhs - self.value_lhs, self.gradient_rhs - self.gradient_lhs,
                self.remainder_rhs - self.remainder_lhs)

    @property
    def holds(self) -> bool:
        return all(m >= 0 for m in self.margins)


def _poly_in_y(H, degree_filter, y):
    """Sum over monomials of the chosen degrees of coefficient * y^m with constant y."""
    terms = []
    for m in set(H.const) | set(H.blocks):
        if len(m) not in degree_filter:
            continue
        c = H.coefficient(m)
        if c is not None:
            terms.append(c.scale(float(np.prod([y[k] for k in m])) if m else 1.0))
    return _sum(H.window, H.caps, terms)


def _grad_in_y(H, y, degrees):
    n = H.size
    out = [[] for _ in range(n)]
    for m in set(H.const) | set(H.blocks):
        if len(m) not in degrees:
            continue
        c = H.coefficient(m)
        for k in range(len(m)):
            rest = [m[l] for l in range(len(m)) if l != k]
            out[m[k]].append(c.scale(float(np.prod([y[t] for t in rest])) if rest else 1.0))
    return [_sum(H.window, H.caps, g) for g in out]


def taylor_remainder_checks(H: FourierTaylorHamiltonian, y, sigma: float, varsigma: float = 1.0):
    """Check the three Taylor inequalities for constant actions y with ||y|| < r.

    ||y|| = sum_j |y_j| <j>^varsigma; M bounds every Hessian entry in the
    sigma-norm over the polydisc |y_k| <= r <k>^-varsigma.
    """
    y = np.asarray(getattr(y, "values", y), dtype=float).real
    brackets = H.window.brackets
    y_norm = float(np.sum(np.abs(y) * brackets ** varsigma))
    if not y_norm < H.r:
        raise ConfigError("taylor checks need ||y|| < r")
    n = H.size
    radius = H.r * brackets ** -varsigma
    bound = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            bound[i, j] = _norm(H.hessian_entry(i, j), sigma)
    for m in H.degree_blocks(3):
        c_norm = _norm(H.coefficient(m), sigma)
        # d_i d_j d_k y^m = prod of count! when {i, j, k} = m as multisets
        weight = float(np.prod([math.factorial(m.count(s)) for s in set(m)]))
        for i, j in set(itertools.combinations(m, 2)):
            rest = list(m)
            rest.remove(i)
            rest.remove(j)
            bound[i, j] += c_norm * weight * radius[rest[0]]
    M = float(bound.max()) if n else 0.0
    v1 = _poly_in_y(H, (2, 3), y)
    value_lhs = _norm(v1, sigma)
    g_y = _grad_in_y(H, y, (2, 3))
    gradient_lhs = max((_norm(g, sigma) for g in g_y), default=0.0)
    g_cubic = _grad_in_y(H, y, (3,))
    remainder_lhs = max((_norm(g, sigma) for g in g_cubic), default=0.0)
    return TaylorReport(M, y_norm, value_lhs, M * y_norm ** 2, gradient_lhs, M * y_norm,
                        remainder_lhs, M * y_norm ** 2 / (H.r - y_norm))

