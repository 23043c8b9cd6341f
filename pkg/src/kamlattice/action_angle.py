"""Action-angle reduction for one-degree-of-freedom even polynomial potentials.

Hamiltonian h = y^2/2 + V(x) with V(x) = sum_k c_k x^(2k), k >= 1.

Two action normalisations are supported. ``half_area`` uses
rho(h) = 2 sqrt(2) int_0^a sqrt(h - V(s)) ds (half of the enclosed loop area),
``canonical`` uses J = loop area / 2 pi = rho / pi, which pairs with a
2 pi periodic angle to give a symplectic chart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P
from scipy.integrate import tanhsinh
from scipy.optimize import brentq

from .errors import (ConfigError, DegenerateHessian, IntegrationFailure, NondegeneracyViolated,
                     OutOfRange, TurningPointNotFound)

CONVENTIONS = {"half_area": 1.0, "canonical": 1.0 / math.pi}


@dataclass(frozen=True)
class Potential:
    """Even polynomial V(x) = sum_k coeffs[k-1] x^(2k)."""

    coeffs: tuple
    kind: str = "series"
    p: int | None = None

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if not coeffs or not any(coeffs):
            raise ConfigError("potential needs at least one nonzero coefficient")
        if coeffs[-1] <= 0:
            raise ConfigError("leading coefficient must be positive for closed level curves")
        if any(c < 0 for c in coeffs):
            raise ConfigError("negative coefficients may break positivity of V; not supported")
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def monomial(cls, p: int) -> "Potential":
        if p < 1:
            raise ConfigError("monomial exponent p must be >= 1")
        return cls(tuple([0.0] * (p - 1) + [1.0]), "monomial", p)

    @classmethod
    def quartic(cls) -> "Potential":
        return cls((2.0, 1.0), "quartic")

    @classmethod
    def series(cls, coeffs) -> "Potential":
        return cls(tuple(coeffs), "series")

    @property
    def poly(self) -> np.ndarray:
        """Ascending power-series coefficients in x."""
        out = np.zeros(2 * len(self.coeffs) + 1)
        out[2::2] = self.coeffs
        return out

    @property
    def strip(self) -> float:
        # polynomials are entire
        return math.inf

    def __call__(self, x):
        return P.polyval(x, self.poly)

    def derivative(self, x, order: int = 1):
        return P.polyval(x, P.polyder(self.poly, order))

    def secant_quotient(self, a, s):
        """(V(a) - V(s)) / (a^2 - s^2), expanded so that no cancellation occurs."""
        a2 = np.asarray(a, dtype=float) ** 2
        s2 = np.asarray(s, dtype=float) ** 2
        out = np.zeros(np.broadcast(a2, s2).shape)
        for k, c in enumerate(self.coeffs, start=1):
            if c == 0:
                continue
            # a^(2k) - s^(2k) = (a^2 - s^2) sum_j a^(2j) s^(2(k-1-j))
            out = out + c * sum(a2 ** j * s2 ** (k - 1 - j) for j in range(k))
        return out

    def to_json(self) -> dict:
        if self.kind == "monomial":
            return {"kind": "monomial", "p": self.p}
        if self.kind == "quartic":
            return {"kind": "quartic"}
        return {"kind": "series", "coeffs": list(self.coeffs)}

    @classmethod
    def from_json(cls, data) -> "Potential":
        kind = data.get("kind")
        if kind == "monomial":
            return cls.monomial(int(data["p"]))
        if kind == "quartic":
            return cls.quartic()
        if kind == "series":
            return cls.series(data["coeffs"])
        raise ConfigError(f"unknown potential kind {kind!r}")


def turning_point(V: Potential, h):
    """Positive root a of V(a) = h; vectorized over h."""
    h_arr = np.atleast_1d(np.asarray(h, dtype=float))
    out = np.empty_like(h_arr)
    for k, hk in enumerate(h_arr):
        if not hk > 0 or not np.isfinite(hk):
            raise TurningPointNotFound(f"energy must be positive and finite, got {hk}")
        hi = 1.0
        for _ in range(200):
            if V(hi) > hk:
                break
            hi *= 2.0
        else:
            raise TurningPointNotFound(f"no bracket for V(a) = {hk}")
        lo = 0.0
        out[k] = brentq(lambda s: V(s) - hk, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return out if np.ndim(h) else float(out[0])


def area_rho(V: Potential, h):
    """rho(h) = 2 sqrt(2) int_0^a sqrt(h - V(s)) ds by tanh-sinh quadrature."""
    h_arr = np.atleast_1d(np.asarray(h, dtype=float))
    a = turning_point(V, h_arr)

    def integrand(t, hh, aa):
        return np.sqrt(np.maximum(hh - V(aa * t), 0.0))

    res = tanhsinh(integrand, 0.0, 1.0, args=(h_arr, a), atol=0.0, rtol=1e-14, maxlevel=12)
    if not np.all(res.success):
        raise IntegrationFailure("tanh-sinh quadrature did not reach the requested tolerance")
    out = 2.0 * math.sqrt(2.0) * a * res.integral
    return out if np.ndim(h) else float(out[0])


def loop_area(V: Potential, h):
    """Full enclosed area of the level curve, twice ``area_rho`` for even V."""
    h_arr = np.atleast_1d(np.asarray(h, dtype=float))
    a = turning_point(V, h_arr)

    def integrand(t, hh, aa):
        return np.sqrt(2.0 * np.maximum(hh - V(aa * t), 0.0))

    res = tanhsinh(integrand, -1.0, 1.0, args=(h_arr, a), atol=0.0, rtol=1e-14, maxlevel=12)
    out = 2.0 * a * res.integral
    return out if np.ndim(h) else float(out[0])


def _trapezoid_nodes(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) * (math.pi / m)


@dataclass(frozen=True)
class Orbit:
    """Level curve data: energy, turning point, and the angle series in the u-parametrisation.

    x = a sin u, y = a cos u sqrt(2 S(a sin u)), dt = g(u) du, g = 1 / sqrt(2 S).
    ``gk`` holds the cosine coefficients of g in cos(2 k u).
    """

    h: float
    a: float
    gk: np.ndarray

    @property
    def period(self) -> float:
        return 2.0 * math.pi * self.gk[0]

    @property
    def frequency(self) -> float:
        return 1.0 / self.gk[0]


def _g_samples(V: Potential, a: float, u: np.ndarray) -> np.ndarray:
    return 1.0 / np.sqrt(2.0 * V.secant_quotient(a, a * np.sin(u)))


def make_orbit(V: Potential, h: float) -> Orbit:
    a = turning_point(V, h)
    m = 64
    while True:
        # g is pi-periodic and even; samples on [0, pi)
        u = np.arange(m) * (math.pi / m)
        coef = np.fft.rfft(_g_samples(V, a, u)).real / m
        coef[1:] *= 2.0
        if m // 2 < coef.size:
            coef[m // 2] *= 0.5
        tail = np.abs(coef[-4:]).max()
        if tail < 2e-16 * abs(coef[0]) or m >= 1 << 14:
            break
        m *= 2
    return Orbit(float(h), float(a), coef[: m // 2])


def rho_smooth(V: Potential, h: float, nodes: int = 256) -> float:
    """rho(h) through s = a sin u, a smooth periodic integrand (trapezoid rule)."""
    a = turning_point(V, h)
    u = _trapezoid_nodes(nodes) * 0.5
    vals = np.cos(u) ** 2 * np.sqrt(V.secant_quotient(a, a * np.sin(u)))
    return float(2.0 * math.sqrt(2.0) * a * a * vals.mean() * (math.pi / 2))


class AngleActionChart:
    """Symplectic chart (theta, J) <-> (x, y) in the canonical normalisation.

    theta = 0 sits at x = 0, y > 0 and increases along the flow.
    """

    def __init__(self, V: Potential):
        self.V = V
        self._orbit = lru_cache(maxsize=4096)(self._make_orbit)

    def _make_orbit(self, h: float) -> Orbit:
        return make_orbit(self.V, h)

    def canonical_action(self, h: float) -> float:
        a = turning_point(self.V, float(h))
        n = 128
        prev = None
        while True:
            u = _trapezoid_nodes(n) * 0.5
            vals = np.cos(u) ** 2 * np.sqrt(self.V.secant_quotient(a, a * np.sin(u)))
            val = math.sqrt(2.0) * a * a * vals.mean()
            if prev is not None and (abs(val - prev) <= 1e-16 * abs(val) or n >= 8192):
                return float(val)
            prev = val
            n *= 2

    def energy(self, J: float) -> float:
        """h with canonical action J, Newton on exact quadrature (dJ/dh = T / 2 pi)."""
        if not J > 0:
            raise OutOfRange(f"action must be positive, got {J}")
        hi = max(J, 1e-300)
        while self.canonical_action(hi) < J:
            hi *= 2.0
        lo = hi / 2.0
        while self.canonical_action(lo) > J:
            lo /= 2.0
        h = brentq(lambda e: self.canonical_action(e) - J, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=200)
        for _ in range(3):
            orbit = self._orbit(h)
            step = (self.canonical_action(h) - J) / orbit.gk[0]
            if step == 0:
                break
            h -= step
        return float(h)

    def orbit(self, J: float) -> Orbit:
        return self._orbit(self.energy(float(J)))

    @staticmethod
    def _angle(orbit: Orbit, u):
        k = np.arange(1, orbit.gk.size)
        r = orbit.gk[1:] / orbit.gk[0]
        return u + np.sin(np.multiply.outer(u, 2 * k)) @ (r / (2 * k))

    @staticmethod
    def _angle_rate(orbit: Orbit, u):
        k = np.arange(1, orbit.gk.size)
        r = orbit.gk[1:] / orbit.gk[0]
        return 1.0 + np.cos(np.multiply.outer(u, 2 * k)) @ r

    def _u_of_theta(self, orbit: Orbit, theta):
        theta = np.asarray(theta, dtype=float)
        u = theta.copy()
        for _ in range(60):
            step = (self._angle(orbit, u) - theta) / self._angle_rate(orbit, u)
            u = u - step
            if np.all(np.abs(step) < 1e-15):
                break
        else:
            raise IntegrationFailure("angle inversion did not converge")
        return u

    def forward_orbit(self, orbit: Orbit, theta):
        u = self._u_of_theta(orbit, theta)
        s = orbit.a * np.sin(u)
        y = orbit.a * np.cos(u) * np.sqrt(2.0 * self.V.secant_quotient(orbit.a, s))
        return s, y

    def forward(self, theta, J):
        """(theta, J) -> (x, y); J may be a scalar or broadcast against theta."""
        theta, J = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(J, dtype=float))
        x = np.empty(theta.shape)
        y = np.empty(theta.shape)
        for j in np.unique(J):
            mask = J == j
            x[mask], y[mask] = self.forward_orbit(self.orbit(j), theta[mask])
        return x, y

    def inverse(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        theta = np.empty(x.shape)
        J = np.empty(x.shape)
        for k in np.ndindex(x.shape):
            h = 0.5 * y[k] ** 2 + float(self.V(x[k]))
            orbit = self._orbit(h)
            root = math.sqrt(2.0 * float(self.V.secant_quotient(orbit.a, x[k])))
            u = math.atan2(x[k] / orbit.a, y[k] / (orbit.a * root))
            theta[k] = float(self._angle(orbit, np.array(u))) % (2 * math.pi)
            J[k] = self.canonical_action(h)
        return theta, J

    def frequency(self, J: float) -> float:
        return self.orbit(J).frequency


# power series reversion

def reverse_series(a_coeffs, order: int) -> np.ndarray:
    """Lagrange inversion of r = sum_{j>=1} A_j h^j into h = sum_{k>=1} B_k r^k.

    Input and output are lists starting at the linear coefficient.
    B_k = (1/k) [h^(k-1)] (h / r(h))^k.
    """
    A = np.zeros(order)
    A[: min(order, len(a_coeffs))] = np.asarray(a_coeffs, dtype=float)[:order]
    if A[0] == 0:
        raise ConfigError("series reversion needs a nonzero linear coefficient")
    # reciprocal of phi(h) = r(h) / h, truncated
    recip = np.zeros(order)
    recip[0] = 1.0 / A[0]
    for n in range(1, order):
        recip[n] = -np.dot(A[1:n + 1], recip[n - 1::-1][:n]) / A[0]
    out = np.zeros(order)
    power = np.zeros(order)
    power[0] = 1.0
    for k in range(1, order + 1):
        power = P.polymul(power, recip)[:order]
        out[k - 1] = power[k - 1] / k
    return out


def fit_small_amplitude_series(V: Potential, h_max: float, order: int = 10, h_min: float | None = None,
                               samples: int = 64, convention: str = "half_area"):
    """Least-squares fit of rho(h) = sum_{j=1}^order A_j h^j on [h_min, h_max]."""
    h_min = h_max * 1e-2 if h_min is None else h_min
    nodes = 0.5 * (h_min + h_max) + 0.5 * (h_max - h_min) * np.cos(np.pi * (np.arange(samples) + 0.5) / samples)
    rho = area_rho(V, nodes) * CONVENTIONS[convention]
    design = np.stack([(nodes / h_max) ** j for j in range(1, order + 1)], axis=1)
    coef, *_ = np.linalg.lstsq(design, rho, rcond=None)
    return coef / h_max ** np.arange(1, order + 1)


@dataclass
class ActionProfile:
    """Chebyshev model of the action as a function of energy on [h_lo, h_hi]."""

    V: Potential
    h_lo: float
    h_hi: float
    cheb: np.ndarray
    convention: str = "half_area"
    fit_residual: float = 0.0
    c_bounds: tuple = (0.0, 0.0)
    H0_series: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self._d1 = C.chebder(self.cheb, 1)
        self._d2 = C.chebder(self.cheb, 2)
        self._d3 = C.chebder(self.cheb, 3)
        grid = np.linspace(self.h_lo, self.h_hi, 2049)
        self._grid_h = grid
        self._grid_rho = self.rho(grid)

    def _t(self, h):
        return (2.0 * np.asarray(h, dtype=float) - (self.h_lo + self.h_hi)) / (self.h_hi - self.h_lo)

    @property
    def _scale(self):
        return 2.0 / (self.h_hi - self.h_lo)

    def rho(self, h):
        return C.chebval(self._t(h), self.cheb)

    def rho_derivative(self, h, order: int = 1):
        coef = {1: self._d1, 2: self._d2, 3: self._d3}[order]
        return C.chebval(self._t(h), coef) * self._scale ** order

    @property
    def action_range(self) -> tuple:
        return float(self._grid_rho[0]), float(self._grid_rho[-1])

    def H0(self, action):
        """Energy with the given action, Newton on the Chebyshev model with bisection fallback."""
        act = np.atleast_1d(np.asarray(action, dtype=float))
        lo_a, hi_a = self.action_range
        tol = 1e-12 * max(abs(hi_a), 1.0)
        if np.any(act < lo_a - tol) or np.any(act > hi_a + tol):
            raise OutOfRange(f"action outside the profile range [{lo_a}, {hi_a}]")
        h = np.interp(act, self._grid_rho, self._grid_h)
        lo = np.full_like(h, self.h_lo)
        hi = np.full_like(h, self.h_hi)
        for _ in range(100):
            f = self.rho(h) - act
            lo = np.where(f < 0, h, lo)
            hi = np.where(f > 0, h, hi)
            step = f / self.rho_derivative(h)
            nxt = h - step
            bad = (nxt < lo) | (nxt > hi)
            nxt = np.where(bad, 0.5 * (lo + hi), nxt)
            done = np.abs(nxt - h) <= 1e-15 * np.abs(nxt)
            h = nxt
            if np.all(done):
                break
        return h if np.ndim(action) else float(h[0])

    def H0_derivatives(self, action):
        """(H0', H0'', H0''') at the given actions."""
        h = self.H0(action)
        r1 = self.rho_derivative(h, 1)
        r2 = self.rho_derivative(h, 2)
        r3 = self.rho_derivative(h, 3)
        d1 = 1.0 / r1
        d2 = -r2 / r1 ** 3
        d3 = (3.0 * r2 ** 2 - r1 * r3) / r1 ** 5
        return d1, d2, d3

    @property
    def c(self) -> float:
        lo, hi = self.c_bounds
        return max(hi, 1.0 / lo) if lo > 0 else math.inf

    def to_json(self) -> dict:
        return {"V": self.V.to_json(), "I": [self.h_lo, self.h_hi], "cheb": [float(c) for c in self.cheb],
                "H0_series": [float(b) for b in self.H0_series], "c_bounds": [float(c) for c in self.c_bounds],
                "convention": self.convention, "fit_residual": self.fit_residual}

    @classmethod
    def from_json(cls, data) -> "ActionProfile":
        return cls(Potential.from_json(data["V"]), float(data["I"][0]), float(data["I"][1]),
                   np.asarray(data["cheb"], dtype=float), data.get("convention", "half_area"),
                   float(data.get("fit_residual", 0.0)), tuple(data["c_bounds"]),
                   np.asarray(data.get("H0_series", []), dtype=float))


NONDEGENERACY_REL = 1e-8


def build_profile(V: Potential, interval, nodes: int = 48, *, convention: str = "half_area",
                  series_order: int = 8, max_nodes: int = 256) -> ActionProfile:
    """Chebyshev fit of rho on [h_lo, h_hi], refined until the residual is <= 1e-10.

    Raises NondegeneracyViolated where rho' or rho'' vanishes relative to the
    scale of rho' on the interval.
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown action convention {convention!r}")
    h_lo, h_hi = float(interval[0]), float(interval[1])
    if not 0 < h_lo < h_hi:
        raise ConfigError("energy interval must satisfy 0 < h_lo < h_hi")
    scale = CONVENTIONS[convention]
    mid = 0.5 * (h_lo + h_hi)
    half = 0.5 * (h_hi - h_lo)

    def rho_of_t(t):
        return area_rho(V, mid + half * t) * scale

    check_t = np.cos(np.pi * (np.arange(97) + 0.5) / 97)
    check_vals = rho_of_t(check_t)
    n = nodes
    while True:
        cheb = C.chebinterpolate(rho_of_t, n)
        residual = float(np.max(np.abs(C.chebval(check_t, cheb) - check_vals)))
        if residual <= 1e-10 * max(1.0, np.max(np.abs(check_vals))) or n >= max_nodes:
            break
        n *= 2
    cheb = C.chebtrim(cheb, 1e-17 * np.abs(cheb).max())
    profile = ActionProfile(V, h_lo, h_hi, cheb, convention, residual)
    hs = np.linspace(h_lo, h_hi, 513)
    r1 = profile.rho_derivative(hs, 1)
    r2 = profile.rho_derivative(hs, 2)
    width = h_hi - h_lo
    ref = np.max(np.abs(r1))
    bad1 = np.flatnonzero(r1 <= NONDEGENERACY_REL * ref)
    if bad1.size:
        raise NondegeneracyViolated(float(hs[bad1[0]]), "rho' vanishes")
    rel2 = np.abs(r2) * width / np.abs(r1)
    bad2 = np.flatnonzero(rel2 < NONDEGENERACY_REL)
    if bad2.size:
        raise NondegeneracyViolated(float(hs[bad2[0]]), "rho'' vanishes (H0'' = 0)")
    if np.any(np.diff(np.sign(r2)) != 0):
        k = int(np.flatnonzero(np.diff(np.sign(r2)))[0])
        raise NondegeneracyViolated(float(hs[k]), "rho'' changes sign")
    d2 = np.abs(-r2 / r1 ** 3)
    profile.c_bounds = (float(d2.min()), float(d2.max()))
    if series_order:
        try:
            A = fit_small_amplitude_series(V, h_hi, series_order, h_min=h_lo, convention=convention)
            profile.H0_series = reverse_series(A, series_order)
        except ConfigError:
            profile.H0_series = np.zeros(0)
    return profile


def frequency_map(profile: ActionProfile, xi):
    """omega_n = H0'(xi_n) and the Hessian diagonal H0''(xi_n)."""
    xi = np.asarray(xi, dtype=float)
    d1, d2, _ = profile.H0_derivatives(xi)
    lo, hi = profile.c_bounds
    slack = 1e-9
    bad = (np.abs(d2) < lo * (1 - slack)) | (np.abs(d2) > hi * (1 + slack)) | (d2 == 0)
    if np.any(bad):
        raise DegenerateHessian(f"|H0''| leaves the profile bounds {profile.c_bounds} at xi = {xi[bad][0]}")
    return np.atleast_1d(d1), np.atleast_1d(d2)


def angle_action_chart(V: Potential, profile: ActionProfile | None = None) -> AngleActionChart:
    """Chart in canonical normalisation; the profile argument only fixes the potential's range checks."""
    if profile is not None and profile.V != V:
        raise ConfigError("profile was built for a different potential")
    return AngleActionChart(V)
