"""Coupled oscillator chains: reduced Hamiltonian, breather construction,
symplectic integration and verification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P

from .action_angle import CONVENTIONS, ActionProfile, AngleActionChart, Potential, build_profile
from .errors import (CapsExceeded, ConfigError, Diverged, InversionDiverged, NoDiophantineXi, OutOfRange,
                     TruncationLossExceeded, UnstableStep)
from .kam import FourierTaylorHamiltonian, KAMConfig, KAMReport, run_iteration
from .nonresonance import (DiophantineParams, FrequencyVector, IndexBudget, check_diophantine, make_rng)
from .spectral import SiteWindow, TorusFunction, Truncation


# model

@dataclass(frozen=True)
class CouplingPotential:
    """Polynomial W(z) = sum_k coeffs[k] z^k with no terms below z^3."""

    coeffs: tuple

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if not any(coeffs):
            raise ConfigError("coupling potential must not vanish identically")
        object.__setattr__(self, "coeffs", coeffs)
        # W = O(|z|^3) at the origin, checked on samples
        z = np.array([1e-3, -1e-3, 1e-4, -1e-4])
        ratio = np.abs(self(z)) / np.abs(z) ** 3
        if np.any(ratio > 10 * (np.abs(np.array(coeffs)).sum() + 1)):
            raise ConfigError("coupling potential must be O(|z|^3) near 0")

    @classmethod
    def quartic(cls) -> "CouplingPotential":
        return cls((0.0, 0.0, 0.0, 0.0, 0.25))

    def __call__(self, z):
        return P.polyval(z, self.coeffs)

    def derivative(self, z, order: int = 1):
        return P.polyval(z, P.polyder(self.coeffs, order)) if order < len(self.coeffs) else np.zeros_like(z)

    def to_json(self) -> list:
        return list(self.coeffs)


@dataclass(frozen=True)
class Bond:
    """Term strength * W(x_{site + offset} - x_site) of the Hamiltonian."""

    site: int
    offset: int
    strength: float
    W: CouplingPotential


@dataclass
class LatticeModel:
    window: SiteWindow
    V: Potential
    bonds: list
    q_c: float | None = None
    R: float | None = None

    def __post_init__(self):
        kept = []
        for b in self.bonds:
            if b.offset == 0:
                raise ConfigError("a bond must join two different sites")
            # free boundary: bonds leaving the window are dropped
            if self.window.lo <= b.site <= self.window.hi and self.window.lo <= b.site + b.offset <= self.window.hi:
                kept.append(b)
        self.bonds = kept

    @classmethod
    def chain(cls, N: int, V: Potential, q_c: float, R: float, W: CouplingPotential | None = None):
        """Nearest-neighbour chain with strengths q_c exp(-R |n|) on sites -N..N."""
        W = W or CouplingPotential.quartic()
        bonds = [Bond(n, 1, q_c * math.exp(-R * abs(n)), W) for n in range(-N, N)]
        return cls(SiteWindow.symmetric(N), V, bonds, q_c, R)

    @classmethod
    def network(cls, N: int, V: Potential, strengths: dict, W=None):
        """Bonds keyed by (n, p); W is one coupling potential or a dict keyed like ``strengths``."""
        bonds = []
        for (n, p), eps in sorted(strengths.items()):
            Wnp = W.get((n, p), CouplingPotential.quartic()) if isinstance(W, dict) else (W or CouplingPotential.quartic())
            bonds.append(Bond(int(n), int(p), float(eps), Wnp))
        return cls(SiteWindow.symmetric(N), V, bonds)

    @property
    def size(self) -> int:
        return self.window.size

    @property
    def coupling_l1(self) -> float:
        return float(sum(abs(b.strength) for b in self.bonds))

    def with_strengths(self, scale: float) -> "LatticeModel":
        bonds = [Bond(b.site, b.offset, b.strength * scale, b.W) for b in self.bonds]
        return LatticeModel(self.window, self.V, bonds, None if self.q_c is None else self.q_c * scale, self.R)

    def _arrays(self):
        lo = self.window.lo
        a = np.array([b.site - lo for b in self.bonds], dtype=np.int64)
        c = np.array([b.site + b.offset - lo for b in self.bonds], dtype=np.int64)
        eps = np.array([b.strength for b in self.bonds], dtype=float)
        deg = max([len(b.W.coeffs) for b in self.bonds] + [1])
        wc = np.zeros((len(self.bonds), deg))
        for k, b in enumerate(self.bonds):
            wc[k, :len(b.W.coeffs)] = b.W.coeffs
        return a, c, eps, wc, np.asarray(self.V.poly, dtype=float)

    def forces(self, x) -> np.ndarray:
        a, c, eps, wc, vp = self._arrays()
        out = np.empty(self.size)
        _forces(np.asarray(x, dtype=float), a, c, eps, wc, vp, out)
        return out

    def energy(self, x, y) -> float:
        a, c, eps, wc, vp = self._arrays()
        return float(_energy(np.asarray(x, dtype=float), np.asarray(y, dtype=float), a, c, eps, wc, vp))

    def site_energies(self, x, y) -> np.ndarray:
        """Local energies with each bond split evenly between its two ends; x, y have shape (..., size)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = 0.5 * y ** 2 + self.V(x)
        lo = self.window.lo
        for b in self.bonds:
            i, j = b.site - lo, b.site + b.offset - lo
            e = 0.5 * b.strength * b.W(x[..., j] - x[..., i])
            out[..., i] += e
            out[..., j] += e
        return out

    def to_json(self) -> dict:
        return {"window": self.window.to_json(), "V": self.V.to_json(), "q_c": self.q_c, "R": self.R,
                "bonds": [{"n": b.site, "p": b.offset, "strength": b.strength, "W": b.W.to_json()}
                          for b in self.bonds],
                "coupling_l1": self.coupling_l1}

    @classmethod
    def from_json(cls, data) -> "LatticeModel":
        window = SiteWindow.from_json(data["window"])
        bonds = [Bond(int(b["n"]), int(b["p"]), float(b["strength"]), CouplingPotential(tuple(b["W"])))
                 for b in data["bonds"]]
        return cls(window, Potential.from_json(data["V"]), bonds, data.get("q_c"), data.get("R"))


def _polyval_scalar(coeffs, z):
    acc = 0.0
    for k in range(coeffs.size - 1, -1, -1):
        acc = acc * z + coeffs[k]
    return acc


def _polyder_scalar(coeffs, z):
    acc = 0.0
    for k in range(coeffs.size - 1, 0, -1):
        acc = acc * z + k * coeffs[k]
    return acc


_polyval_nb = njit(cache=False)(_polyval_scalar)
_polyder_nb = njit(cache=False)(_polyder_scalar)


@njit(cache=False)
def _forces(x, a, c, eps, wc, vp, out):
    for n in range(x.size):
        out[n] = -_polyder_nb(vp, x[n])
    for k in range(a.size):
        f = eps[k] * _polyder_nb(wc[k], x[c[k]] - x[a[k]])
        out[a[k]] += f
        out[c[k]] -= f


@njit(cache=False)
def _energy(x, y, a, c, eps, wc, vp):
    e = 0.0
    for n in range(x.size):
        e += 0.5 * y[n] * y[n] + _polyval_nb(vp, x[n])
    for k in range(a.size):
        e += eps[k] * _polyval_nb(wc[k], x[c[k]] - x[a[k]])
    return e


@njit(cache=False)
def _verlet(x, y, dt, nsteps, stride, a, c, eps, wc, vp, xs, ys, es, fail_drift):
    f = np.empty(x.size)
    _forces(x, a, c, eps, wc, vp, f)
    e0 = _energy(x, y, a, c, eps, wc, vp)
    scale = max(abs(e0), 1e-300)
    xs[0] = x
    ys[0] = y
    es[0] = e0
    rec = 1
    for step in range(1, nsteps + 1):
        for n in range(x.size):
            y[n] += 0.5 * dt * f[n]
            x[n] += dt * y[n]
        _forces(x, a, c, eps, wc, vp, f)
        for n in range(x.size):
            y[n] += 0.5 * dt * f[n]
        if step % stride == 0:
            xs[rec] = x
            ys[rec] = y
            es[rec] = _energy(x, y, a, c, eps, wc, vp)
            if not abs(es[rec] - e0) <= fail_drift * scale:
                return rec
            rec += 1
    return -1


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    energy: np.ndarray
    dt: float
    window: SiteWindow

    @property
    def energy_drift(self) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(abs(e0), 1e-300))

    def csv(self) -> str:
        header = ["t"] + [f"x_{s}" for s in self.window.sites]
        lines = [",".join(header)]
        for t, row in zip(self.times, self.x):
            lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
        return "\n".join(lines) + "\n"


def stability_bound(model: LatticeModel, amplitude: float) -> float:
    """2 / max local linear frequency over |x| <= amplitude."""
    xs = np.linspace(-amplitude, amplitude, 201)
    curv = float(np.max(np.abs(model.V.derivative(xs, 2))))
    for b in model.bonds:
        curv += 2.0 * abs(b.strength) * float(np.max(np.abs(b.W.derivative(2 * xs, 2))))
    return 2.0 / math.sqrt(max(curv, 1e-300))


UNSTABLE_DRIFT = 1e-3


def integrate_lattice(model: LatticeModel, initial, t_end: float, dt: float = 5e-4,
                      sample_dt: float | None = None) -> Trajectory:
    """Velocity Verlet for x'' = -dH/dx, states recorded every ``sample_dt``."""
    x0 = np.array(initial[0], dtype=float)
    y0 = np.array(initial[1], dtype=float)
    if x0.shape != (model.size,) or y0.shape != (model.size,):
        raise ConfigError("initial state must hold one (x, y) pair per site")
    if not (dt > 0 and t_end > 0):
        raise ConfigError("dt and t_end must be positive")
    e0 = model.energy(x0, y0)
    amp = max(float(np.max(np.abs(x0))), 1e-12)
    # amplitude bound from the total energy on the potential alone
    while float(np.min(model.V(np.array([amp, -amp])))) < abs(e0) and amp < 1e6:
        amp *= 1.25
    bound = stability_bound(model, amp)
    if dt >= bound:
        raise ConfigError(f"dt = {dt} violates the stability bound {bound:.4g}")
    sample_dt = dt if sample_dt is None else sample_dt
    stride = max(1, int(round(sample_dt / dt)))
    nsteps = int(round(t_end / dt))
    nsteps -= nsteps % stride
    nrec = nsteps // stride + 1
    xs = np.empty((nrec, model.size))
    ys = np.empty((nrec, model.size))
    es = np.empty(nrec)
    a, c, eps, wc, vp = model._arrays()
    failed = _verlet(x0, y0, dt, nsteps, stride, a, c, eps, wc, vp, xs, ys, es, UNSTABLE_DRIFT)
    if failed >= 0:
        raise UnstableStep(f"relative energy drift exceeded {UNSTABLE_DRIFT:g} at t = {failed * stride * dt:.6g}")
    times = np.arange(nrec) * (stride * dt)
    return Trajectory(times, xs, ys, es, dt, model.window)


# reduced Hamiltonian

def canonical_derivatives(profile: ActionProfile, xi):
    """(H0', H0'', H0''') in the canonical action at actions xi."""
    ratio = CONVENTIONS[profile.convention] / CONVENTIONS["canonical"]
    d1, d2, d3 = profile.H0_derivatives(np.asarray(xi, dtype=float) * ratio)
    return d1 * ratio, d2 * ratio ** 2, d3 * ratio ** 3


def canonical_action_of_energy(profile: ActionProfile, h):
    ratio = CONVENTIONS["canonical"] / CONVENTIONS[profile.convention]
    return profile.rho(h) * ratio


def site_expansion(chart: AngleActionChart, xi: float, grid: int, degree: int = 3, rel_width: float = 0.05,
                   nodes: int = 16) -> np.ndarray:
    """Taylor coefficients in I of x(theta, xi + I) on a uniform theta grid, shape (degree + 1, grid)."""
    theta = 2 * math.pi * np.arange(grid) / grid
    half = rel_width * xi
    t = np.cos(math.pi * (np.arange(nodes) + 0.5) / nodes)
    samples = np.array([chart.forward_orbit(chart.orbit(xi + half * tk), theta)[0] for tk in t])
    # Chebyshev fit in the action at every grid angle, then derivatives at the centre
    V = C.chebvander(t, nodes - 1)
    coef = np.linalg.solve(V, samples)
    out = np.empty((degree + 1, grid))
    for d in range(degree + 1):
        cd = C.chebder(coef, d, axis=0) if d else coef
        out[d] = C.chebval(0.0, cd) / (half ** d * math.factorial(d))
    return out


def _series_mul(p, q, degree):
    out = {}
    for (i1, j1), u in p.items():
        for (i2, j2), v in q.items():
            if i1 + i2 + j1 + j2 <= degree:
                key = (i1 + i2, j1 + j2)
                out[key] = out.get(key, 0.0) + u * v
    return out


def bond_series(W: CouplingPotential, Xa: np.ndarray, Xb: np.ndarray, degree: int = 3) -> dict:
    """Taylor coefficients of W(x_b - x_a) in (I_a, I_b) on the 2-D angle grid, keyed by (deg_a, deg_b)."""
    u0 = Xb[0][None, :] - Xa[0][:, None]
    delta = {}
    for d in range(1, degree + 1):
        delta[(d, 0)] = np.broadcast_to(-Xa[d][:, None], u0.shape)
        delta[(0, d)] = np.broadcast_to(Xb[d][None, :], u0.shape)
    out = {(0, 0): W(u0)}
    power = {(0, 0): np.ones_like(u0)}
    for k in range(1, degree + 1):
        power = _series_mul(power, delta, degree)
        wk = W.derivative(u0, k) / math.factorial(k)
        for key, val in power.items():
            out[key] = out.get(key, 0.0) + wk * val
    return out


def _project(values: np.ndarray, ka_col: int, kb_col: int, window: SiteWindow, caps: Truncation):
    """2-D grid values -> (torus function on the window, l1 mass outside the caps)."""
    M = values.shape[0]
    F = np.fft.fft2(values) / (M * M)
    k = np.fft.fftfreq(M, 1.0 / M).astype(np.int64)
    KA, KB = np.meshgrid(k, k, indexing="ij")
    ok = (np.abs(KA) <= caps.per_site) & (np.abs(KB) <= caps.per_site) & (np.abs(KA) + np.abs(KB) <= caps.total)
    tail = float(np.abs(F[~ok]).sum())
    idx = np.zeros((int(ok.sum()), window.size), dtype=np.int64)
    idx[:, ka_col] = KA[ok]
    idx[:, kb_col] = KB[ok]
    return TorusFunction(window, caps, idx, F[ok]).real_part(), tail


def build_reduced_hamiltonian(model: LatticeModel, profile: ActionProfile, xi, *, caps: Truncation = Truncation(8, 16),
                              sigma: float = 0.05, grid: int = 64, tail_rel: float = 1e-6,
                              chart: AngleActionChart | None = None) -> FourierTaylorHamiltonian:
    """sum_n H0(xi_n + I_n) to third order plus the coupling written in angle-action variables.

    ``xi`` is in the canonical action. Raises CapsExceeded when the Fourier
    mass of the coupling outside the caps exceeds ``tail_rel`` times its total.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.size,):
        raise ConfigError("xi must hold one action per site")
    lo_a, hi_a = profile.action_range
    ratio = CONVENTIONS[profile.convention] / CONVENTIONS["canonical"]
    if np.any(xi * ratio < lo_a) or np.any(xi * ratio > hi_a):
        raise OutOfRange("xi leaves the action range of the profile")
    window = model.window
    d1, d2, d3 = canonical_derivatives(profile, xi)
    const = {}
    for j in range(model.size):
        const[(j,)] = d1[j]
        const[(j, j)] = d2[j] / 2
        const[(j, j, j)] = d3[j] / 6
    blocks = {}
    if model.bonds:
        chart = chart or AngleActionChart(model.V)
        lo = window.lo
        sites = sorted({b.site - lo for b in model.bonds} | {b.site + b.offset - lo for b in model.bonds})
        X = {j: site_expansion(chart, float(xi[j]), grid) for j in sites}
        pieces = {}
        tail = total = 0.0
        for b in model.bonds:
            i, j = b.site - lo, b.site + b.offset - lo
            for (da, db), vals in bond_series(b.W, X[i], X[j]).items():
                f, t = _project(b.strength * vals, i, j, window, caps)
                tail += t
                total += f.norm(0.0) + t
                mono = tuple(sorted((i,) * da + (j,) * db))
                pieces.setdefault(mono, []).append(f)
        if tail > tail_rel * total:
            raise CapsExceeded(f"coupling mass {tail:.3e} outside the caps exceeds {tail_rel:g} x {total:.3e}")
        for mono, fs in pieces.items():
            f = fs[0]
            for g in fs[1:]:
                f = f + g
            if mono == ():
                # the constant is dynamically irrelevant
                f = f.oscillating()
            if not f.is_zero():
                blocks[mono] = f
    return FourierTaylorHamiltonian(window, caps, const, blocks, sigma)


# breather construction

@dataclass
class BreatherConfig:
    mode: str = "small"
    xi_large: float = 1.0
    xi_min: float = 1e-4
    varsigma: float = 4.0
    jitter: float = 0.1
    max_retries: int = 500
    seed: int = 0
    gamma: float = 1e-6
    mu: float = 2.0
    budget_l1: int = 4
    caps: Truncation = field(default_factory=lambda: Truncation(12, 24))
    grid: int = 64
    tail_rel: float = 1e-6
    kam: KAMConfig = field(default_factory=lambda: KAMConfig(sigma=0.05, target=1e-12, max_steps=6,
                                                             caps=Truncation(12, 24),
                                                             coef_floor=1e-17))

    def __post_init__(self):
        if self.mode not in ("large", "small", "mixed"):
            raise ConfigError(f"unknown amplitude mode {self.mode!r}")
        if not (self.xi_large > 0 and self.xi_min > 0 and self.jitter >= 0 and self.max_retries >= 1):
            raise ConfigError("xi_large, xi_min must be positive, jitter >= 0, max_retries >= 1")


def base_actions(window: SiteWindow, config: BreatherConfig) -> np.ndarray:
    """Unjittered actions for the large, small or mixed amplitude pattern."""
    small = np.maximum(config.xi_min, config.xi_large * window.brackets ** (-config.varsigma - 2.0))
    large = np.full(window.size, config.xi_large)
    if config.mode == "large":
        return large
    if config.mode == "small":
        return small
    return np.where(np.abs(window.sites) % 2 == 0, large, small)


@dataclass
class BreatherCertificate:
    xi: np.ndarray
    omega: FrequencyVector
    verdict: object
    report: KAMReport
    profile: ActionProfile
    phase: np.ndarray
    U: list
    Y: list
    x0: np.ndarray
    y0: np.ndarray
    attempts: int
    mode: str = "small"

    def torus_offsets(self, phases) -> tuple:
        """(U, Y) at the given final-coordinate angles, shape (T, size) each."""
        phases = np.atleast_2d(phases)
        n = self.xi.size
        U = np.zeros((phases.shape[0], n))
        Y = np.zeros((phases.shape[0], n))
        for j in range(n):
            if self.U[j] is not None:
                U[:, j] = self.U[j].evaluate(phases).real
            if self.Y[j] is not None:
                Y[:, j] = self.Y[j].evaluate(phases).real
        return U, Y

    def to_json(self) -> dict:
        return {"mode": self.mode, "xi": [float(v) for v in self.xi], "omega": self.omega.to_json(),
                "diophantine": self.verdict.to_json(), "attempts": self.attempts,
                "phase": [float(v) for v in self.phase],
                "x0": [float(v) for v in self.x0], "y0": [float(v) for v in self.y0],
                "kam": self.report.summary(),
                "torus_u": [None if f is None else f.to_json() for f in self.U],
                "torus_v": [None if f is None else f.to_json() for f in self.Y]}


def choose_actions(window: SiteWindow, profile: ActionProfile, config: BreatherConfig):
    """Jitter the base actions until omega(xi) passes the Diophantine check; returns (xi, omega, verdict, tries)."""
    base = base_actions(window, config)
    params = DiophantineParams(config.gamma, config.mu)
    budget = IndexBudget(config.budget_l1)
    rng = make_rng(config.seed, 1)
    lo_a, hi_a = profile.action_range
    ratio = CONVENTIONS[profile.convention] / CONVENTIONS["canonical"]
    for attempt in range(1, config.max_retries + 1):
        xi = base * (1.0 + config.jitter * rng.uniform(-1.0, 1.0, size=base.size))
        if np.any(xi * ratio <= lo_a) or np.any(xi * ratio >= hi_a):
            raise OutOfRange(f"actions {xi.min():.3g}..{xi.max():.3g} leave the profile range")
        omega = FrequencyVector(window, canonical_derivatives(profile, xi)[0])
        verdict = check_diophantine(omega, params, budget)
        if verdict.holds:
            return xi, omega, verdict, attempt
    raise NoDiophantineXi(f"no Diophantine frequency after {config.max_retries} jittered choices of xi")


def reduced_problem(model: LatticeModel, profile: ActionProfile, config: BreatherConfig):
    """Pick the actions and expand the lattice around them: (xi, omega, verdict, attempts, H, chart)."""
    xi, omega, verdict, attempts = choose_actions(model.window, profile, config)
    chart = AngleActionChart(model.V)
    H = build_reduced_hamiltonian(model, profile, xi, caps=config.caps, sigma=config.kam.sigma,
                                  grid=config.grid, tail_rel=config.tail_rel, chart=chart)
    return xi, omega, verdict, attempts, H, chart


def construct_breather(model: LatticeModel, profile: ActionProfile, config: BreatherConfig | None = None,
                       *, mode: str | None = None) -> BreatherCertificate:
    config = config or BreatherConfig()
    if mode is not None:
        config = BreatherConfig(**{**config.__dict__, "mode": mode})
    xi, omega, verdict, attempts, H, chart = reduced_problem(model, profile, config)
    try:
        report = run_iteration(H, omega, config.kam)
    except (InversionDiverged, TruncationLossExceeded) as exc:
        raise Diverged(f"KAM iteration failed: {exc}") from exc
    if not report.converged:
        raise Diverged(f"KAM iteration stopped at eps = {report.history[-1]['eps']:.3e} above the target "
                       f"{config.kam.target:.1e}")
    n = model.size
    U, Y = report.embedding if report.embedding is not None else ([None] * n, [None] * n)
    phase = np.zeros(n)
    cert = BreatherCertificate(xi, omega, verdict, report, profile, phase, list(U), list(Y),
                               np.zeros(n), np.zeros(n), attempts, config.mode)
    du, dy = cert.torus_offsets(phase)
    theta = phase + du[0]
    J = xi + dy[0]
    for j in range(n):
        x, y = chart.forward(theta[j], J[j])
        cert.x0[j] = float(x)
        cert.y0[j] = float(y)
    return cert


def lattice_profile(V: Potential, xi_max: float, xi_min: float, margin: float = 0.5,
                    nodes: int = 48) -> ActionProfile:
    """Canonical profile whose energy range covers actions in [xi_min (1 - margin), xi_max (1 + margin)]."""
    chart = AngleActionChart(V)
    h_lo = chart.energy(xi_min * (1 - margin))
    h_hi = chart.energy(xi_max * (1 + margin))
    return build_profile(V, (h_lo, h_hi), nodes, convention="canonical")


# verification

def spectral_peak(signal: np.ndarray, dt: float, pad: int = 4) -> float:
    """Angular frequency of the dominant peak: Hann window, zero padding, parabolic fit of log magnitude."""
    sig = np.asarray(signal, dtype=float)
    sig = sig - sig.mean()
    n = sig.size
    nfft = 1 << int(math.ceil(math.log2(n * pad)))
    mag = np.abs(np.fft.rfft(sig * np.hanning(n), nfft))
    k = int(np.argmax(mag[1:])) + 1
    if 1 <= k < mag.size - 1 and mag[k - 1] > 0 and mag[k + 1] > 0:
        a, b, c = np.log(mag[k - 1]), np.log(mag[k]), np.log(mag[k + 1])
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    else:
        shift = 0.0
    return 2 * math.pi * (k + shift) / (nfft * dt)


@dataclass
class VerificationReport:
    horizon: float
    dt: float
    energy_drift: float
    peaks: np.ndarray
    omega: np.ndarray
    peak_tolerance: float
    site_energy: np.ndarray
    decay_orders: float
    decay_rate: float | None
    torus_distance: float
    torus_tolerance: float
    localization_required: bool
    drift_tolerance: float = 1e-6
    min_decay_orders: float = 3.0

    @property
    def checks(self) -> dict:
        return {
            "energy_drift": self.energy_drift <= self.drift_tolerance,
            "frequency": bool(np.all(np.abs(self.peaks - self.omega) <= self.peak_tolerance)),
            "localization": (self.decay_orders >= self.min_decay_orders) or not self.localization_required,
            "torus_distance": self.torus_distance <= self.torus_tolerance,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> dict:
        return {"horizon": self.horizon, "dt": self.dt, "energy_drift": self.energy_drift,
                "peaks": [float(v) for v in self.peaks], "omega": [float(v) for v in self.omega],
                "peak_errors": [float(v) for v in np.abs(self.peaks - self.omega)],
                "peak_tolerance": self.peak_tolerance,
                "site_energy": [float(v) for v in self.site_energy], "decay_orders": self.decay_orders,
                "decay_rate": self.decay_rate, "torus_distance": self.torus_distance,
                "torus_tolerance": self.torus_tolerance, "localization_required": self.localization_required,
                "checks": self.checks, "passed": self.passed}


def verify_breather(cert: BreatherCertificate, model: LatticeModel, horizon: float = 1e4, *, dt: float = 5e-4,
                    sample_dt: float = 0.25, torus_samples: int = 256, torus_tolerance: float = 1e-5,
                    initial=None, localization_required: bool | None = None):
    """Integrate from the certificate's initial state and measure drift, peaks, localization, torus distance.

    Returns (report, trajectory). ``initial`` overrides the starting state
    (used for off-torus controls).
    """
    x0, y0 = (cert.x0, cert.y0) if initial is None else initial
    traj = integrate_lattice(model, (x0, y0), horizon, dt, sample_dt)
    step = traj.times[1] - traj.times[0]
    omega = cert.omega.values
    peaks = np.array([spectral_peak(traj.x[:, j], step) for j in range(model.size)])
    tol = max(5 * 2 * math.pi / horizon, 1e-4)
    energies = model.site_energies(traj.x, traj.y).mean(axis=0)
    centre = model.window.position(0) if model.window.lo <= 0 <= model.window.hi else model.size // 2
    edge = max(energies[0], energies[-1])
    orders = float(math.log10(energies[centre] / edge)) if edge > 0 else math.inf
    dist = np.abs(model.window.sites)
    rate = None
    mask = dist >= 1
    if np.unique(dist[mask]).size >= 2 and np.all(energies[mask] > 0):
        rate = float(-np.polyfit(dist[mask], np.log(energies[mask]), 1)[0])
    # action deviation from the predicted torus at sampled times
    picks = np.unique(np.linspace(0, traj.times.size - 1, torus_samples).astype(int))
    t = traj.times[picks]
    h = 0.5 * traj.y[picks] ** 2 + model.V(traj.x[picks])
    J = canonical_action_of_energy(cert.profile, h)
    _, Y = cert.torus_offsets(cert.phase[None, :] + np.outer(t, omega))
    torus = float(np.max(np.abs(J - cert.xi - Y) / cert.xi))
    if localization_required is None:
        # only the small-amplitude pattern has a decaying tail
        localization_required = cert.mode == "small"
    report = VerificationReport(horizon, dt, traj.energy_drift, peaks, omega, tol, energies, orders, rate,
                                torus, torus_tolerance, bool(localization_required))
    return report, traj
