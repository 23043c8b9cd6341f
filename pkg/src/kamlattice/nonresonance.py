"""Diophantine checks on finite index budgets, frequency sampling, and control functions.

Everything doubly exponential is handled through logarithms so the control
calculus never overflows.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import BudgetOverflow, ConfigError, ExhaustedRetries, OutOfRange, ZeroIndex
from .spectral import MultiIndex, SiteWindow


@dataclass(frozen=True)
class FrequencyVector:
    window: SiteWindow
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        if values.shape != (self.window.size,):
            raise ConfigError("frequency vector length does not match the window")
        if not np.all(np.isfinite(values)):
            raise ConfigError("frequency components must be finite")
        if not np.any(values != 0):
            raise ConfigError("frequency vector must have a nonzero component")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.window.size

    def to_json(self) -> dict:
        return {"window": self.window.to_json(), "values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, data) -> "FrequencyVector":
        return cls(SiteWindow.from_json(data["window"]), np.asarray(data["values"], dtype=float))


@dataclass(frozen=True)
class DiophantineParams:
    """``strict`` enforces 0 < gamma < 1 and mu > 1; tests and measure scans may relax it."""

    gamma: float
    mu: float
    strict: bool = True

    def __post_init__(self):
        if self.strict:
            if not 0 < self.gamma < 1:
                raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
            if not self.mu > 1:
                raise ConfigError(f"mu must exceed 1, got {self.mu}")
        elif self.gamma < 0 or self.mu <= 0:
            raise ConfigError("gamma must be >= 0 and mu > 0")


@dataclass(frozen=True)
class IndexBudget:
    """All nonzero l with |l|_1 <= max_l1 and |l_j| <= per_site."""

    max_l1: int
    per_site: int | None = None
    count_cap: int = 2_000_000

    def __post_init__(self):
        if self.max_l1 < 1:
            raise ConfigError("budget max_l1 must be >= 1")
        if self.per_site is not None and self.per_site < 1:
            raise ConfigError("budget per_site must be >= 1")

    @property
    def site_cap(self) -> int:
        return self.max_l1 if self.per_site is None else min(self.per_site, self.max_l1)

    def to_json(self) -> dict:
        return {"max_l1": self.max_l1, "per_site": self.site_cap}


def bourgain_bound(l: MultiIndex, params: DiophantineParams) -> float:
    """gamma * prod_j 1 / (1 + |l_j|^mu <j>^mu)."""
    if l.is_zero():
        raise ZeroIndex("the Diophantine bound is undefined for l = 0")
    out = params.gamma
    for site, value in l.entries:
        out /= 1.0 + (abs(value) * max(1, abs(site))) ** params.mu
    return out


def _bounds(idx: np.ndarray, window: SiteWindow, params: DiophantineParams) -> np.ndarray:
    factors = 1.0 + (np.abs(idx) * window.brackets) ** params.mu
    return params.gamma / np.prod(factors, axis=1)


def count_indices(size: int, budget: IndexBudget) -> int:
    """Number of nonzero l (up to sign) inside the budget, by polynomial counting."""
    per_site = np.zeros(budget.max_l1 + 1, dtype=object)
    per_site[0] = 1
    per_site[1:budget.site_cap + 1] = 2
    poly = np.zeros(budget.max_l1 + 1, dtype=object)
    poly[0] = 1
    for _ in range(size):
        poly = np.convolve(poly, per_site)[:budget.max_l1 + 1]
    return int((sum(poly) - 1) // 2)


@lru_cache(maxsize=32)
def _enumerate_cached(size: int, lo: int, max_l1: int, site_cap: int) -> np.ndarray:
    rows = []

    def fill(pos, remaining, prefix, started):
        if pos == size:
            if started and remaining == 0:
                rows.append(tuple(prefix))
            return
        left = size - pos - 1
        for v in range(-min(site_cap, remaining), min(site_cap, remaining) + 1):
            if not started and v < 0:
                continue
            if remaining - abs(v) > left * site_cap:
                continue
            prefix.append(v)
            fill(pos + 1, remaining - abs(v), prefix, started or v != 0)
            prefix.pop()

    for total in range(1, max_l1 + 1):
        block = []
        rows_before = len(rows)
        fill(0, total, [], False)
        block = rows[rows_before:]
        # order within a shell by the site-sorted (site, value) entry list
        block.sort(key=lambda r: tuple((lo + k, v) for k, v in enumerate(r) if v != 0))
        rows[rows_before:] = block
    out = np.array(rows, dtype=np.int64).reshape(-1, size)
    out.setflags(write=False)
    return out


def enumerate_indices(window: SiteWindow, budget: IndexBudget) -> np.ndarray:
    """Nonzero indices in the budget, one per +/- pair (first nonzero entry positive),
    ordered by |l|_1 and then by site-sorted entries."""
    n = count_indices(window.size, budget)
    if n > budget.count_cap:
        raise BudgetOverflow(f"budget enumerates {n} indices, above the cap {budget.count_cap}")
    return _enumerate_cached(window.size, window.lo, budget.max_l1, budget.site_cap)


@dataclass(frozen=True)
class Holds:
    worst_ratio: float
    argmin: MultiIndex
    budget: IndexBudget
    checked: int

    holds = True

    def to_json(self) -> dict:
        return {"verdict": "holds", "worst_ratio": self.worst_ratio, "argmin": str(self.argmin),
                "budget": self.budget.to_json(), "checked": self.checked}


@dataclass(frozen=True)
class Violated:
    index: MultiIndex
    pairing: float
    bound: float
    budget: IndexBudget

    holds = False

    def to_json(self) -> dict:
        return {"verdict": "violated", "index": str(self.index), "pairing": self.pairing,
                "bound": self.bound, "budget": self.budget.to_json()}


def check_diophantine(omega: FrequencyVector, params: DiophantineParams, budget: IndexBudget):
    """Holds carries the smallest |omega.l| / bound over the budget; Violated carries the worst index."""
    idx = enumerate_indices(omega.window, budget)
    pairing = np.abs(idx @ omega.values)
    bound = _bounds(idx, omega.window, params)
    with np.errstate(divide="ignore"):
        ratio = pairing / bound
    k = int(np.argmin(ratio))
    index = MultiIndex.from_dense(omega.window, idx[k])
    if pairing[k] <= bound[k]:
        return Violated(index, float(pairing[k]), float(bound[k]), budget)
    return Holds(float(ratio[k]), index, budget, int(idx.shape[0]))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator; extra integers select an independent substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def sample_frequency(window: SiteWindow, params: DiophantineParams, budget: IndexBudget, seed: int,
                     *, max_retries: int = 1000) -> FrequencyVector:
    rng = make_rng(seed)
    for _ in range(max_retries):
        omega = FrequencyVector(window, rng.uniform(1.0, 2.0, size=window.size))
        if check_diophantine(omega, params, budget).holds:
            return omega
    raise ExhaustedRetries(f"no Diophantine frequency found in {max_retries} draws")


@dataclass(frozen=True)
class MeasureEstimate:
    fraction: float
    ci95: float
    samples: int
    violations: int


_CHUNK = 1024


def estimate_resonant_measure(window: SiteWindow, params: DiophantineParams, budget: IndexBudget,
                              samples: int, seed: int, *, threads: int = 1) -> MeasureEstimate:
    """Monte-Carlo share of [1,2]^window violating the condition inside the budget.

    Chunk c always draws from substream (seed, c), so the result does not
    depend on the thread count and different gammas share the same samples.
    """
    if samples < 100:
        raise ConfigError("at least 100 samples are required")
    idx = enumerate_indices(window, budget).T.astype(float)
    bound = _bounds(idx.T.astype(np.int64), window, params)

    def run(chunk: int) -> int:
        n = min(_CHUNK, samples - chunk * _CHUNK)
        omegas = make_rng(seed, chunk).uniform(1.0, 2.0, size=(n, window.size))
        return int(np.count_nonzero(np.any(np.abs(omegas @ idx) <= bound, axis=1)))

    chunks = range((samples + _CHUNK - 1) // _CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(run, chunks))
    else:
        counts = [run(c) for c in chunks]
    bad = sum(counts)
    p = bad / samples
    return MeasureEstimate(p, 1.96 * math.sqrt(p * (1 - p) / samples), samples, bad)


# control functions

CONTROL_KINDS = ("diophantine-exp", "double-exp", "log-iterated", "tabulated")


@dataclass(frozen=True)
class ControlFunction:
    """Decreasing loss function E(rho) for the weak homological estimate.

    diophantine-exp: E = exp(tau / rho) - 1             (param ``tau``)
    double-exp:      E = exp(exp(rho^-lam))             (param ``lam``)
    log-iterated:    E = sup_{x>=1} R(x) exp(-rho x) with
                     R(x) = exp(x / (log(e+x) loglog(e^2+x)^(1+lam)))   (params ``depth``, ``lam``)
    tabulated:       log-log interpolation of ``rho``/``values`` samples
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise ConfigError(f"unknown control kind {self.kind!r}")
        p = self.params
        if self.kind == "diophantine-exp" and not p.get("tau", 0) > 0:
            raise ConfigError("diophantine-exp needs tau > 0")
        if self.kind == "double-exp" and not 0 < p.get("lam", 0):
            raise ConfigError("double-exp needs lam > 0")
        if self.kind == "log-iterated":
            if int(p.get("depth", 2)) != 2:
                raise ConfigError("log-iterated control is implemented for depth 2 only")
            if not p.get("lam", 0) > 0:
                raise ConfigError("log-iterated needs lam > 0")
        if self.kind == "tabulated":
            rho = np.asarray(p.get("rho", []), dtype=float)
            val = np.asarray(p.get("values", []), dtype=float)
            if rho.size < 2 or rho.shape != val.shape or np.any(rho <= 0) or np.any(val <= 0):
                raise ConfigError("tabulated control needs matching positive rho/values arrays")
            order = np.argsort(rho)
            if np.any(np.diff(rho[order]) <= 0) or np.any(np.diff(val[order]) >= 0):
                raise ConfigError("tabulated control must be strictly decreasing in rho")

    def log_infimum(self) -> float:
        if self.kind == "double-exp":
            return 1.0
        if self.kind == "tabulated":
            return float(np.log(np.min(self.params["values"])))
        return -math.inf

    def log_eval(self, rho: float) -> float:
        if not rho > 0:
            raise OutOfRange(f"control functions need rho > 0, got {rho}")
        p = self.params
        if self.kind == "diophantine-exp":
            z = p["tau"] / rho
            return z + math.log(-math.expm1(-z))
        if self.kind == "double-exp":
            z = rho ** -p["lam"]
            return math.exp(z) if z < 709 else math.inf
        if self.kind == "log-iterated":
            return _log_iterated(rho, p["lam"])
        rho_tab = np.log(np.asarray(p["rho"], dtype=float))
        val_tab = np.log(np.asarray(p["values"], dtype=float))
        order = np.argsort(rho_tab)
        return float(np.interp(math.log(rho), rho_tab[order], val_tab[order]))


def _log_growth(s, lam):
    # log R(x) at x = e^s
    x = np.exp(s)
    return x / (np.log(math.e + x) * np.log(np.log(math.e ** 2 + x)) ** (1 + lam))


def _log_iterated(rho: float, lam: float) -> float:
    s_hi = max(5.0, 2.0 * math.log(2.0 / rho) + 2.0 / rho ** 0.5)
    grid = np.linspace(0.0, s_hi, 4001)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = _log_growth(grid, lam) - rho * np.exp(grid)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    if hi > lo:
        res = minimize_scalar(lambda s: -(_log_growth(s, lam) - rho * math.exp(s)), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-12})
        return float(max(vals[k], -res.fun))
    return float(vals[k])


def eval_control(E: ControlFunction, rho: float) -> float:
    """E(rho); may be inf for doubly exponential kinds, use ``E.log_eval`` then."""
    lv = E.log_eval(rho)
    return math.exp(lv) if lv < 709 else math.inf


def inv_control_log(E: ControlFunction, log_t: float, *, rtol: float = 1e-15) -> float:
    """rho with log E(rho) = log_t, by bisection in log rho down to float resolution."""
    if not log_t > E.log_infimum():
        raise OutOfRange(f"log t = {log_t} is not above log inf E = {E.log_infimum()}")
    if E.kind == "tabulated":
        rho = np.asarray(E.params["rho"], dtype=float)
        val = np.asarray(E.params["values"], dtype=float)
        lo_r, hi_r = float(rho.min()), float(rho.max())
        if log_t >= math.log(val.max()):
            return lo_r
        if log_t <= math.log(val.min()):
            return hi_r
    else:
        lo_r, hi_r = 1.0, 1.0
        while E.log_eval(lo_r) < log_t:
            lo_r *= 0.5
            if lo_r < 1e-300:
                raise OutOfRange("inverse below representable rho")
        while E.log_eval(hi_r) > log_t:
            hi_r *= 2.0
            if hi_r > 1e300:
                raise OutOfRange("inverse above representable rho")
    a, b = math.log(lo_r), math.log(hi_r)
    while b - a > rtol:
        m = 0.5 * (a + b)
        if m in (a, b):
            break
        if E.log_eval(math.exp(m)) > log_t:
            a = m
        else:
            b = m
    return math.exp(0.5 * (a + b))


def inv_control(E: ControlFunction, t: float) -> float:
    if not t > 0:
        raise OutOfRange("control inverse needs t > 0")
    return inv_control_log(E, math.log(t))


@dataclass(frozen=True)
class Summability:
    sum_delta: float
    sum_inv: float
    converged: bool
    excluded: int
    delta_decay: float
    inv_decay: float


def _tail_ok(terms: np.ndarray) -> tuple[bool, float]:
    terms = terms[terms > 0]
    if terms.size < 8:
        return False, math.nan
    q = terms[-max(4, terms.size // 4):]
    ratio_ok = bool(np.all(q[1:] / q[:-1] < 1.0))
    half = terms[terms.size // 2:]
    m = np.arange(terms.size - half.size, terms.size) + 1.0
    slope = -np.polyfit(np.log(m), np.log(half), 1)[0]
    return ratio_ok, float(slope)


def summability_check(E: ControlFunction, delta: Callable[[int], float], terms: int) -> Summability:
    """Partial sums of delta_m and E^-1(exp(2^m delta_m)).

    Terms with exp(2^m delta_m) not above inf E are skipped and counted.
    A series counts as convergent when its terms decrease over the last
    quartile and their fitted power-law decay exponent exceeds 1.
    """
    if terms < 10:
        raise ConfigError("summability_check needs at least 10 terms")
    d = np.array([float(delta(m)) for m in range(terms)])
    inv = np.zeros(terms)
    excluded = 0
    for m in range(terms):
        log_t = math.ldexp(d[m], m) if m < 1000 else math.inf
        if not log_t > E.log_infimum():
            excluded += 1
            continue
        inv[m] = inv_control_log(E, log_t)
    ok_d, slope_d = _tail_ok(d)
    kept = inv[inv > 0]
    ok_i, slope_i = _tail_ok(kept)
    converged = ok_d and ok_i and slope_d > 1 and slope_i > 1
    return Summability(float(d.sum()), float(inv.sum()), converged, excluded, slope_d, slope_i)


@dataclass(frozen=True)
class ExponentBoundReport:
    log_exponent_max: float
    log_exponent_bound: float
    holds: bool
    argmax_log_x: float


def _log_varpi(s, lam, rho):
    with np.errstate(invalid="ignore", divide="ignore"):
        return s + np.log(np.log1p(np.exp(s)) ** (-1.0 - lam) - rho)


def lambdapiao_bound(lam: float, rho: float, lambda_tilde: float) -> ExponentBoundReport:
    """Compare sup_{x>=1} x/log(1+x)^(1+lam) - rho x with exp(rho^-lambda_tilde) in log-log form.

    The supremum is located on a grid in s = log x and refined by golden
    section. When the supremum is not positive the bound holds trivially.
    """
    if not lam > 0 or not 0 < rho <= 0.1 or not 0 < lambda_tilde < 1:
        raise ConfigError("need lam > 0, 0 < rho <= 0.1 and 0 < lambda_tilde < 1")
    # beyond s_zero the bracket is negative
    s_zero = math.log(math.expm1(rho ** (-1.0 / (1.0 + lam))))
    grid = np.linspace(0.0, s_zero, 20001)[:-1]
    vals = _log_varpi(grid, lam, rho)
    k = int(np.nanargmax(vals))
    best_s, best = float(grid[k]), float(vals[k])
    if 0 < k < grid.size - 1:
        res = minimize_scalar(lambda s: -float(_log_varpi(s, lam, rho)),
                              bracket=(grid[k - 1], grid[k], grid[k + 1]), method="golden",
                              options={"xtol": 1e-14})
        if -res.fun > best:
            best_s, best = float(res.x), float(-res.fun)
    bound = rho ** -lambda_tilde
    return ExponentBoundReport(best, bound, bool(best <= bound), best_s)
