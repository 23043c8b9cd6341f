"""Sparse Fourier algebra on a finite window of the thickened torus.

A torus function is stored as an integer index matrix (one row per mode,
one column per active site) and a matching complex coefficient vector. Rows
are kept in a canonical lexicographic order so that sums, norms and JSON
output are reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, NonZeroAverage, ResonantDivisor, TruncationLossExceeded

DROP_REL = 1e-16


@dataclass(frozen=True)
class SiteWindow:
    """Contiguous block of lattice sites ``lo..hi`` with spatial weight exponent ``eta``."""

    lo: int
    hi: int
    eta: float = 2.0

    def __post_init__(self):
        if self.hi < self.lo:
            raise ConfigError(f"empty site window [{self.lo}, {self.hi}]")
        if not self.eta >= 2:
            raise ConfigError(f"eta must be >= 2, got {self.eta}")

    @classmethod
    def symmetric(cls, n: int, eta: float = 2.0) -> "SiteWindow":
        if n < 0:
            raise ConfigError("window half-width must be >= 0")
        return cls(-n, n, eta)

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def brackets(self) -> np.ndarray:
        return np.maximum(1, np.abs(self.sites)).astype(float)

    @property
    def weights(self) -> np.ndarray:
        """Per-site factors <j>^eta entering |l|_eta."""
        return self.brackets ** self.eta

    def position(self, site: int) -> int:
        if not self.lo <= site <= self.hi:
            raise ConfigError(f"site {site} outside window [{self.lo}, {self.hi}]")
        return site - self.lo

    def to_json(self) -> dict:
        if self.lo == -self.hi:
            return {"n": self.hi, "eta": self.eta}
        return {"lo": self.lo, "hi": self.hi, "eta": self.eta}

    @classmethod
    def from_json(cls, data: Mapping) -> "SiteWindow":
        eta = float(data.get("eta", 2.0))
        if "n" in data:
            return cls.symmetric(int(data["n"]), eta)
        return cls(int(data["lo"]), int(data["hi"]), eta)


@dataclass(frozen=True)
class MultiIndex:
    """Finite-support integer vector, stored as sorted ``(site, value)`` pairs."""

    entries: tuple = ()

    def __post_init__(self):
        entries = tuple((int(s), int(v)) for s, v in self.entries)
        sites = [s for s, _ in entries]
        if sites != sorted(set(sites)):
            raise ConfigError(f"multi-index entries must have strictly increasing sites: {entries}")
        if any(v == 0 for _, v in entries):
            raise ConfigError("multi-index entries must be nonzero")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, int]) -> "MultiIndex":
        return cls(tuple(sorted((s, v) for s, v in mapping.items() if v != 0)))

    @classmethod
    def from_dense(cls, window: SiteWindow, vector) -> "MultiIndex":
        return cls(tuple((int(window.lo + k), int(v)) for k, v in enumerate(vector) if v != 0))

    def to_dense(self, window: SiteWindow) -> np.ndarray:
        out = np.zeros(window.size, dtype=np.int64)
        for s, v in self.entries:
            out[window.position(s)] = v
        return out

    @property
    def l1(self) -> int:
        return sum(abs(v) for _, v in self.entries)

    def eta_norm(self, eta: float) -> float:
        return float(sum(max(1, abs(s)) ** eta * abs(v) for s, v in self.entries))

    def is_zero(self) -> bool:
        return not self.entries

    def __neg__(self) -> "MultiIndex":
        return MultiIndex(tuple((s, -v) for s, v in self.entries))

    def __str__(self) -> str:
        return "{" + ", ".join(f"{s}:{v}" for s, v in self.entries) + "}"


@dataclass(frozen=True)
class Truncation:
    """Per-site order cap ``per_site`` and total order cap ``total`` on retained modes."""

    per_site: int = 8
    total: int = 16

    def __post_init__(self):
        if self.per_site < 0 or self.total < 0:
            raise ConfigError("truncation caps must be nonnegative")


@dataclass(frozen=True)
class ActionVector:
    window: SiteWindow
    values: np.ndarray
    varsigma: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.window.size,):
            raise ConfigError("action vector length does not match the window")
        if not self.varsigma > 0:
            raise ConfigError("varsigma must be positive")
        object.__setattr__(self, "values", values)

    def weighted_norm(self) -> float:
        """sum_j |y_j| <j>^varsigma"""
        return float(np.sum(np.abs(self.values) * self.window.brackets ** self.varsigma))


def _frequency_array(omega) -> np.ndarray:
    values = getattr(omega, "values", omega)
    return np.asarray(values, dtype=float)


def _canonical(idx: np.ndarray, coef: np.ndarray, caps: Truncation, drop_rel: float):
    """Aggregate duplicate rows, apply caps, prune tiny terms, sort rows.

    Returns the cleaned arrays plus the l1 mass removed by the caps.
    """
    if idx.shape[0] == 0:
        return idx, coef, 0.0
    width = idx.shape[1]
    absidx = np.abs(idx)
    cap_ok = (absidx.max(axis=1, initial=0) <= caps.per_site) & (absidx.sum(axis=1) <= caps.total)
    if not cap_ok.all():
        lost = float(np.abs(coef[~cap_ok]).sum())
        idx, coef = idx[cap_ok], coef[cap_ok]
    else:
        lost = 0.0
    if idx.shape[0] == 0:
        return idx, coef, lost
    radix = 2 * caps.per_site + 1
    if width == 0:
        order = np.zeros(idx.shape[0], dtype=np.int64)
        keys = None
    elif width * math.log2(radix) < 62:
        # one mixed-radix integer per row sorts in the same order as lexsort
        place = radix ** np.arange(width - 1, -1, -1, dtype=np.int64)
        keys = (idx + caps.per_site) @ place
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
    else:
        order = np.lexsort(idx.T[::-1])
        keys = None
    idx, coef = idx[order], coef[order]
    if idx.shape[0] > 1:
        fresh = np.empty(idx.shape[0], dtype=bool)
        fresh[0] = True
        if keys is not None:
            np.not_equal(keys[1:], keys[:-1], out=fresh[1:])
        else:
            np.any(idx[1:] != idx[:-1], axis=1, out=fresh[1:])
        starts = np.flatnonzero(fresh)
        if starts.size != idx.shape[0]:
            coef = np.add.reduceat(coef, starts)
            idx = idx[starts]
    mag = np.abs(coef)
    top = mag.max() if mag.size else 0.0
    keep = (mag > drop_rel * top) & (mag > 0)
    if not keep.all():
        idx, coef = idx[keep], coef[keep]
    return idx, coef, lost


class TorusFunction:
    """Truncated analytic function sum_l c_l exp(i <l, x>) on a site window.

    Instances are immutable. ``lost`` records the l1 mass removed by the
    truncation caps in the operation that produced the instance.
    """

    __slots__ = ("window", "caps", "idx", "coef", "lost", "drop_rel")

    def __init__(self, window: SiteWindow, caps: Truncation, idx, coef, *, lost: float = 0.0,
                 drop_rel: float = DROP_REL, canonical: bool = False):
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, window.size)
        coef = np.asarray(coef, dtype=complex).reshape(-1)
        if idx.shape[0] != coef.shape[0]:
            raise ConfigError("index rows and coefficients differ in length")
        if not canonical:
            idx, coef, cap_lost = _canonical(idx, coef, caps, drop_rel)
            lost = lost + cap_lost
        idx.setflags(write=False)
        coef.setflags(write=False)
        self.window = window
        self.caps = caps
        self.idx = idx
        self.coef = coef
        self.lost = float(lost)
        self.drop_rel = drop_rel

    # construction helpers

    @classmethod
    def zero(cls, window: SiteWindow, caps: Truncation) -> "TorusFunction":
        return cls(window, caps, np.zeros((0, window.size), dtype=np.int64), np.zeros(0, dtype=complex),
                   canonical=True)

    @classmethod
    def constant(cls, window: SiteWindow, caps: Truncation, value: complex) -> "TorusFunction":
        return cls(window, caps, np.zeros((1, window.size), dtype=np.int64), [value])

    @classmethod
    def from_terms(cls, window: SiteWindow, caps: Truncation, terms) -> "TorusFunction":
        """Build from ``{key: coefficient}`` where a key is a MultiIndex, a ``{site: value}`` mapping
        or a dense integer sequence over the window."""
        items = terms.items() if isinstance(terms, Mapping) else terms
        rows, coefs = [], []
        for key, c in items:
            if isinstance(key, MultiIndex):
                rows.append(key.to_dense(window))
            elif isinstance(key, Mapping):
                rows.append(MultiIndex.from_mapping(key).to_dense(window))
            else:
                rows.append(np.asarray(key, dtype=np.int64))
            coefs.append(complex(c))
        idx = np.array(rows, dtype=np.int64).reshape(-1, window.size)
        return cls(window, caps, idx, np.array(coefs, dtype=complex))

    def _like(self, idx, coef, *, lost=0.0, canonical=False) -> "TorusFunction":
        return TorusFunction(self.window, self.caps, idx, coef, lost=lost, drop_rel=self.drop_rel,
                             canonical=canonical)

    def with_caps(self, caps: Truncation) -> "TorusFunction":
        return TorusFunction(self.window, caps, self.idx, self.coef, drop_rel=self.drop_rel)

    # inspection

    @property
    def nterms(self) -> int:
        return self.coef.shape[0]

    def is_zero(self) -> bool:
        return self.coef.shape[0] == 0

    def items(self) -> Iterable[tuple[MultiIndex, complex]]:
        for row, c in zip(self.idx, self.coef):
            yield MultiIndex.from_dense(self.window, row), complex(c)

    def coeff(self, key) -> complex:
        row = key.to_dense(self.window) if isinstance(key, MultiIndex) else np.asarray(key, dtype=np.int64)
        hit = np.flatnonzero(np.all(self.idx == row, axis=1))
        return complex(self.coef[hit[0]]) if hit.size else 0j

    def average(self) -> complex:
        hit = np.flatnonzero(~np.any(self.idx, axis=1))
        return complex(self.coef[hit[0]]) if hit.size else 0j

    def eta_lengths(self) -> np.ndarray:
        return np.abs(self.idx) @ self.window.weights

    def norm(self, sigma: float = 0.0) -> float:
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.is_zero():
            return 0.0
        return float(np.sum(np.abs(self.coef) * np.exp(sigma * self.eta_lengths())))

    def max_abs(self) -> float:
        return float(np.abs(self.coef).max()) if self.nterms else 0.0

    def support_sites(self) -> np.ndarray:
        if self.is_zero():
            return np.zeros(0, dtype=np.int64)
        return self.window.sites[np.any(self.idx != 0, axis=0)]

    def reality_defect(self) -> float:
        """max |c(l) - conj(c(-l))|, zero for real-valued functions."""
        diff = self - self.conjugate()
        return diff.max_abs()

    # algebra

    def __neg__(self) -> "TorusFunction":
        return self._like(self.idx, -self.coef, canonical=True)

    def __add__(self, other) -> "TorusFunction":
        if isinstance(other, TorusFunction):
            self._check_compatible(other)
            if other.is_zero():
                return self
            if self.is_zero():
                return other
            return self._like(np.vstack([self.idx, other.idx]), np.concatenate([self.coef, other.coef]))
        return self.add_constant(other)

    __radd__ = __add__

    def __sub__(self, other) -> "TorusFunction":
        return self + (-other)

    def __rsub__(self, other) -> "TorusFunction":
        return (-self) + other

    def __mul__(self, other) -> "TorusFunction":
        if isinstance(other, TorusFunction):
            return multiply(self, other)
        return self.scale(other)

    __rmul__ = __mul__

    def scale(self, factor: complex) -> "TorusFunction":
        if factor == 0:
            return TorusFunction.zero(self.window, self.caps)
        return self._like(self.idx, self.coef * factor, canonical=True)

    def add_constant(self, value: complex) -> "TorusFunction":
        if value == 0:
            return self
        # only the zero mode changes, so small oscillating terms survive a large constant
        nz = self.idx != 0
        has = nz.any(axis=1)
        if (~has).any():
            k = int(np.flatnonzero(~has)[0])
            coef = self.coef.copy()
            coef[k] += value
            if coef[k] == 0:
                return self._like(np.delete(self.idx, k, axis=0), np.delete(coef, k), canonical=True)
            return self._like(self.idx, coef, canonical=True)
        first = self.idx[np.arange(self.nterms), np.argmax(nz, axis=1)]
        k = int(np.count_nonzero(first < 0))
        idx = np.insert(self.idx, k, 0, axis=0)
        coef = np.insert(self.coef, k, complex(value))
        return self._like(idx, coef, canonical=True)

    def prune_below(self, threshold: float) -> "TorusFunction":
        """Copy without coefficients of magnitude below ``threshold``."""
        keep = np.abs(self.coef) >= threshold
        if keep.all():
            return self
        return self._like(self.idx[keep], self.coef[keep], canonical=True)

    def oscillating(self) -> "TorusFunction":
        """Copy with the zero mode removed."""
        keep = np.any(self.idx, axis=1)
        return self._like(self.idx[keep], self.coef[keep], canonical=True)

    def conjugate(self) -> "TorusFunction":
        """Complex conjugate function: c(l) -> conj(c(-l))."""
        return self._like(-self.idx, np.conj(self.coef))

    def real_part(self) -> "TorusFunction":
        """Projection onto real-valued functions (Hermitian coefficient symmetry)."""
        return (self + self.conjugate()).scale(0.5)

    def derivative(self, site: int) -> "TorusFunction":
        return partial_derivative(self, site)

    def directional_derivative(self, omega) -> "TorusFunction":
        """omega . grad u, the left side of the homological equation."""
        w = _frequency_array(omega)
        return self._like(self.idx, self.coef * (1j * (self.idx @ w)))

    def evaluate(self, points) -> np.ndarray:
        """Values at real or complex points; ``points`` has shape (..., window.size)."""
        pts = np.asarray(points)
        flat = pts.reshape(-1, self.window.size)
        if self.is_zero():
            return np.zeros(flat.shape[0], dtype=complex).reshape(pts.shape[:-1])
        phases = np.exp(1j * (flat @ self.idx.T))
        return (phases @ self.coef).reshape(pts.shape[:-1])

    def _check_compatible(self, other: "TorusFunction"):
        if other.window != self.window:
            raise ConfigError("torus functions live on different site windows")

    # serialization

    def to_json(self) -> dict:
        coeffs = []
        for row, c in zip(self.idx, self.coef):
            entries = [[int(self.window.lo + k), int(v)] for k, v in enumerate(row) if v != 0]
            coeffs.append({"idx": entries, "re": float(c.real), "im": float(c.imag)})
        return {"window": self.window.to_json(), "coeffs": coeffs}

    @classmethod
    def from_json(cls, data: Mapping, caps: Truncation | None = None) -> "TorusFunction":
        window = SiteWindow.from_json(data["window"])
        terms = []
        for item in data["coeffs"]:
            key = MultiIndex(tuple(tuple(e) for e in item["idx"]))
            terms.append((key, complex(item["re"], item.get("im", 0.0))))
        if caps is None:
            per_site = max((abs(v) for key, _ in terms for _, v in key.entries), default=0)
            total = max((key.l1 for key, _ in terms), default=0)
            caps = Truncation(per_site, total)
        return cls.from_terms(window, caps, terms)

    def __repr__(self) -> str:
        return f"TorusFunction(window=[{self.window.lo},{self.window.hi}], terms={self.nterms})"


def norm_sigma(u: TorusFunction, sigma: float) -> float:
    """Weighted norm sum_l |u_l| exp(sigma |l|_eta)."""
    return u.norm(sigma)


def average(u: TorusFunction) -> complex:
    """Torus average, the coefficient of the zero mode."""
    return u.average()


def partial_derivative(u: TorusFunction, site: int) -> TorusFunction:
    col = u.window.position(site)
    factor = 1j * u.idx[:, col]
    keep = factor != 0
    return u._like(u.idx[keep], u.coef[keep] * factor[keep], canonical=True)


_PAIR_CHUNK = 2_000_000
_DENSE_BINS = 1 << 22


def _pair_indices(au, av, thr):
    """Row/column indices of the term pairs whose product magnitude exceeds ``thr``."""
    order = np.argsort(-av, kind="stable")
    neg_sorted = -av[order]
    with np.errstate(divide="ignore"):
        counts = np.searchsorted(neg_sorted, -(thr / au), side="right")
    total = int(counts.sum())
    rows = np.repeat(np.arange(au.size), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    return rows, order[np.arange(total) - offsets]


def _multiply_keyed(u, v, rows, cols):
    """Convolution through additive mixed-radix keys; None when keys would overflow."""
    width = u.window.size
    cap = u.caps.per_site
    radix = 4 * cap + 1
    if width == 0 or width * math.log2(radix) >= 62:
        return None
    place = radix ** np.arange(width - 1, -1, -1, dtype=np.int64)
    ku = (u.idx + 2 * cap) @ place
    kv = v.idx @ place
    nbins = radix ** width
    dense = nbins <= min(_DENSE_BINS, 4 * rows.size)
    if dense:
        re = np.zeros(nbins)
        im = np.zeros(nbins)
    keys_parts, coef_parts = [], []
    for start in range(0, rows.size, _PAIR_CHUNK):
        r = rows[start:start + _PAIR_CHUNK]
        c = cols[start:start + _PAIR_CHUNK]
        keys = ku[r] + kv[c]
        vals = u.coef[r] * v.coef[c]
        if dense:
            re += np.bincount(keys, weights=vals.real, minlength=nbins)
            im += np.bincount(keys, weights=vals.imag, minlength=nbins)
        else:
            order = np.argsort(keys)
            keys, vals = keys[order], vals[order]
            fresh = np.empty(keys.size, dtype=bool)
            fresh[:1] = True
            np.not_equal(keys[1:], keys[:-1], out=fresh[1:])
            starts = np.flatnonzero(fresh)
            keys_parts.append(keys[starts])
            coef_parts.append(np.add.reduceat(vals, starts))
    if dense:
        keys = np.flatnonzero((re != 0) | (im != 0))
        coef = re[keys] + 1j * im[keys]
    else:
        keys = np.concatenate(keys_parts)
        coef = np.concatenate(coef_parts)
        if len(keys_parts) > 1:
            order = np.argsort(keys, kind="stable")
            keys, coef = keys[order], coef[order]
            fresh = np.empty(keys.size, dtype=bool)
            fresh[:1] = True
            np.not_equal(keys[1:], keys[:-1], out=fresh[1:])
            starts = np.flatnonzero(fresh)
            keys, coef = keys[starts], np.add.reduceat(coef, starts)
    # ascending keys decode to lexicographically sorted rows
    idx = np.empty((keys.size, width), dtype=np.int64)
    rest = keys.copy()
    for col in range(width - 1, -1, -1):
        idx[:, col] = rest % radix - 2 * cap
        rest //= radix
    absidx = np.abs(idx)
    ok = (absidx.max(axis=1) <= cap) & (absidx.sum(axis=1) <= u.caps.total)
    lost = float(np.abs(coef[~ok]).sum())
    idx, coef = idx[ok], coef[ok]
    mag = np.abs(coef)
    if mag.size:
        keep = (mag > u.drop_rel * mag.max()) & (mag > 0)
        idx, coef = idx[keep], coef[keep]
    return u._like(idx, coef, lost=lost, canonical=True)


def multiply(u: TorusFunction, v: TorusFunction, *, loss_budget: float | None = None,
             floor: float = 0.0) -> TorusFunction:
    """Sparse convolution of coefficient maps, truncated to the caps of ``u``.

    Term pairs whose product is below the drop tolerance of the result scale
    (or below ``floor``) are skipped before the convolution. The l1 mass
    removed by the caps is stored on the result and compared against
    ``loss_budget`` when given.
    """
    u._check_compatible(v)
    if u.is_zero() or v.is_zero():
        return TorusFunction.zero(u.window, u.caps)
    au, av = np.abs(u.coef), np.abs(v.coef)
    rows, cols = _pair_indices(au, av, max(u.drop_rel * au.max() * av.max(), floor))
    if rows.size == 0:
        return TorusFunction.zero(u.window, u.caps)
    out = _multiply_keyed(u, v, rows, cols)
    if out is None:
        pieces_idx, pieces_coef, lost = [], [], 0.0
        for start in range(0, rows.size, _PAIR_CHUNK):
            r = rows[start:start + _PAIR_CHUNK]
            c = cols[start:start + _PAIR_CHUNK]
            idx, coef, cap_lost = _canonical(u.idx[r] + v.idx[c], u.coef[r] * v.coef[c], u.caps, 0.0)
            pieces_idx.append(idx)
            pieces_coef.append(coef)
            lost += cap_lost
        if pieces_idx:
            out = u._like(np.vstack(pieces_idx), np.concatenate(pieces_coef), lost=lost)
        else:
            out = TorusFunction.zero(u.window, u.caps)
    if loss_budget is not None and out.lost > loss_budget:
        raise TruncationLossExceeded(out.lost, loss_budget)
    return out


@dataclass(frozen=True)
class DivisorPolicy:
    """Admissibility rule for small divisors <l, omega>.

    ``floor_rel`` scales with max|omega|. When ``gamma`` and ``mu`` are set the
    Bourgain lower bound is enforced mode by mode as well.
    """

    floor_rel: float = 1e-13
    gamma: float | None = None
    mu: float | None = None
    avg_tol: float = 1e-12

    def floors(self, idx: np.ndarray, window: SiteWindow, omega: np.ndarray) -> np.ndarray:
        base = self.floor_rel * float(np.max(np.abs(omega)))
        floors = np.full(idx.shape[0], base)
        if self.gamma is not None:
            mu = self.mu if self.mu is not None else 2.0
            factors = 1.0 + (np.abs(idx) * window.brackets) ** mu
            floors = np.maximum(floors, self.gamma / np.prod(factors, axis=1))
        return floors


def solve_homological(g: TorusFunction, omega, policy: DivisorPolicy = DivisorPolicy()) -> TorusFunction:
    """Solve omega . grad f = g for zero-average f, mode by mode."""
    w = _frequency_array(omega)
    if w.shape != (g.window.size,):
        raise ConfigError("frequency vector length does not match the window")
    g0 = g.average()
    scale = g.norm(0.0)
    if abs(g0) > policy.avg_tol * scale:
        raise NonZeroAverage(g0, policy.avg_tol * scale)
    g = g.oscillating()
    if g.is_zero():
        return g
    div = g.idx @ w
    floors = policy.floors(g.idx, g.window, w)
    bad = np.flatnonzero(np.abs(div) <= floors)
    if bad.size:
        k = bad[np.argmin(np.abs(div[bad]) / floors[bad])]
        raise ResonantDivisor(str(MultiIndex.from_dense(g.window, g.idx[k])), float(div[k]), float(floors[k]))
    return g._like(g.idx, g.coef / (1j * div), canonical=True)


def homological_loss(g: TorusFunction, f: TorusFunction, sigma: float, rho: float) -> float:
    """Measured loss ||f||_sigma / ||g||_{sigma+rho}."""
    return f.norm(sigma) / g.norm(sigma + rho)


def diophantine_loss_bound(tau: float, rho: float, eta: float) -> float:
    """Log of the loss factor exp((tau / rho^(1/eta)) log(tau / rho))."""
    return tau / rho ** (1.0 / eta) * math.log(tau / rho)


def random_trig_polynomial(window: SiteWindow, caps: Truncation, nterms: int, rng: np.random.Generator,
                           *, real: bool = True, zero_average: bool = True, decay: float = 0.0) -> TorusFunction:
    """Random sparse trigonometric polynomial inside the caps (test fixture helper)."""
    rows = []
    while len(rows) < nterms:
        row = rng.integers(-caps.per_site, caps.per_site + 1, size=window.size)
        if np.abs(row).sum() > caps.total or (zero_average and not row.any()):
            continue
        rows.append(row)
    idx = np.array(rows, dtype=np.int64).reshape(-1, window.size)
    mags = np.exp(-decay * (np.abs(idx) @ window.weights))
    coef = (rng.standard_normal(nterms) + 1j * rng.standard_normal(nterms)) * mags
    u = TorusFunction(window, caps, idx, coef)
    return u.real_part() if real else u
