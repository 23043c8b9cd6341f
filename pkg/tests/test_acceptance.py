"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the summary) or
``python tests/test_acceptance.py`` (lines go to stdout).
"""

import filecmp
import json
import math
import os
import sys
import time

import numpy as np
from scipy.special import beta

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from test_nonresonance import varpi_log_sup  # noqa: E402

from kamlattice.action_angle import Potential, area_rho, build_profile, fit_small_amplitude_series, reverse_series
from kamlattice.cli import main
from kamlattice.nonresonance import (DiophantineParams, FrequencyVector, IndexBudget, check_diophantine,
                                     lambdapiao_bound, make_rng, sample_frequency)
from kamlattice.spectral import (SiteWindow, Truncation, diophantine_loss_bound, homological_loss, multiply,
                                 partial_derivative, random_trig_polynomial, solve_homological)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run_cli(argv, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    with open(os.devnull, "w") as sink:
        old, sys.stdout = sys.stdout, sink
        try:
            code = main(argv + ["--output-dir", out_dir])
        finally:
            sys.stdout = old
    return code, time.perf_counter() - t0


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


_cache = {}


def cli_output(name, argv, base):
    """Run a CLI command once per session and reuse its output directory."""
    if name not in _cache:
        out = os.path.join(base, name)
        code, seconds = run_cli(argv, out)
        _cache[name] = (out, code, seconds)
    return _cache[name]


def scratch():
    base = os.environ.get("KAMLATTICE_ACCEPTANCE_DIR")
    if base is None:
        import tempfile
        base = _cache.setdefault("_base", tempfile.mkdtemp(prefix="kamlattice-acceptance-"))
    return base


KAM_RUNS = {"pendulum": ["kam", "--fixture", "pendulum", "--delta", "1e-4", "--seed", "0"],
            "chain": ["kam", "--fixture", "chain", "--coupling", "1e-6", "--seed", "0"]}
BREATHER_RUN = ["breather", "--seed", "0"]


def test_criterion_1_homological_round_trip():
    t0 = time.perf_counter()
    window = SiteWindow.symmetric(2)
    caps = Truncation(4, 8)
    omega = sample_frequency(window, DiophantineParams(0.01, 2), IndexBudget(8), 1).values
    worst = 0.0
    for seed in range(200):
        g = random_trig_polynomial(window, caps, 40, make_rng(seed))
        back = solve_homological(g, omega).directional_derivative(omega)
        worst = max(worst, (back - g).max_abs() / g.max_abs())
    seconds = time.perf_counter() - t0
    report(1, worst <= 1e-12 and seconds < 10, f"max rel error {worst:.2e} over 200 cases in {seconds:.1f}s")


def test_criterion_2_banach_and_cauchy():
    t0 = time.perf_counter()
    window = SiteWindow.symmetric(2)
    small, big = Truncation(4, 8), Truncation(8, 16)
    rhos = (0.05, 0.1, 0.2)
    banach = cauchy = 0
    for seed in range(1000):
        rng = make_rng(seed, 2)
        sigma = float(rng.uniform(0.0, 0.5))
        u = random_trig_polynomial(window, small, 12, rng, zero_average=False).with_caps(big)
        v = random_trig_polynomial(window, small, 12, rng, zero_average=False).with_caps(big)
        uv = multiply(u, v)
        assert uv.lost == 0.0
        if uv.norm(sigma) > u.norm(sigma) * v.norm(sigma) * (1 + 1e-12):
            banach += 1
        for rho in rhos:
            rhs = u.norm(sigma + rho) / (math.e * rho)
            for site in window.sites:
                if partial_derivative(u, site).norm(sigma) > rhs * (1 + 1e-12):
                    cauchy += 1
    seconds = time.perf_counter() - t0
    report(2, banach == 0 and cauchy == 0 and seconds < 30,
           f"violations banach={banach} cauchy={cauchy} over 1000 cases in {seconds:.1f}s")


def test_criterion_3_loss_bound_shape():
    eta = 2.0
    window = SiteWindow.symmetric(2)
    caps = Truncation(4, 8)
    omega = sample_frequency(window, DiophantineParams(0.01, 2), IndexBudget(8), 1).values
    g = random_trig_polynomial(window, caps, 200, make_rng(0))
    f = solve_homological(g, omega)
    rhos = np.array([0.05, 0.1, 0.2, 0.4])
    logs = np.array([math.log(homological_loss(g, f, 0.0, r)) for r in rhos])

    def bounded(tau):
        return all(lv <= diophantine_loss_bound(tau, r, eta) for lv, r in zip(logs, rhos))

    # smallest tau with the bound holding at every rho, by bisection
    lo, hi = rhos.max() / math.e, 10.0
    fitted = None
    if bounded(hi):
        if bounded(lo):
            hi = lo
        for _ in range(200):
            if hi - lo <= 1e-12:
                break
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if bounded(mid) else (mid, hi)
        fitted = hi

    def growth(r):
        return r ** (-1.0 / eta) * np.log(1.0 / r)

    dl = logs[:-1] - logs[-1]
    dx = growth(rhos[:-1]) - growth(rhos[-1])
    expo = float(np.polyfit(np.log(dx), np.log(dl), 1)[0]) if np.all(dl > 0) else math.inf
    ok = fitted is not None and fitted <= 10 and expo <= 1.2
    report(3, ok, f"tau_fit={fitted} regression exponent {expo:.3f} (<= 1.2 required; two-sided |p-1| "
                  f"{'met' if abs(expo - 1) <= 0.2 else 'not met'})")


def quadratic_summary(hist):
    eps = [r["eps"] for r in hist]
    pairs = [(a, b) for a, b in zip(eps, eps[1:]) if a > 0 and b > 0]
    C = max(b / (a * a) for a, b in pairs)
    tail = [(k, e) for k, e in enumerate(eps) if 0 < e < 1][-4:]
    slope = float(np.polyfit([k for k, _ in tail], np.log(-np.log([e for _, e in tail])), 1)[0])
    return eps, C, slope


def test_criterion_4_quadratic_convergence():
    base = scratch()
    lines, ok, total = [], True, 0.0
    for name, argv in KAM_RUNS.items():
        out, code, seconds = cli_output(name, argv, base)
        total += seconds
        hist = read_jsonl(os.path.join(out, "kam_history.jsonl"))
        eps, C, slope = quadratic_summary(hist)
        steps = len(eps) - 1
        within = all(b <= C * a * a * (1 + 1e-12) for a, b in zip(eps, eps[1:]))
        good = code == 0 and steps >= 4 and within and 0.85 <= slope / math.log(2) <= 1.15
        ok &= good
        lines.append(f"{name}: steps={steps} C={C:.3g} slope/log2={slope / math.log(2):.3f}")
    ok &= total < 120
    report(4, ok, "; ".join(lines) + f"; {total:.1f}s")


def test_criterion_5_frequency_preservation():
    out, code, _ = cli_output("chain", KAM_RUNS["chain"], scratch())
    hist = read_jsonl(os.path.join(out, "kam_history.jsonl"))
    eps, C, _ = quadratic_summary(hist)
    res = [r["freq_residual"] for r in hist]
    budget_ok = all(res[k + 1] <= res[k] + C * eps[k] ** 2 for k in range(len(res) - 1))
    final = res[-1]
    report(5, code == 0 and final <= 1e-10 and budget_ok,
           f"final residual {final:.2e}; per-step budget {'respected' if budget_ok else 'exceeded'}")


def test_criterion_6_beta_closed_forms():
    worst_val = worst_exp = 0.0
    for p in (1, 2, 3):
        V = Potential.monomial(p)
        expo = (1 + p) / (2 * p)
        for h in (0.5, 1.0, 2.0):
            closed = math.sqrt(2) / p * beta(1 / (2 * p), 1.5) * h ** expo
            worst_val = max(worst_val, abs(area_rho(V, h) / closed - 1))
        hs = np.geomspace(0.05, 20, 25)
        fit = np.polyfit(np.log(hs), np.log(area_rho(V, hs)), 1)[0]
        worst_exp = max(worst_exp, abs(fit - expo))
    report(6, worst_val <= 1e-9 and worst_exp <= 1e-6,
           f"max rel error {worst_val:.2e}; max exponent error {worst_exp:.2e}")


def test_criterion_7_quartic_profile():
    V = Potential.quartic()
    lo, hi = 1e-3, 1e-1
    A = fit_small_amplitude_series(V, hi, 10, h_min=lo)
    B = reverse_series(A, 10)
    prof = build_profile(V, (lo, hi))
    h = np.linspace(lo, hi, 400)
    ident = float(np.max(np.abs(prof.H0(prof.rho(h)) / h - 1)))
    # second route: fit h as a polynomial in rho directly
    hs = np.linspace(lo, hi, 400)
    r = area_rho(V, hs)
    scale = r.max()
    M = np.stack([(r / scale) ** k for k in range(1, 11)], axis=1)
    coef = np.linalg.lstsq(M, hs, rcond=None)[0]
    B_direct = [coef[0] / scale, coef[1] / scale ** 2]
    nonzero = A[0] != 0 and A[1] != 0 and abs(A[1] / A[0]) >= 1e-3
    b1 = abs(B[0] * A[0] - 1)
    b2 = abs(B[1] / (-A[1] / A[0] ** 3) - 1)
    d1 = abs(B_direct[0] / B[0] - 1)
    d2 = abs(B_direct[1] / B[1] - 1)
    ok = nonzero and ident <= 1e-9 and max(b1, b2, d1, d2) <= 1e-6
    report(7, ok, f"A1={A[0]:.12g} A2={A[1]:.12g} |A2/A1|={abs(A[1] / A[0]):.3g} H0(rho)=id to {ident:.1e}; "
                  f"inversion rel {max(b1, b2):.1e}; direct fit rel B1 {d1:.1e} B2 {d2:.1e}")


def test_criterion_8_breather():
    out, code, seconds = cli_output("breather", BREATHER_RUN, scratch())
    with open(os.path.join(out, "verification.json")) as fh:
        rep = json.load(fh)
    tol = max(5 * 2 * math.pi / 1e4, 1e-4)
    peaks = max(rep["peak_errors"])
    ok = (code == 0 and rep["horizon"] == 1e4 and rep["energy_drift"] <= 1e-6 and peaks <= tol
          and rep["decay_orders"] >= 3 and seconds < 600)
    report(8, ok, f"drift {rep['energy_drift']:.2e}; max peak error {peaks:.2e} (tol {tol:.2e}); "
                  f"decay {rep['decay_orders']:.2f} orders; {seconds:.0f}s")


def test_criterion_9_negative_controls(tmp_path):
    pair = FrequencyVector(SiteWindow(0, 1), [1.0, 1.0])
    verdict = check_diophantine(pair, DiophantineParams(1e-6, 2), IndexBudget(4))
    diverge, _ = run_cli(["breather", "--q-c", "0.1", "--seed", "0"], str(tmp_path / "qc"))
    cfg = tmp_path / "harmonic.json"
    cfg.write_text(json.dumps({"breather": {"lattice": {"V": {"kind": "monomial", "p": 1}}}}))
    degenerate, _ = run_cli(["breather", "--config", str(cfg)], str(tmp_path / "harm"))
    ok = (not verdict.holds) and diverge == 3 and degenerate == 4
    report(9, ok, f"omega=(1,1) -> {type(verdict).__name__}; q_c=0.1 -> exit {diverge}; V=x^2 -> exit {degenerate}")


def test_criterion_10_exponent_bound_grid():
    failures = []
    for lam in (0.5, 1.0, 2.0):
        for rho in (1e-2, 1e-3, 1e-4):
            rep = lambdapiao_bound(lam, rho, 0.9)
            oracle = varpi_log_sup(lam, rho)
            agree = abs(rep.log_exponent_max - oracle) <= 1e-8 * abs(oracle) + 1e-10
            if not (rep.holds and oracle <= rho ** -0.9 and agree):
                failures.append((lam, rho))
    report(10, not failures, f"9 grid points, failures {failures}")


def test_criterion_11_determinism():
    base = scratch()
    mismatches = []
    for name, argv in list(KAM_RUNS.items()) + [("breather", BREATHER_RUN)]:
        first, _, _ = cli_output(name, argv, base)
        second = os.path.join(base, name + "-repeat")
        run_cli(argv, second)
        files = sorted(os.listdir(first))
        if files != sorted(os.listdir(second)):
            mismatches.append(name)
            continue
        _, diff, errors = filecmp.cmpfiles(first, second, files, shallow=False)
        mismatches += [f"{name}/{f}" for f in diff + errors]
    report(11, not mismatches, f"compared kam pendulum, kam chain and breather outputs; mismatches {mismatches}")


if __name__ == "__main__":
    import pytest
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
