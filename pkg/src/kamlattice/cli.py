"""Command line front-end: ``kamlattice nonres|kam|breather``."""

import argparse
import csv
import io
import json
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from . import config as cfg
from .action_angle import Potential
from .errors import (EXIT_KAM, EXIT_NONRESONANCE, EXIT_OK, AliasingBudgetExceeded, ConfigError, Diverged,
                     InversionDiverged, KamLatticeError, TruncationLossExceeded)
from .kam import KAMConfig, coupled_chain_hamiltonian, pendulum_hamiltonian, run_iteration
from .lattice import (BreatherConfig, CouplingPotential, LatticeModel, base_actions, construct_breather,
                      lattice_profile, reduced_problem, verify_breather)
from .nonresonance import (ControlFunction, DiophantineParams, FrequencyVector, IndexBudget, check_diophantine,
                           estimate_resonant_measure, inv_control_log, lambdapiao_bound, sample_frequency)
from .spectral import SiteWindow, Truncation

EXIT_VERIFY = 5

CHAIN_OMEGA_SEED = 3


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _na(value):
    return "n/a" if value is None else value


# nonres

def _nonres_section(args) -> dict:
    gamma = args.gamma
    if gamma is not None and len(gamma) == 1:
        gamma = gamma[0]
    return {"gamma": gamma, "mu": args.mu, "budget_l1": args.budget_l1, "samples": args.samples,
            "omega": args.omega}


def _window_for(sec: dict, size: int | None = None) -> SiteWindow:
    if "window" in sec:
        return SiteWindow.from_json(sec["window"])
    if size is not None:
        return SiteWindow(0, size - 1)
    return SiteWindow.symmetric(1)


def _params(sec: dict, gamma=None) -> DiophantineParams:
    g = sec.get("gamma", 0.01) if gamma is None else gamma
    if isinstance(g, list):
        g = g[0]
    return DiophantineParams(float(g), float(sec.get("mu", 2.0)), strict=sec.get("strict", True))


def _budget(sec: dict) -> IndexBudget:
    return IndexBudget(int(sec.get("budget_l1", 4)), sec.get("per_site"))


def cmd_nonres(args, doc: dict, out_dir: str, threads: int) -> int:
    sec = doc.get("nonres", {})
    seed = int(doc.get("seed", 0))
    if args.action == "check":
        if "omega" not in sec:
            raise ConfigError("nonres check needs omega (config nonres.omega or --omega)")
        omega = FrequencyVector(_window_for(sec, len(sec["omega"])), np.asarray(sec["omega"], dtype=float))
        verdict = check_diophantine(omega, _params(sec), _budget(sec))
        sys.stdout.write(_dumps(verdict.to_json()))
        return EXIT_OK if verdict.holds else EXIT_NONRESONANCE
    if args.action == "sample":
        omega = sample_frequency(_window_for(sec), _params(sec), _budget(sec), seed)
        sys.stdout.write(_dumps(omega.to_json()))
        return EXIT_OK
    if args.action == "measure":
        window = _window_for(sec)
        gammas = sec.get("gamma", 0.01)
        gammas = gammas if isinstance(gammas, list) else [gammas]
        budget = _budget(sec)
        samples = int(sec.get("samples", 2000))
        rows = []
        for g in gammas:
            params = DiophantineParams(float(g), float(sec.get("mu", 2.0)), strict=sec.get("strict", True))
            est = estimate_resonant_measure(window, params, budget, samples, seed, threads=threads)
            rows.append([float(g), params.mu, budget.max_l1, est.fraction, est.ci95, est.samples, est.violations])
        text = _csv(["gamma", "mu", "budget", "fraction", "ci95", "samples", "violations"], rows)
        _emit_csv(args, out_dir, "nonres_measure.csv", text)
        return EXIT_OK
    # control
    ctrl = sec.get("control", {"kind": "diophantine-exp", "params": {"tau": 1.0}})
    E = ControlFunction(ctrl["kind"], dict(ctrl.get("params", {})))
    rows = []
    for rho in sec.get("rho", [0.05, 0.1, 0.2, 0.4]):
        log_e = E.log_eval(float(rho))
        back = inv_control_log(E, log_e) if math.isfinite(log_e) and log_e > E.log_infimum() else math.nan
        rows.append([float(rho), log_e, back])
    text = _csv(["rho", "log_E", "inverse_rho"], rows)
    if "exponent_bound" in sec:
        la = sec["exponent_bound"]
        lt = float(la.get("lambda_tilde", 0.9))
        grid = []
        for lam in la.get("lam", [0.5, 1.0, 2.0]):
            for rho in la.get("rho", [1e-2, 1e-3, 1e-4]):
                rep = lambdapiao_bound(float(lam), float(rho), lt)
                grid.append([float(lam), float(rho), lt, rep.log_exponent_max, rep.log_exponent_bound,
                             int(rep.holds)])
        _write(os.path.join(out_dir, "exponent_bound.csv"),
               _csv(["lam", "rho", "lambda_tilde", "log_sup", "log_bound", "holds"], grid))
    _emit_csv(args, out_dir, "nonres_control.csv", text)
    return EXIT_OK


def _emit_csv(args, out_dir, default_name, text):
    path = args.csv_out or os.path.join(out_dir, default_name)
    if path == "-":
        sys.stdout.write(text)
    else:
        _write(path, text)
        sys.stdout.write(text)


# kam

def _kam_config(defaults: dict, run: dict) -> KAMConfig:
    return KAMConfig.from_json(cfg.merge(defaults, run))


def _lattice_model(sec: dict) -> LatticeModel:
    V = Potential.from_json(sec.get("V", {"kind": "quartic"}))
    W = CouplingPotential(tuple(sec["W"])) if "W" in sec else None
    return LatticeModel.chain(int(sec.get("N", 4)), V, float(sec.get("q_c", 1e-6)), float(sec.get("R", 3.0)), W)


def _breather_config(actions: dict, kam_run: dict, seed: int) -> BreatherConfig:
    base = BreatherConfig()
    kw = dict(actions)
    if "caps" in kw:
        kw["caps"] = Truncation(int(kw["caps"].get("L", base.caps.per_site)), int(kw["caps"].get("O", base.caps.total)))
    k = base.kam
    kam_defaults = {"sigma": k.sigma, "target": k.target, "max_steps": k.max_steps, "coef_floor": k.coef_floor,
                    "caps": {"L": k.caps.per_site, "O": k.caps.total}}
    return BreatherConfig(**kw, seed=seed, kam=_kam_config(kam_defaults, kam_run))


def _profile_for(model: LatticeModel, bcfg: BreatherConfig, prof: dict):
    base = base_actions(model.window, bcfg)
    return lattice_profile(model.V, float(base.max()) * (1 + bcfg.jitter), float(base.min()) * (1 - bcfg.jitter),
                           float(prof.get("margin", 0.5)), int(prof.get("nodes", 48)))


def _kam_problem(sec: dict, seed: int):
    fixture = sec.get("fixture", "pendulum")
    run = sec.get("run", {})
    if fixture == "pendulum":
        H = pendulum_hamiltonian(float(sec.get("delta", 1e-4)))
        return H, [1.0], _kam_config({}, run)
    if fixture == "lattice":
        model = _lattice_model(sec.get("lattice", {}))
        bcfg = _breather_config(sec.get("actions", {}), run, seed)
        profile = _profile_for(model, bcfg, sec.get("profile", {}))
        _, omega, _, _, H, _ = reduced_problem(model, profile, bcfg)
        return H, omega.values, bcfg.kam
    if "omega" in sec:
        omega = np.asarray(sec["omega"], dtype=float)
    else:
        omega = sample_frequency(SiteWindow.symmetric(1), DiophantineParams(0.01, 2.0), IndexBudget(8),
                                 CHAIN_OMEGA_SEED).values
    coupling = {"integrable": 0.0, "chain": 1e-6, "divergent": 0.3}[fixture]
    coupling = float(sec.get("coupling", coupling)) if fixture != "integrable" else 0.0
    H = coupled_chain_hamiltonian(omega, coupling)
    defaults = {"sigma": 0.05, "target": 1e-70, "max_steps": 6, "caps": {"L": 12, "O": 24}}
    return H, omega, _kam_config(defaults, run)


def cmd_kam(args, doc: dict, out_dir: str, threads: int) -> int:
    sec = doc.get("kam", {})
    H, omega, kcfg = _kam_problem(sec, int(doc.get("seed", 0)))
    hist_path = os.path.join(out_dir, "kam_history.jsonl")
    fit_path = os.path.join(out_dir, "kam_fit.json")
    try:
        report = run_iteration(H, omega, kcfg)
    except (Diverged, InversionDiverged, TruncationLossExceeded, AliasingBudgetExceeded) as exc:
        rec = {"status": "diverged", "error": "Diverged", "cause": type(exc).__name__, "detail": str(exc)}
        _write(hist_path, json.dumps(rec, sort_keys=True) + "\n")
        _write(fit_path, _dumps(rec))
        sys.stdout.write(_dumps(rec))
        return EXIT_KAM
    summary = {k: _na(v) for k, v in report.summary().items()}
    summary["fixture"] = sec.get("fixture", "pendulum")
    summary["status"] = "converged" if report.converged else "not_converged"
    _write(hist_path, report.jsonl())
    _write(fit_path, _dumps(summary))
    if report.embedding is not None:
        U, Y = report.embedding
        for name, part in (("kam_embedding_u.json", U), ("kam_embedding_v.json", Y)):
            _write(os.path.join(out_dir, name), _dumps([None if f is None else f.to_json() for f in part]))
    sys.stdout.write(_dumps(summary))
    return EXIT_OK if report.converged else EXIT_KAM


# breather

def cmd_breather(args, doc: dict, out_dir: str, threads: int) -> int:
    sec = doc.get("breather", {})
    seed = int(doc.get("seed", 0))
    model = _lattice_model(sec.get("lattice", {}))
    bcfg = _breather_config(sec.get("actions", {}), sec.get("kam", {}), seed)
    profile = _profile_for(model, bcfg, sec.get("profile", {}))
    cert = construct_breather(model, profile, bcfg)
    cert_doc = cert.to_json()
    cert_doc["model"] = model.to_json()
    _write(os.path.join(out_dir, "certificate.json"), _dumps(cert_doc))
    ver = dict(sec.get("verify", {}))
    report, traj = verify_breather(cert, model, float(ver.pop("horizon", 1e4)), dt=float(ver.pop("dt", 5e-4)),
                                   sample_dt=float(ver.pop("sample_dt", 0.25)), **ver)
    _write(os.path.join(out_dir, "trajectory.csv"), traj.csv())
    _write(os.path.join(out_dir, "verification.json"), _dumps(report.to_json()))
    sys.stdout.write(_dumps({"checks": report.checks, "passed": report.passed,
                             "energy_drift": report.energy_drift, "decay_orders": report.decay_orders,
                             "torus_distance": report.torus_distance}))
    return EXIT_OK if report.passed else EXIT_VERIFY


# entry point

def _version_text() -> str:
    import numba
    import scipy
    return (f"kamlattice {__version__} (python {platform.python_version()}, numpy {np.__version__}, "
            f"scipy {scipy.__version__}, numba {numba.__version__})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kamlattice", description=__doc__)
    parser.add_argument("--version", action="version", version=_version_text())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", help=f"output directory (also ${cfg.ENV_OUTPUT_DIR})")
    common.add_argument("--threads", type=int, help=f"worker threads (also ${cfg.ENV_THREADS})")
    sub = parser.add_subparsers(dest="command", required=True)

    nr = sub.add_parser("nonres", parents=[common], help="Diophantine checks, sampling, measure, control functions")
    nr.add_argument("action", choices=["check", "sample", "measure", "control"])
    nr.add_argument("--gamma", type=float, nargs="+")
    nr.add_argument("--mu", type=float)
    nr.add_argument("--budget-l1", type=int)
    nr.add_argument("--samples", type=int)
    nr.add_argument("--omega", type=float, nargs="+")
    nr.add_argument("--csv-out", help="CSV path, '-' for stdout only")
    nr.set_defaults(handler=cmd_nonres, section=_nonres_section)

    km = sub.add_parser("kam", parents=[common], help="run the KAM iteration on a fixture or a lattice")
    km.add_argument("--fixture", choices=["pendulum", "integrable", "chain", "divergent", "lattice"])
    km.add_argument("--delta", type=float)
    km.add_argument("--coupling", type=float)
    km.set_defaults(handler=cmd_kam,
                    section=lambda a: {"fixture": a.fixture, "delta": a.delta, "coupling": a.coupling})

    br = sub.add_parser("breather", parents=[common], help="profile, construct, integrate and verify a breather")
    br.add_argument("--horizon", type=float)
    br.add_argument("--q-c", type=float, dest="q_c")
    br.set_defaults(handler=cmd_breather,
                    section=lambda a: {"lattice": {"q_c": a.q_c}, "verify": {"horizon": a.horizon}})
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = cfg.load(args.config)
        override = {args.command: args.section(args), "seed": args.seed}
        doc = cfg.validate(cfg.merge(doc, override))
        out_dir, threads = cfg.resolve_globals(doc, args.output_dir, args.threads)
        return args.handler(args, doc, out_dir, threads)
    except KamLatticeError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
