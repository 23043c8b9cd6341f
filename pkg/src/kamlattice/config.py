"""Run configuration documents and their JSON schemas."""

import json
import os

from jsonschema import Draft202012Validator

from .errors import ConfigError

ENV_OUTPUT_DIR = "KAMLATTICE_OUTPUT_DIR"
ENV_THREADS = "KAMLATTICE_THREADS"


def _obj(props: dict, required=()) -> dict:
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        out["required"] = list(required)
    return out


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}

WINDOW = {
    "oneOf": [
        _obj({"n": {"type": "integer", "minimum": 0}, "eta": {"type": "number", "minimum": 2}}, ["n"]),
        _obj({"lo": _int, "hi": _int, "eta": {"type": "number", "minimum": 2}}, ["lo", "hi"]),
    ]
}

CAPS = _obj({"L": {"type": "integer", "minimum": 0}, "O": {"type": "integer", "minimum": 0}})

POTENTIAL = {
    "oneOf": [
        _obj({"kind": {"const": "quartic"}}, ["kind"]),
        _obj({"kind": {"const": "monomial"}, "p": _posint}, ["kind", "p"]),
        _obj({"kind": {"const": "series"}, "coeffs": {"type": "array", "items": _nonneg, "minItems": 1}},
             ["kind", "coeffs"]),
    ]
}

CONTROL = _obj({
    "kind": {"enum": ["diophantine-exp", "double-exp", "log-iterated", "tabulated"]},
    "params": {"type": "object"},
}, ["kind"])

NONRES = _obj({
    "window": WINDOW,
    "omega": {"type": "array", "items": _num, "minItems": 1},
    "gamma": {"oneOf": [_nonneg, {"type": "array", "items": _nonneg, "minItems": 1}]},
    "mu": _pos,
    "budget_l1": _posint,
    "per_site": _posint,
    "samples": {"type": "integer", "minimum": 100},
    "strict": {"type": "boolean"},
    "control": CONTROL,
    "rho": {"type": "array", "items": _pos, "minItems": 1},
    "exponent_bound": _obj({
        "lam": {"type": "array", "items": _pos, "minItems": 1},
        "rho": {"type": "array", "items": _pos, "minItems": 1},
        "lambda_tilde": _pos,
    }),
})

KAM_RUN = _obj({
    "sigma": _pos,
    "eta": {"type": "number", "minimum": 2},
    "q": _pos,
    "target": _pos,
    "max_steps": {"type": "integer", "minimum": 0},
    "caps": CAPS,
    "divisor_floor": _nonneg,
    "loss_budget_rel": _pos,
    "taylor_tol": _pos,
    "coef_floor": _nonneg,
    "record_timings": {"type": "boolean"},
})

LATTICE = _obj({
    "N": {"type": "integer", "minimum": 0},
    "q_c": _nonneg,
    "R": _nonneg,
    "V": POTENTIAL,
    "W": {"type": "array", "items": _num, "minItems": 1},
    "eta": {"type": "number", "minimum": 2},
})

ACTIONS = _obj({
    "mode": {"enum": ["large", "small", "mixed"]},
    "xi_large": _pos,
    "xi_min": _pos,
    "varsigma": _nonneg,
    "jitter": _nonneg,
    "max_retries": _posint,
    "gamma": _pos,
    "mu": _pos,
    "budget_l1": _posint,
    "caps": CAPS,
    "grid": {"type": "integer", "minimum": 8},
    "tail_rel": _pos,
})

PROFILE = _obj({
    "margin": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "nodes": {"type": "integer", "minimum": 4},
})

VERIFY = _obj({
    "horizon": _pos,
    "dt": _pos,
    "sample_dt": _pos,
    "torus_samples": _posint,
    "torus_tolerance": _pos,
    "localization_required": {"type": "boolean"},
})

KAM = _obj({
    "fixture": {"enum": ["pendulum", "integrable", "chain", "divergent", "lattice"]},
    "delta": _nonneg,
    "omega": {"type": "array", "items": _num, "minItems": 1},
    "coupling": _nonneg,
    "run": KAM_RUN,
    "lattice": LATTICE,
    "actions": ACTIONS,
    "profile": PROFILE,
})

BREATHER = _obj({
    "lattice": LATTICE,
    "actions": ACTIONS,
    "profile": PROFILE,
    "kam": KAM_RUN,
    "verify": VERIFY,
})

RUN_CONFIG = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "threads": _posint,
    "nonres": NONRES,
    "kam": KAM,
    "breather": BREATHER,
})

_VALIDATOR = Draft202012Validator(RUN_CONFIG)


def _deepest(error):
    # oneOf failures carry the informative error in their context
    while error.context:
        error = min(error.context, key=lambda e: (-len(e.absolute_path), len(e.schema_path)))
    return error


def validate(doc: dict) -> dict:
    """Raise ConfigError naming the instance and schema paths of the first failure."""
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = _deepest(errors[0])
        where = "/" + "/".join(str(p) for p in err.absolute_path)
        schema = "/" + "/".join(str(p) for p in err.absolute_schema_path)
        raise ConfigError(f"config invalid at {where} (schema {schema}): {err.message}")
    return doc


def load(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return doc


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``None`` values in override are ignored."""
    out = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict):
            base_value = out.get(key)
            out[key] = merge(base_value if isinstance(base_value, dict) else {}, value)
        else:
            out[key] = value
    return out


def resolve_globals(doc: dict, output_dir: str | None = None, threads: int | None = None) -> tuple:
    """(output_dir, threads): command line beats environment beats config."""
    out = output_dir or os.environ.get(ENV_OUTPUT_DIR) or doc.get("output_dir") or "."
    if threads is None:
        env = os.environ.get(ENV_THREADS)
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigError(f"{ENV_THREADS} must be an integer, got {env!r}") from exc
        else:
            threads = int(doc.get("threads", 1))
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return out, threads
