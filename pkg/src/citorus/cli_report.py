"""Batch driver: configuration parsing, suite execution and JSON-lines reports.

Usage::

    citorus <command> --config <path> [--out <path>] [--fields-dir <path>]

The config file holds ``key=value`` lines with ``#`` comments.  Exact
parameters (``beta``, ``b``, ``alpha``) must be integers or ``p/q``
rationals.  The report starts with a header record, then one record per
check, then a summary record.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import re
import sys
import time
import traceback
from dataclasses import dataclass, field
from fractions import Fraction
from typing import IO, Iterable

import numpy as np

from . import convex_integration as ci
from . import verification as vf
from .spectral_torus import ContractError

__all__ = ["COMMANDS", "ConfigError", "RunConfig", "parse_config", "run", "main"]

COMMANDS = ("check-exponents", "verify-blocks", "verify-operators", "commutator-sweep", "iterate", "full-suite")
GENERATOR = "numpy PCG64 (SeedSequence spawn keyed by crc32 of the suite name)"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    d: int = 4
    N: int = 64
    beta: Fraction = Fraction(1, 200)
    b: Fraction = Fraction(5)
    alpha: Fraction = Fraction(1, 1_000_000)
    a: int = 2
    n: int = 2
    desk: bool = True
    lam_prev: int = 2
    mu: int = 16
    sigma: int = 4
    amplitude: float = 2.0
    kmax: int = 2
    ncount: int = 2
    q: int = 0
    min_points_per_radius: float = 1.0
    split_diagnostics: bool = False
    sigma_doubling: bool = True
    operator_N: int = 32
    operator_kmax: int = 4
    operator_samples: int = 100
    symmetric_gradient_samples: int = 25
    geometry_samples: int = 1000
    gradient_samples: int = 100
    composition_samples: int = 50
    scaling_N: int = 256
    tolerances: dict = field(default_factory=dict)

    def echo(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = str(v) if isinstance(v, Fraction) else v
        out["tolerances"] = {k: self.tolerances.get(k, v) for k, v in sorted(vf.DEFAULT_TOLERANCES.items())}
        return out


_EXACT = {"beta", "b", "alpha"}
_RATIONAL_RE = re.compile(r"^[+-]?\d+(/\d+)?$")


def _parse_bool(key: str, text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_value(key: str, text: str, kind):
    if key in _EXACT:
        if not _RATIONAL_RE.match(text):
            raise ConfigError(f"{key}: rationals must be written as p/q, got {text!r}")
        return Fraction(text)
    if kind is bool:
        return _parse_bool(key, text)
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(Fraction(text)) if "/" in text else float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_config(text: str, command: str | None = None) -> RunConfig:
    """Parse and validate a config; all defaults are filled in.

    ``command`` supplies the command when the text has none; a conflicting
    command in the text is an error.
    """
    kinds = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    tolerances: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values or key.removeprefix("tol.") in tolerances:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key.startswith("tol."):
            name = key[4:]
            if name not in vf.DEFAULT_TOLERANCES:
                raise ConfigError(f"line {lineno}: unknown tolerance {name!r}")
            tol = _parse_value(key, val, float)
            if not tol > 0:
                raise ConfigError(f"{key}: tolerances must be positive")
            tolerances[name] = tol
            continue
        if key not in kinds or key == "tolerances":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = {"int": int, "float": float, "bool": bool}.get(kinds[key], str)
        values[key] = _parse_value(key, val, kind)
    if command is not None:
        if values.setdefault("command", command) != command:
            raise ConfigError(f"config says command={values['command']}, caller asked for {command}")
    if "command" not in values:
        raise ConfigError("command required")
    if values["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {values['command']!r}; choose from {', '.join(COMMANDS)}")
    cfg = RunConfig(**values, tolerances=tolerances)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.d < 2:
        raise ConfigError("d must be at least 2")
    for key in ("N", "operator_N", "scaling_N"):
        v = getattr(cfg, key)
        if v < 8 or v & (v - 1):
            raise ConfigError(f"{key} must be a power of two and at least 8")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    for key in ("operator_samples", "symmetric_gradient_samples", "geometry_samples", "gradient_samples",
                "composition_samples"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be positive")
    # ordering constraints live with the parameter builder
    over = ci.DeskOverrides(cfg.lam_prev, cfg.mu, cfg.sigma) if cfg.desk else None
    try:
        ci.make_params(cfg.beta, cfg.b, cfg.alpha, cfg.a, cfg.n, over)
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- report

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _dumps(record: dict) -> str:
    return json.dumps(_jsonable(record), sort_keys=True, allow_nan=False)


def _suites(cfg: RunConfig, fields_dir: str | None) -> list[vf.Check]:
    cmd = cfg.command
    table = {
        "check-exponents": lambda: vf.exponent_checks(cfg),
        "verify-operators": lambda: vf.operator_checks(cfg),
        "verify-blocks": lambda: vf.block_checks(cfg),
        "commutator-sweep": lambda: vf.commutator_checks(cfg),
        "iterate": lambda: vf.iterate_checks(cfg, fields_dir),
    }
    if cmd == "full-suite":
        out: list[vf.Check] = []
        for name in ("check-exponents", "verify-operators", "verify-blocks", "commutator-sweep", "iterate"):
            out += table[name]()
        return out
    return table[cmd]()


def run(cfg: RunConfig, out: IO[str], fields_dir: str | None = None) -> int:
    """Run the configured checks, streaming one JSON line per row; return the exit status."""
    header = {"kind": "header", "command": cfg.command, "generator": GENERATOR, "seed": cfg.seed,
              "config": cfg.echo()}
    out.write(_dumps(header) + "\n")
    out.flush()
    counts: dict[str, int] = {}
    errors = 0
    for cid, fn in _suites(cfg, fields_dir):
        start = time.perf_counter()
        try:
            rows = fn()
        except Exception as exc:  # surfaced as a hard-error row, the run continues
            errors += 1
            rows = [{"id": cid, "paper_anchor": "plumbing", "inputs": {}, "measured": None, "target": None,
                     "verdict": "error", "error": f"{type(exc).__name__}: {exc}",
                     "traceback_tail": traceback.format_exc().strip().splitlines()[-3:]}]
        ms = (time.perf_counter() - start) * 1000.0
        for r in rows:
            r["kind"] = "check"
            r["runtime_ms"] = round(ms / len(rows), 3)
            counts[r["verdict"]] = counts.get(r["verdict"], 0) + 1
            out.write(_dumps(r) + "\n")
        out.flush()
    status = 0 if counts.get("exact-fail", 0) == 0 and errors == 0 else 1
    out.write(_dumps({"kind": "summary", "counts": dict(sorted(counts.items())), "exit_status": status}) + "\n")
    out.flush()
    return status


def strip_runtime(lines: Iterable[str]) -> list[str]:
    """Report lines with ``runtime_ms`` removed, for determinism comparisons."""
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("runtime_ms", None)
        out.append(json.dumps(rec, sort_keys=True))
    return out


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="citorus", description="Run verification suites and write a JSON-lines report.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="key=value config file")
    ap.add_argument("--out", help="report path (default: stdout)")
    ap.add_argument("--fields-dir", help="directory for CITF field dumps")
    args = ap.parse_args(argv)
    with open(args.config, encoding="utf-8") as fh:
        text = fh.read()
    try:
        cfg = parse_config(text, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            return run(cfg, fh, args.fields_dir)
    return run(cfg, sys.stdout, args.fields_dir)


if __name__ == "__main__":
    sys.exit(main())
