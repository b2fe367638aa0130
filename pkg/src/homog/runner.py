"""Config-driven experiment runner with reproducible manifests.

A run is described by a JSON config::

    {
      "command": "scan",
      "seed": 0,
      "model": {"bundled": "figure1", "rho": 4, "n": 3},
      "solver": {"preconditioner": "amg"},
      "params": {"n_max": 3, "period_points": 32}
    }

The config is validated against :data:`CONFIG_SCHEMA` (unknown keys are
rejected) and resolved: defaults are filled in and model files are inlined,
so the manifest written at the end of the run is enough to repeat it.
Tables are CSV, everything else JSON.  Output files never contain wall-clock
data; timings live in the manifest only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import __version__
from .cell import SolverConfig, dual_diffusivity, effective_diffusivity, voigt_reiss
from .errors import ConfigError
from .landscape import as_landscape
from .models import get_model, model_names
from .multiscale import (
    decay_scan,
    translation_audit,
    two_scale_convergence_study,
    write_convergence_csv,
    write_decay_csv,
)
from .potential import MultiscaleModel, PotentialExpr
from .pressure import QuadratureConfig, z_functional
from .sde import SdeConfig, exit_exponent_fit, heat_tail, mean_exit_time

COMMANDS = ("diffusivity", "two-scale", "scan", "pressure", "exit", "tail", "verify")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM_LIST = {"type": "array", "items": _NUM, "minItems": 1}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["command", "seed"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output": {"type": "string"},
        "model": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "properties": {
                "bundled": {"type": "string"},
                "rho": {"type": "integer", "minimum": 2},
                "n": {"type": "integer", "minimum": 0},
                "potential": {"type": "object"},
                "multiscale": {"type": "object"},
                "pair": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["U", "T"],
                    "properties": {"U": {"type": "object"}, "T": {"type": "object"}},
                },
                "d": {"type": "integer", "minimum": 1},
                "file": {"type": "string"},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _NUM,
                "max_iter": _POS_INT,
                "points_per_oscillation": _NUM,
                "N": {"type": ["integer", "null"]},
                "scheme": {"enum": ["fv", "spectral"]},
                "preconditioner": {"enum": ["spectral", "amg"]},
                "max_unknowns": _POS_INT,
            },
        },
        "quadrature": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"q": _NUM, "max_points": _POS_INT, "check_doubling": {"type": "boolean"}},
        },
        "sde": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": ["number", "null"]},
                "paths": _POS_INT,
                "c1": _NUM,
                "c2": _NUM,
                "time_cap_factor": _NUM,
                "max_censored_fraction": _NUM,
                "boundary_shift": {"type": "boolean"},
            },
        },
        "params": {"type": "object"},
    },
}

PARAM_SCHEMAS: dict[str, dict] = {
    "diffusivity": {
        "type": "object",
        "additionalProperties": False,
        "properties": {"p": {"type": "integer", "minimum": 0}, "n": {"type": "integer", "minimum": 0},
                       "dual": {"type": "boolean"}},
    },
    "two-scale": {
        "type": "object",
        "additionalProperties": False,
        "required": ["R_list"],
        "properties": {
            "R_list": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
            "translation_R": {"type": "integer", "minimum": 2},
            "offsets": {"type": "array", "items": _NUM_LIST},
            "alpha": _NUM,
        },
    },
    "scan": {
        "type": "object",
        "additionalProperties": False,
        "required": ["n_max"],
        "properties": {"n_max": {"type": "integer", "minimum": 0}, "period_points": {"type": ["integer", "null"]}},
    },
    "pressure": {
        "type": "object",
        "additionalProperties": False,
        "required": ["rho"],
        "properties": {
            "rho": {"type": "integer", "minimum": 2},
            "n_range": {"type": "array", "items": _POS_INT, "minItems": 3},
            "cocycle_n_max": {"type": "integer", "minimum": 2},
        },
    },
    "exit": {
        "type": "object",
        "additionalProperties": False,
        "required": ["radii"],
        "properties": {
            "radii": _NUM_LIST,
            "start": {"oneOf": [{"const": "gibbs-ball"}, _NUM_LIST]},
            "n": {"type": "integer", "minimum": 0},
            "drift_sign": {"enum": [-1, 1, -1.0, 1.0]},
        },
    },
    "tail": {
        "type": "object",
        "additionalProperties": False,
        "required": ["t_list", "r_list"],
        "properties": {
            "t_list": _NUM_LIST,
            "r_list": _NUM_LIST,
            "x0": _NUM_LIST,
            "n": {"type": "integer", "minimum": 0},
            "p_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
    },
    "verify": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "tier": {"enum": ["fast", "full"]},
            "criteria": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 13}},
        },
    },
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _validate(instance, schema, where: str) -> None:
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"{where}{'/' + path if path else ''}: {exc.message}") from None


def load_config(source) -> dict:
    """Read (if a path) and schema-validate a config or a manifest's config."""
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from None
        if isinstance(data, dict) and "config_hash" in data and "config" in data:
            data = data["config"]
    else:
        data = source
    _validate(data, CONFIG_SCHEMA, "config")
    _validate(data.get("params", {}), PARAM_SCHEMAS[data["command"]], "config/params")
    return data


# ---------------------------------------------------------------------------
# Resolution of configs
# ---------------------------------------------------------------------------


def _inline_model(ref: dict) -> dict:
    if "file" in ref:
        if len(ref) != 1:
            raise ConfigError("a model file reference cannot carry other keys")
        try:
            with open(ref["file"]) as fh:
                ref = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read model file: {exc}") from None
        _validate(ref, CONFIG_SCHEMA["properties"]["model"], "model file")
        if "file" in ref:
            raise ConfigError("model files cannot reference other files")
    kinds = [k for k in ("bundled", "potential", "multiscale", "pair") if k in ref]
    if len(kinds) != 1:
        raise ConfigError("model must specify exactly one of bundled, potential, multiscale, pair")
    kind = kinds[0]
    allowed = {"bundled": {"bundled", "rho", "n"}, "potential": {"potential", "d"},
               "multiscale": {"multiscale"}, "pair": {"pair", "d"}}[kind]
    extra = set(ref) - allowed
    if extra:
        raise ConfigError(f"keys {sorted(extra)} are not valid for a {kind} model")
    if kind == "bundled" and ref["bundled"] not in model_names():
        raise ConfigError(f"unknown bundled model {ref['bundled']!r}; choose from {model_names()}")
    return ref


def build_model(ref: dict):
    """Instantiate a (resolved) model reference."""
    if "bundled" in ref:
        return get_model(ref["bundled"], ref.get("rho"), ref.get("n"))
    if "potential" in ref:
        return PotentialExpr.from_json(ref["potential"], ref.get("d"))
    if "multiscale" in ref:
        return MultiscaleModel.from_json(ref["multiscale"])
    pair = ref["pair"]
    return (PotentialExpr.from_json(pair["U"], ref.get("d")), PotentialExpr.from_json(pair["T"], ref.get("d")))


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls) if f.init}


def resolve_config(config: dict) -> dict:
    """Validated config with defaults filled in and model files inlined."""
    cfg = load_config(config)
    out: dict[str, Any] = {"command": cfg["command"], "seed": int(cfg["seed"])}
    if cfg["command"] != "verify":
        if "model" not in cfg:
            raise ConfigError(f"command {cfg['command']!r} needs a model")
        out["model"] = _inline_model(cfg["model"])
    solver = _defaults(SolverConfig)
    solver.update(cfg.get("solver", {}))
    quad = _defaults(QuadratureConfig)
    quad.update(cfg.get("quadrature", {}))
    sde = {k: v for k, v in _defaults(SdeConfig).items() if k not in ("seed", "threads", "drift_sign")}
    sde.update(cfg.get("sde", {}))
    out["solver"] = solver
    out["quadrature"] = quad
    out["sde"] = sde
    out["params"] = dict(cfg.get("params", {}))
    # Check the numerical blocks now so that errors surface before any compute.
    SolverConfig(**solver)
    QuadratureConfig(**quad)
    SdeConfig(seed=out["seed"], **sde)
    return out


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    _atomic_write(path, buf.getvalue())


def _via_tmp(path: Path, writer, *args) -> None:
    """Run a writer that takes a path, then move its output into place atomically."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(*args, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _periodic(model, params) -> PotentialExpr:
    if isinstance(model, PotentialExpr):
        return model
    if isinstance(model, MultiscaleModel):
        n = params.get("n", model.n_max)
        return model.periodic_potential(params.get("p", 0), n)
    raise ConfigError("this command needs a single potential or a multi-scale model")


def _cmd_diffusivity(model, cfg, out: Path) -> list[str]:
    params = cfg["params"]
    U = _periodic(model, params)
    solver = SolverConfig(**cfg["solver"])
    D = effective_diffusivity(U, solver)
    summary = {"tensor": D.to_json(), "voigt_reiss": voigt_reiss(U)}
    files = ["tensor.json", "matrix.csv"]
    if params.get("dual", False):
        if U.d < 2:
            raise ConfigError("the dual diffusivity needs d >= 2")
        summary["dual"] = dual_diffusivity(U, solver).to_json()
    _write_json(out / "tensor.json", summary)
    _write_rows(out / "matrix.csv", [f"col{j}" for j in range(U.d)], D.matrix.tolist())
    return files


def _cmd_two_scale(model, cfg, out: Path) -> list[str]:
    if not isinstance(model, tuple):
        raise ConfigError("two-scale needs a 'pair' model with U and T")
    U, T = model
    params = cfg["params"]
    solver = SolverConfig(**cfg["solver"])
    study = two_scale_convergence_study(U, T, params["R_list"], solver)
    _via_tmp(out / "convergence.csv", write_convergence_csv, study)
    files = ["convergence.csv", "limits.json"]
    _write_json(out / "limits.json", {
        "D_U": study.D_U.to_json(), "D_T": study.D_T.to_json(), "D_UT": study.D_UT.to_json(),
        "eps_corollary": [r.eps_corollary for r in study.rows],
    })
    if params.get("offsets"):
        R = params.get("translation_R", 8)
        rows = translation_audit(U, T, R, params["offsets"], solver, alpha=params.get("alpha", 1.0))
        _write_rows(out / "translation.csv", ["y", "g", "bound"],
                    [[" ".join(repr(v) for v in r.y), r.g, r.bound] for r in rows])
        files.append("translation.csv")
    return files


def _cmd_scan(model, cfg, out: Path) -> list[str]:
    if not isinstance(model, MultiscaleModel):
        raise ConfigError("scan needs a multi-scale model")
    params = cfg["params"]
    scan = decay_scan(model, params["n_max"], SolverConfig(**cfg["solver"]), params.get("period_points"))
    _via_tmp(out / "decay.csv", write_decay_csv, scan)
    rate = None if scan.rate is None else asdict(scan.rate)
    _write_json(out / "rates.json", {
        "rate": rate, "eps_hat": list(scan.eps_hat), "within_hypothesis": scan.within_hypothesis,
    })
    return ["decay.csv", "rates.json"]


def _cmd_pressure(model, cfg, out: Path) -> list[str]:
    params = cfg["params"]
    if isinstance(model, MultiscaleModel):
        model = model.scales[0]
    if not isinstance(model, PotentialExpr):
        raise ConfigError("pressure needs a potential")
    n_range = params.get("n_range")
    z = z_functional(model, params["rho"], n_range, QuadratureConfig(**cfg["quadrature"]),
                     params.get("cocycle_n_max"))
    rows = []
    for label, est in (("2U", z.plus), ("-2U", z.minus)):
        rows += [[label, n, v, N] for n, v, N in zip(est.ns, est.ln_I, est.resolution)]
    _write_rows(out / "pressure.csv", ["potential", "n", "ln_I_n", "resolution"], rows)
    _write_json(out / "z.json", z.to_json())
    return ["pressure.csv", "z.json"]


def _landscape_for(model, params):
    if isinstance(model, MultiscaleModel):
        return as_landscape(model, params.get("n"))
    if isinstance(model, PotentialExpr):
        return as_landscape(model)
    raise ConfigError("this command needs a potential or a multi-scale model")


def _sde_config(cfg, **extra) -> SdeConfig:
    return SdeConfig(seed=cfg["seed"], threads=cfg.get("_threads"), **cfg["sde"], **extra)


def spectral_bounds(model: MultiscaleModel, solver: SolverConfig | None = None) -> tuple[float, float, float, float]:
    """``(lambda_min, lambda_max, rho_min, rho_max)`` over the scales of a model."""
    lams = []
    for U in model.scales:
        if U.d == 1:
            lams += [voigt_reiss(U)] * 2
        else:
            D = effective_diffusivity(U, solver)
            lams += [D.lambda_min, D.lambda_max]
    return min(lams), max(lams), model.rho_min, model.rho_max


def _cmd_exit(model, cfg, out: Path) -> list[str]:
    params = cfg["params"]
    V = _landscape_for(model, params)
    start = params.get("start", "gibbs-ball")
    sde = _sde_config(cfg, drift_sign=float(params.get("drift_sign", -1.0)))
    recs = [mean_exit_time(V, r, start, sde) for r in params["radii"]]
    _write_rows(out / "exit.csv", ["r", "start", "tau_mean", "stderr", "paths", "dt", "censored"],
                [list(rec.row().values()) for rec in recs])
    files = ["exit.csv"]
    if len({rec.r for rec in recs}) >= 3 and min(rec.r for rec in recs) > 1 and all(rec.valid for rec in recs):
        bounds = scales = None
        if isinstance(model, MultiscaleModel) and model.ratios:
            scales = model.R[: (params.get("n", model.n_max) + 1)]
            lo, hi = min(params["radii"]), max(params["radii"])
            if sum(lo <= R <= hi for R in scales) < 2:
                # The exponent fit is only meaningful across two or more scale lengths.
                return files
            bounds = spectral_bounds(model, SolverConfig(**cfg["solver"]))
        fit = exit_exponent_fit(recs, scales, bounds)
        _write_json(out / "fit.json", fit.to_json())
        files.append("fit.json")
    return files


def _cmd_tail(model, cfg, out: Path) -> list[str]:
    params = cfg["params"]
    V = _landscape_for(model, params)
    study = heat_tail(V, params["t_list"], params["r_list"], _sde_config(cfg), params.get("x0"),
                      tuple(params.get("p_range", (0.005, 0.3))))
    _write_rows(out / "tail.csv", ["t", "r", "p_hat", "ci_lo", "ci_hi", "paths"],
                [list(rec.row().values()) for rec in study.records])
    _write_json(out / "fit.json", {"dt": study.dt, "fit": None if study.fit is None else study.fit.to_json()})
    return ["tail.csv", "fit.json"]


def _cmd_verify(model, cfg, out: Path) -> list[str]:
    from .verify import verify_suite, write_verify_outputs

    params = cfg["params"]
    results = verify_suite(params.get("tier", "fast"), params.get("criteria"), seed=cfg["seed"])
    write_verify_outputs(results, out)
    failed = [r.id for r in results if r.gating and not r.passed]
    cfg["_verify_failed"] = failed
    return ["verify.csv"]


_DISPATCH = {
    "diffusivity": _cmd_diffusivity,
    "two-scale": _cmd_two_scale,
    "scan": _cmd_scan,
    "pressure": _cmd_pressure,
    "exit": _cmd_exit,
    "tail": _cmd_tail,
    "verify": _cmd_verify,
}


# ---------------------------------------------------------------------------
# Runs and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Record of one run; ``config`` alone reproduces the output files."""

    config_hash: str
    config: dict
    code_version: str
    started: str
    finished: str
    seconds: float
    outputs: tuple[tuple[str, str], ...]
    directory: str
    failed_criteria: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "code_version": self.code_version,
            "started": self.started,
            "finished": self.finished,
            "seconds": self.seconds,
            "outputs": [{"file": f, "sha256": h} for f, h in self.outputs],
            "failed_criteria": list(self.failed_criteria),
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            config_hash=obj["config_hash"], config=obj["config"], code_version=obj["code_version"],
            started=obj["started"], finished=obj["finished"], seconds=obj["seconds"],
            outputs=tuple((o["file"], o["sha256"]) for o in obj["outputs"]),
            directory=str(path.parent), failed_criteria=tuple(obj.get("failed_criteria", ())),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(config, out_dir=None, seed: int | None = None, threads: int | None = None) -> RunManifest:
    """Validate, resolve and run a config; write outputs and ``manifest.json``.

    Parameters
    ----------
    config : dict or path
        Experiment config (a manifest path also works: its resolved config is
        re-run).
    out_dir : path, optional
        Output directory; defaults to the config's ``output`` entry.
    seed : int, optional
        Overrides the config seed.
    threads : int, optional
        Worker threads for Monte Carlo (does not affect results).
    """
    raw = load_config(config)
    if seed is not None:
        raw = dict(raw, seed=int(seed))
    out = out_dir if out_dir is not None else raw.get("output")
    if out is None:
        raise ConfigError("no output directory given (use --out or the 'output' key)")
    resolved = resolve_config(raw)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(resolved["model"]) if "model" in resolved else None
    started = _now()
    t0 = time.perf_counter()
    work = dict(resolved, _threads=threads)
    files = _DISPATCH[resolved["command"]](model, work, out)
    seconds = time.perf_counter() - t0
    outputs = tuple((f, sha256_file(out / f)) for f in files)
    manifest = RunManifest(
        config_hash=sha256_text(canonical_json(resolved)),
        config=resolved,
        code_version=__version__,
        started=started,
        finished=_now(),
        seconds=round(seconds, 3),
        outputs=outputs,
        directory=str(out),
        failed_criteria=tuple(work.get("_verify_failed", ())),
    )
    _write_json(out / "manifest.json", manifest.to_json())
    return manifest


# ---------------------------------------------------------------------------
# Consolidated reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("model_hash", "model", "command", "params", "table", "key", "column", "value")


def _model_label(ref: dict | None) -> str:
    if ref is None:
        return ""
    if "bundled" in ref:
        extra = ",".join(f"{k}={ref[k]}" for k in ("rho", "n") if k in ref)
        return f"{ref['bundled']}({extra})"
    return next(k for k in ("potential", "multiscale", "pair") if k in ref)


def emit_report(manifests: Sequence, out_dir=None) -> list[dict]:
    """Merge CSV outputs of several runs into one long table.

    Rows are keyed by ``(model hash, command, parameters, table, row key,
    column)``; the row key is the first column of each CSV row.  Identical
    duplicates are merged; differing values for one key raise
    :class:`ConfigError` listing the conflicts.  With ``out_dir`` the table is
    written to ``report.csv`` and ``report.json``.
    """
    table: dict[tuple, dict] = {}
    conflicts = []
    for item in manifests:
        man = item if isinstance(item, RunManifest) else RunManifest.load(item)
        cfg = man.config
        ref = cfg.get("model")
        mhash = sha256_text(canonical_json(ref))[:16] if ref is not None else ""
        params = canonical_json(cfg.get("params", {}))
        for name, _ in man.outputs:
            if not name.endswith(".csv"):
                continue
            with open(Path(man.directory) / name, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if not header:
                    continue
                for row in reader:
                    for col, val in zip(header[1:], row[1:]):
                        key = (mhash, cfg["command"], params, name, row[0], col)
                        entry = dict(zip(REPORT_COLUMNS, (mhash, _model_label(ref), cfg["command"], params,
                                                          name, row[0], col, val)))
                        if key in table and table[key]["value"] != val:
                            conflicts.append(key)
                        table.setdefault(key, entry)
    if conflicts:
        listing = "; ".join("/".join(k[1:]) + f" @ {k[0]}" for k in conflicts[:10])
        raise ConfigError(f"{len(conflicts)} conflicting report entries: {listing}")
    rows = [table[k] for k in sorted(table)]
    if out_dir is not None:
        out = Path(out_dir)
        _write_rows(out / "report.csv", REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS] for r in rows])
        _write_json(out / "report.json", rows)
    return rows
