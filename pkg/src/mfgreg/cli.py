"""Command-line driver: TOML run configs, the ``solve``/``diagnose``/``probe``/``export`` commands and their files.

Exit status is 0 on success, 1 on a config or input error, 2 when the
continuation does not converge (artifacts are still written) and 3 when a
pass/fail probe fails.
"""

from __future__ import annotations

import argparse
import ast
import csv
import hashlib
import json
import math
import operator
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .diagnostics import diagnose, energy_report, minty_residual, monotonicity_probe, pde_residuals
from .fields import FieldError, SpaceTimeField, SpaceTimeGrid, TimeGrid, TorusGrid
from .fixedpoint import FixedPointOpts, default_schedule, epsilon_continuation, normalize
from .problem import (
    CouplingSpec,
    HamiltonianSpec,
    MFGProblem,
    ProblemError,
    RegularizationConfig,
    assumption_probe,
)
from .subsolvers import IterationLimitError, LinearOptions, VIOptions

__all__ = [
    "ConfigError",
    "InputError",
    "RunConfig",
    "Expression",
    "compile_expression",
    "load_config",
    "shipped_config",
    "shipped_config_names",
    "field_columns",
    "write_fields_csv",
    "read_fields_csv",
    "read_fields",
    "export_fields",
    "run_directory",
    "main",
    "EXIT_OK",
    "EXIT_INPUT",
    "EXIT_NOT_CONVERGED",
    "EXIT_PROBE",
    "OUTPUT_ENV",
]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
EXIT_PROBE = 3

OUTPUT_ENV = "MFGREG_OUTPUT_DIR"
FIELDS_FILE = "fields.csv"
EXPORT_FORMATS = ("csv", "json", "npz")
PROBE_NAMES = ("assumptions", "monotonicity")

# pass/fail thresholds on relative sampled minima
MONOTONICITY_TOL = 1e-8
MINTY_TOL = 1e-4

SAMPLING_NOTE = (
    "minima are taken over finite seeded samples of test functions; "
    "they corroborate the inequalities but cannot prove them"
)


class ConfigError(ValueError):
    """Bad run configuration; ``key`` is the dotted config key, ``line`` its line when known."""

    def __init__(self, key: str, message: str, line: int | None = None, path: str | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{where}{key}: {message}")
        self.key = key
        self.message = message
        self.line = line
        self.path = path


class InputError(ValueError):
    """Unreadable or inconsistent field file; ``row`` is the 1-based file line when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


# ----------------------------------------------------------------------------
# inline expressions
# ----------------------------------------------------------------------------

_FUNCTIONS = {"sin": np.sin, "cos": np.cos}
_CONSTANTS = {"pi": math.pi}
_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}


class Expression:
    """Closed-form data ``f(*variables)`` from the restricted grammar.

    Allowed: real literals, ``pi``, the declared variables, ``+ - * / **``,
    unary signs, parentheses and ``sin``/``cos`` of one argument.
    """

    def __init__(self, text: str, variables: tuple[str, ...], key: str = "expression"):
        self.text = text
        self.variables = variables
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(key, f"cannot parse expression {text!r}: {exc.msg}") from None
        self._check(tree.body, key)
        self._tree = tree.body

    def _check(self, node, key):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigError(key, f"only real literals are allowed, got {node.value!r}")
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in _CONSTANTS:
                allowed = ", ".join(self.variables + tuple(_CONSTANTS))
                raise ConfigError(key, f"unknown name {node.id!r} (allowed: {allowed})")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINARY:
                raise ConfigError(key, f"operator {type(node.op).__name__} is not allowed")
            self._check(node.left, key)
            self._check(node.right, key)
        elif isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNARY:
                raise ConfigError(key, f"operator {type(node.op).__name__} is not allowed")
            self._check(node.operand, key)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ConfigError(key, f"only {sorted(_FUNCTIONS)} may be called")
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(key, f"{node.func.id} takes exactly one argument")
            self._check(node.args[0], key)
        else:
            raise ConfigError(key, f"{type(node).__name__} is not part of the expression grammar")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTANTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        return _FUNCTIONS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, *args):
        env = dict(zip(self.variables, (np.asarray(a, dtype=float) for a in args)))
        with np.errstate(all="ignore"):
            return np.asarray(self._eval(self._tree, env), dtype=float)

    def __repr__(self):
        return f"Expression({self.text!r}, {self.variables})"


def compile_expression(text: str, variables: tuple[str, ...], key: str = "expression") -> Expression:
    return Expression(text, variables, key)


# ----------------------------------------------------------------------------
# config schema
# ----------------------------------------------------------------------------

# value kinds: int, float, bool, str, data (number or expression), floats, strs
_SCHEMA: dict = {
    "problem": {
        "dimension": "int",
        "horizon": "float",
        "diffusion": "data",
        "potential": "data",
        "initial_density": "data",
        "terminal_cost": "data",
        "density_cap": "float",
        "congestion_floor": "float",
        "hamiltonian": {
            "variant": "str",
            "gamma": "float",
            "tau": "float",
            "coefficient": "data",
            "drift": "data",
        },
        "coupling": {
            "r": "float",
            "local_scale": "float",
            "nonlocal": "str",
            "kernel": "str",
            "kernel_width": "float",
            "nonlocal_scale": "float",
            "nonlocal_exponent": "float",
            "allow_nonmonotone": "bool",
        },
    },
    "grid": {"time_nodes": "int", "space_points": "int", "k": "int"},
    "regularization": {"schedule": "floats", "sigma": "data", "xi": "data"},
    "solver": {
        "method": "str",
        "tol": "float",
        "damping": "float",
        "anderson": "int",
        "max_iter": "int",
        "newton_max_iter": "int",
        "vi_method": "str",
        "linear_method": "str",
    },
    "diagnostics": {
        "seed": "int",
        "samples": "int",
        "probe_samples": "int",
        "probes": "strs",
        "residual_directions": "int",
    },
    "output": {"directory": "str", "formats": "strs"},
}


def _locate(text: str, dotted: str) -> int | None:
    """Line of ``dotted`` in TOML source, by table headers and ``key =`` lines."""
    parts = dotted.split(".")
    table, key = parts[:-1], parts[-1]
    current: list[str] = []
    header_line = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line.startswith("[") and line.endswith("]"):
            current = [p.strip() for p in line.strip("[]").split(".")]
            if current == parts:
                header_line = no
            continue
        if "=" in line:
            name = line.split("=", 1)[0].strip().strip('"')
            if current + name.split(".") == parts or (current == table and name == key):
                return no
    return header_line


def _kind_ok(value, kind: str) -> bool:
    number = isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return number
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind == "data":
        return number or isinstance(value, str) or (
            isinstance(value, list) and all(_kind_ok(v, "data") and not isinstance(v, list) for v in value)
        )
    if kind == "floats":
        return isinstance(value, list) and all(_kind_ok(v, "float") for v in value)
    if kind == "strs":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    raise AssertionError(kind)


def _validate_tree(data: dict, schema: dict, prefix: str, fail):
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            fail(dotted, f"unknown key (expected one of {sorted(schema)})")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                fail(dotted, "must be a table")
            _validate_tree(value, expected, dotted + ".", fail)
        elif not _kind_ok(value, expected):
            fail(dotted, f"expected {expected}, got {type(value).__name__} {value!r}")


# ----------------------------------------------------------------------------
# run configuration
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class RunConfig:
    """A parsed, validated run: problem, regularization, schedule and driver settings."""

    path: str
    text: str
    digest: str
    data: dict
    problem: MFGProblem
    reg: RegularizationConfig
    schedule: list
    solver: FixedPointOpts
    seed: int = 0
    samples: int = 50
    probe_samples: int = 200
    probes: tuple = PROBE_NAMES
    residual_directions: int = 0
    output_dir: str | None = None
    formats: tuple = ("csv",)
    overrides: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        """Directory name: hash of the config bytes plus any command-line overrides."""
        if not self.overrides:
            return self.digest[:12]
        extra = json.dumps(self.overrides, sort_keys=True).encode()
        return hashlib.sha256(self.text.encode() + b"\0" + extra).hexdigest()[:12]

    @property
    def smallest_epsilon(self) -> float:
        return self.schedule[-1]


def shipped_config_names() -> list[str]:
    root = resources.files("mfgreg") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def shipped_config(name: str) -> Path:
    """Path of a packaged example config (``trivial``, ``nonlocal``, ...)."""
    path = resources.files("mfgreg") / "configs" / f"{name}.toml"
    if not path.is_file():
        raise ConfigError("config", f"no shipped config named {name!r} (have {shipped_config_names()})")
    return Path(str(path))


def _data(value, key: str, variables: tuple[str, ...]):
    if isinstance(value, str):
        return compile_expression(value, variables, key)
    if isinstance(value, list):
        parts = [_data(v, f"{key}[{i}]", variables) for i, v in enumerate(value)]

        def stacked(*coords):
            shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
            cols = [np.broadcast_to(p(*coords) if callable(p) else p, shape) for p in parts]
            return np.stack(cols, axis=-1)

        return stacked
    return float(value)


def _parse_eps(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError("--eps", f"cannot parse {text!r} as a list of reals") from None
    return vals


def _check_schedule(schedule, key, fail):
    if not schedule:
        fail(key, "the eps schedule is empty")
    if any(not (0 < e < 1) for e in schedule):
        fail(key, f"every eps must lie in (0, 1), got {schedule}")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        fail(key, f"the eps schedule must be strictly decreasing, got {schedule}")


def load_config(path, eps: list[float] | None = None, seed: int | None = None) -> RunConfig:
    """Parse and validate a TOML run config.

    ``path`` may also name a shipped config.  ``eps`` and ``seed`` override
    the schedule and the diagnostics seed.  Every failure is a
    :class:`ConfigError` naming the dotted key and, when it can be found,
    its line.
    """
    p = Path(path)
    if not p.exists() and not p.suffix and str(path) in shipped_config_names():
        p = shipped_config(str(path))
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
        data = tomllib.loads(text)
    except UnicodeDecodeError:
        raise ConfigError("config", "not UTF-8 text", path=str(p)) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("syntax", str(exc), path=str(p)) from None

    def fail(key, message):
        raise ConfigError(key, message, _locate(text, key), str(p))

    _validate_tree(data, _SCHEMA, "", fail)
    prob = data.get("problem", {})
    ham = prob.get("hamiltonian", {})
    coup = prob.get("coupling", {})
    grid_cfg = data.get("grid", {})
    reg_cfg = data.get("regularization", {})
    solv = data.get("solver", {})
    diag = data.get("diagnostics", {})
    out = data.get("output", {})

    dim = prob.get("dimension", 1)
    space_vars = ("x",) if dim == 1 else tuple(f"x{i + 1}" for i in range(dim))
    st_vars = ("t",) + space_vars
    k = grid_cfg.get("k", 3)
    try:
        grid = SpaceTimeGrid(
            TimeGrid(float(prob.get("horizon", 1.0)), grid_cfg.get("time_nodes", 24), order=max(6, 2 * k)),
            TorusGrid(dim, grid_cfg.get("space_points", 24)),
        )
    except FieldError as exc:
        msg = str(exc)
        key = "problem.dimension" if "dimension" in msg else (
            "problem.horizon" if "horizon" in msg else ("grid.time_nodes" if "time" in msg else "grid.space_points")
        )
        fail(key, msg)

    def sp(key, default=0.0):
        return _data(prob.get(key, default), f"problem.{key}", space_vars)

    try:
        hamiltonian = HamiltonianSpec(
            variant=ham.get("variant", "quadratic"),
            coefficient=_data(ham.get("coefficient", 1.0), "problem.hamiltonian.coefficient", space_vars),
            drift=_data(ham.get("drift", 0.0), "problem.hamiltonian.drift", space_vars),
            gamma=float(ham.get("gamma", 2.0)),
            tau=float(ham.get("tau", 0.5)),
        )
        coupling = CouplingSpec(
            r=float(coup.get("r", 1.0)),
            nonlocal_variant=coup.get("nonlocal", "off"),
            kernel=coup.get("kernel", "gaussian"),
            kernel_width=float(coup.get("kernel_width", 0.1)),
            nonlocal_scale=float(coup.get("nonlocal_scale", 1.0)),
            nonlocal_exponent=float(coup.get("nonlocal_exponent", 0.5)),
            local_scale=float(coup.get("local_scale", 1.0)),
            allow_nonmonotone=coup.get("allow_nonmonotone", False),
        )
        if coupling.nonlocal_variant != "off":
            coupling.resolve_kernel(grid.torus)
        problem = MFGProblem(
            grid,
            hamiltonian=hamiltonian,
            coupling=coupling,
            diffusion=sp("diffusion"),
            potential=_data(prob.get("potential", 0.0), "problem.potential", st_vars),
            initial_density=sp("initial_density", 1.0),
            terminal_cost=sp("terminal_cost"),
            density_cap=prob.get("density_cap"),
            congestion_floor=prob.get("congestion_floor"),
        )
        schedule = list(eps) if eps is not None else [float(e) for e in reg_cfg.get("schedule", default_schedule())]
        _check_schedule(schedule, "--eps" if eps is not None else "regularization.schedule", fail)
        reg = RegularizationConfig(
            schedule[0],
            k=k,
            sigma=_data(reg_cfg.get("sigma", 0.0), "regularization.sigma", st_vars),
            xi=_data(reg_cfg.get("xi", 0.0), "regularization.xi", st_vars),
        )
        reg.sampled(grid)
    except ConfigError as exc:
        if exc.path:
            raise
        fail(exc.key, exc.message)
    except ProblemError as exc:
        key = exc.key if exc.key.startswith("regularization") else f"problem.{exc.key}"
        key = {"problem.coupling.nonlocal_variant": "problem.coupling.nonlocal"}.get(key, key)
        fail(key, exc.message)

    def build(key, make):
        try:
            return make()
        except ValueError as exc:
            fail(key, str(exc))

    vi = build("solver.vi_method", lambda: VIOptions(method=solv.get("vi_method", "interior-point")))
    linear = build("solver.linear_method", lambda: LinearOptions(method=solv.get("linear_method", "direct")))
    for key in ("max_iter", "newton_max_iter"):
        if solv.get(key, 1) < 1:
            fail(f"solver.{key}", "must be positive")
    if not solv.get("tol", 1e-6) > 0:
        fail("solver.tol", "must be positive")
    for key, default in (("damping", 0.5), ("anderson", 0), ("method", "newton")):
        opts = {key: solv.get(key, default)}
        build(f"solver.{key}", lambda: FixedPointOpts(**opts))
    solver = FixedPointOpts(
        damping=float(solv.get("damping", 0.5)),
        tol=float(solv.get("tol", 1e-6)),
        max_iter=solv.get("max_iter", 500),
        anderson=solv.get("anderson", 0),
        method=solv.get("method", "newton"),
        newton_max_iter=solv.get("newton_max_iter", 80),
        vi=vi,
        linear=linear,
    )

    probes = tuple(diag.get("probes", PROBE_NAMES))
    for name in probes:
        if name not in PROBE_NAMES:
            fail("diagnostics.probes", f"unknown probe {name!r} (have {PROBE_NAMES})")
    formats = tuple(out.get("formats", ("csv",)))
    for name in formats:
        if name not in EXPORT_FORMATS:
            fail("output.formats", f"unknown format {name!r} (have {EXPORT_FORMATS})")
    for key in ("samples", "probe_samples"):
        if diag.get(key, 1) < 1:
            fail(f"diagnostics.{key}", "must be positive")
    if diag.get("residual_directions", 0) < 0:
        fail("diagnostics.residual_directions", "must be nonnegative")
    base_seed = diag.get("seed", 0)
    if not 0 <= base_seed < 2**64:
        fail("diagnostics.seed", "must be an unsigned 64-bit integer")

    overrides = {}
    if eps is not None:
        overrides["eps"] = schedule
    if seed is not None:
        overrides["seed"] = int(seed)
    return RunConfig(
        path=str(p),
        text=text,
        digest=hashlib.sha256(raw).hexdigest(),
        data=data,
        problem=problem,
        reg=reg,
        schedule=schedule,
        solver=solver,
        seed=int(seed) if seed is not None else base_seed,
        samples=diag.get("samples", 50),
        probe_samples=diag.get("probe_samples", 200),
        probes=probes,
        residual_directions=diag.get("residual_directions", 0),
        output_dir=out.get("directory"),
        formats=formats,
        overrides=overrides,
    )


def run_directory(cfg: RunConfig, out: str | None = None) -> Path:
    """``--out``, else the env override, else ``output.directory``, else ``runs``; then the run id."""
    base = out or os.environ.get(OUTPUT_ENV) or cfg.output_dir or "runs"
    return Path(base) / cfg.run_id


# ----------------------------------------------------------------------------
# field files
# ----------------------------------------------------------------------------


def field_columns(dim: int) -> tuple[str, ...]:
    space = ("x",) if dim == 1 else tuple(f"x{i + 1}" for i in range(dim))
    return ("t",) + space + ("m", "u", "u_tilde")


def _table(grid: SpaceTimeGrid, m, u, u_tilde) -> np.ndarray:
    nt, size = grid.flat_shape
    t = np.repeat(grid.time.nodes, size)
    x = np.tile(grid.torus.points, (nt, 1))
    vals = [grid.flatten(np.asarray(getattr(f, "flat", f)).reshape(nt, size)).ravel() for f in (m, u, u_tilde)]
    return np.column_stack([t, x] + vals)


def write_fields_csv(path, grid: SpaceTimeGrid, m, u, u_tilde) -> Path:
    """One row per node, time-major, 17 significant digits (exact round trip)."""
    path = Path(path)
    table = _table(grid, m, u, u_tilde)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(field_columns(grid.torus.dim)) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")
    return path


def _match_grid(cols: dict, grid: SpaceTimeGrid, source: str):
    nt, size = grid.flat_shape
    n = len(cols["t"])
    if n != nt * size:
        raise InputError(f"{source}: grid mismatch: {n} rows, the config declares {nt} x {size} = {nt * size}")
    zero = np.zeros(grid.flat_shape)
    expect = _table(grid, zero, zero, zero)
    names = field_columns(grid.torus.dim)
    for j, name in enumerate(names[: 1 + grid.torus.dim]):
        bad = np.flatnonzero(np.abs(cols[name] - expect[:, j]) > 1e-12 * (1 + np.abs(expect[:, j])))
        if bad.size:
            raise InputError(
                f"{source}: grid mismatch in column {name!r} at row {bad[0] + 2}: "
                f"{cols[name][bad[0]]!r} vs declared {expect[bad[0], j]!r}",
                row=int(bad[0]) + 2,
            )


def read_fields_csv(path, grid: SpaceTimeGrid | None = None) -> dict:
    """Columns of a field CSV as float arrays; ``grid`` checks node count and coordinates.

    Errors name the 1-based file line (the header is line 1).
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot read: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file", row=1)
        header = tuple(h.strip() for h in header)
        valid = {field_columns(d) for d in (1, 2)}
        if header not in valid:
            raise InputError(
                f"{path}: row 1: header must be {','.join(field_columns(1))} (or t,x1,x2,m,u,u_tilde), "
                f"got {','.join(header)}",
                row=1,
            )
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(f"{path}: row {row_no}: expected {len(header)} values, got {len(row)}", row=row_no)
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise InputError(f"{path}: row {row_no}: non-numeric value in {row!r}", row=row_no) from None
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}: row {row_no}: non-finite value", row=row_no)
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows", row=2)
    arr = np.array(rows)
    cols = {name: arr[:, j].copy() for j, name in enumerate(header)}
    if grid is not None:
        if len(header) != len(field_columns(grid.torus.dim)):
            raise InputError(f"{path}: grid mismatch: file is {len(header) - 4}-d, config is {grid.torus.dim}-d")
        _match_grid(cols, grid, str(path))
    return cols


def export_fields(cols: dict, path, fmt: str) -> Path:
    """Write field columns as ``csv``, ``json`` (repr floats) or ``npz``; all round-trip exactly."""
    path = Path(path)
    names = list(cols)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(",".join(names) + "\n")
            np.savetxt(fh, np.column_stack([cols[n] for n in names]), fmt="%.17g", delimiter=",")
    elif fmt == "json":
        payload = {"columns": names, "data": {n: [float(v) for v in cols[n]] for n in names}}
        path.write_text(json.dumps(payload) + "\n")
    elif fmt == "npz":
        with open(path, "wb") as fh:
            np.savez(fh, **{n: cols[n] for n in names})
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def read_fields(path, grid: SpaceTimeGrid | None = None) -> dict:
    """Read any exported field file, dispatching on the suffix."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_fields_csv(path, grid)
    try:
        if path.suffix == ".json":
            payload = json.loads(path.read_text())
            cols = {n: np.array(payload["data"][n], dtype=float) for n in payload["columns"]}
        elif path.suffix == ".npz":
            with np.load(path) as npz:
                cols = {n: npz[n].copy() for n in npz.files}
        else:
            raise InputError(f"{path}: unknown field file type {path.suffix!r}")
    except (OSError, KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: cannot read field file: {exc}") from None
    if grid is not None:
        _match_grid(cols, grid, str(path))
    return cols


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


def _jsonable(obj):
    """Plain JSON types; non-finite floats become ``null``."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    return obj


def _schema(name: str) -> dict:
    return json.loads((resources.files("mfgreg") / "schemas" / f"{name}.schema.json").read_text())


def _write_json(path: Path, payload: dict, schema: str) -> dict:
    payload = _jsonable(payload)
    jsonschema.validate(payload, _schema(schema))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(run_dir: Path, cfg: RunConfig, command: str, started: str, table: list | None):
    path = run_dir / "manifest.json"
    if table is None and path.exists():
        table = json.loads(path.read_text()).get("epsilons", [])
    files = {}
    for f in sorted(run_dir.rglob("*")):
        if f.is_file() and f != path:
            files[f.relative_to(run_dir).as_posix()] = {"sha256": _sha256(f), "bytes": f.stat().st_size}
    manifest = {
        "config_hash": cfg.digest,
        "config_path": cfg.path,
        "run_id": cfg.run_id,
        "overrides": cfg.overrides,
        "version": __version__,
        "command": command,
        "started": started,
        "finished": _now(),
        "epsilons": table or [],
        "files": files,
    }
    _write_json(path, manifest, "manifest")


def _grid_block(cfg: RunConfig) -> dict:
    g = cfg.problem.grid
    return {
        "dimension": g.torus.dim,
        "horizon": g.time.horizon,
        "time_nodes": g.time.node_count,
        "space_points": g.torus.points_per_dim,
        "k": cfg.reg.k,
    }


class _Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def say(self, msg: str):
        if not self.quiet:
            print(msg, flush=True)

    @staticmethod
    def error(msg: str):
        print(f"error: {msg}", file=sys.stderr, flush=True)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def _solve(cfg: RunConfig, run_dir: Path, con: _Console):
    """Run the continuation and write fields, report and manifest; returns ``(status, solution)``."""
    started = _now()
    run_dir.mkdir(parents=True, exist_ok=True)
    con.say(f"solving {cfg.path} -> {run_dir} (eps {', '.join(f'{e:g}' for e in cfg.schedule)})")
    try:
        ws = epsilon_continuation(cfg.problem, cfg.schedule, cfg.solver, cfg.reg)
    except IterationLimitError as exc:
        ws, failure = None, str(exc)
    else:
        failure = ws.failure
    table = []
    report = {
        "kind": "solve",
        "version": __version__,
        "config_hash": cfg.digest,
        "run_id": cfg.run_id,
        "grid": _grid_block(cfg),
        "schedule": cfg.schedule,
        "epsilons": table,
        "converged": False,
        "truncated": True,
        "failure": failure,
        "max_mass_deviation": None,
        "mu": None,
        "mu_deviation_max": None,
        "energy": None,
        "residuals": None,
        "fields": None,
    }
    if ws is not None:
        for rec in ws.history:
            row = {
                "epsilon": rec.epsilon,
                "converged": rec.converged,
                "residual": rec.residual,
                "iterations": rec.iterations,
                "mass_deviation": rec.mass_deviation,
                "density_min": float(np.min(rec.m.flat)),
                "density_max": float(np.max(rec.m.flat)),
                "du_lgamma": rec.du_lgamma,
                "energy_m": rec.energy_m,
                "energy_u": rec.energy_u,
            }
            table.append(row)
            con.say(
                f"  eps={rec.epsilon:.3g} converged={rec.converged} residual={rec.residual:.2e} "
                f"iterations={rec.iterations} mass_dev={rec.mass_deviation:.2e}"
            )
        last = ws.history[-1]
        reg_last = cfg.reg.with_epsilon(last.epsilon)
        u_solver = last.u
        write_fields_csv(run_dir / FIELDS_FILE, cfg.problem.grid, last.m, u_solver, ws.u_tilde)
        report.update(
            converged=not ws.truncated and all(r.converged for r in ws.history),
            truncated=ws.truncated,
            max_mass_deviation=last.mass_deviation,
            mu=ws.mu,
            mu_deviation_max=float(np.max(ws.mu_deviation)),
            energy=energy_report(last.m, u_solver, cfg.problem, reg_last),
            residuals=asdict(pde_residuals(last.m, u_solver, cfg.problem, reg_last)),
            fields=FIELDS_FILE,
        )
    _write_json(run_dir / "report.json", report, "report")
    _write_manifest(
        run_dir, cfg, "solve", started,
        [{k: r[k] for k in ("epsilon", "converged", "residual", "iterations")} for r in table],
    )
    status = EXIT_OK if report["converged"] else EXIT_NOT_CONVERGED
    if status:
        con.error(f"not converged: {failure}")
    else:
        con.say(f"converged; max mass deviation {report['max_mass_deviation']:.3e} at eps={cfg.smallest_epsilon:g}")
    return status, ws


def cmd_solve(cfg: RunConfig, args, con: _Console) -> int:
    status, _ = _solve(cfg, run_directory(cfg, args.out), con)
    return status


def cmd_diagnose(cfg: RunConfig, args, con: _Console) -> int:
    run_dir = run_directory(cfg, args.out)
    started = _now()
    status = EXIT_OK
    grid = cfg.problem.grid
    if args.fields:
        cols = read_fields(args.fields, grid)
        source = str(args.fields)
        m = cols["m"].reshape(grid.flat_shape)
        u = cols["u"].reshape(grid.flat_shape)
    else:
        status, ws = _solve(cfg, run_dir, con)
        if ws is None:
            return status
        source = "solve"
        m, u = ws.history[-1].m.flat, ws.history[-1].u.flat
    run_dir.mkdir(parents=True, exist_ok=True)
    eps = cfg.smallest_epsilon
    reg = cfg.reg.with_epsilon(eps)
    con.say(f"diagnosing {source} at eps={eps:g} ({cfg.samples} samples, seed {cfg.seed})")
    rep = diagnose(m, u, cfg.problem, reg, samples=cfg.samples, seed=cfg.seed)
    checks = {"monotonicity": bool(rep.monotonicity.f_relative >= -MONOTONICITY_TOL)}
    if rep.minty is not None:
        checks["minty"] = bool(rep.minty.relative >= -MINTY_TOL)
    payload = {
        "kind": "diagnose",
        "version": __version__,
        "config_hash": cfg.digest,
        "source": source,
        "epsilon": eps,
        "seed": cfg.seed,
        "samples": cfg.samples,
        "sampled": True,
        "note": SAMPLING_NOTE,
        "tolerances": {"monotonicity": MONOTONICITY_TOL, "minty": MINTY_TOL},
        "checks": checks,
        "report": rep.as_dict(),
        "residual_directions": None,
    }
    if cfg.residual_directions:
        m_f = SpaceTimeField(grid, m)
        extra = minty_residual(
            m_f, normalize(SpaceTimeField(grid, u)), cfg.problem, cfg.residual_directions, cfg.seed,
            include_candidate=False, residual_directions=cfg.residual_directions,
        )
        payload["residual_directions"] = {
            "value": extra.value, "scale": extra.scale, "relative": extra.relative, "samples": extra.samples,
        }
    _write_json(run_dir / "diagnostics.json", payload, "diagnostics")
    _write_manifest(run_dir, cfg, "diagnose", started, None)
    for name, ok in checks.items():
        con.say(f"  {name}: {'pass' if ok else 'FAIL'}")
    con.say(f"wrote {run_dir / 'diagnostics.json'}")
    return status


def cmd_probe(cfg: RunConfig, args, con: _Console) -> int:
    run_dir = run_directory(cfg, args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    flags = {}
    payload = {
        "kind": "probe",
        "version": __version__,
        "config_hash": cfg.digest,
        "seed": cfg.seed,
        "samples": cfg.probe_samples,
        "sampled": True,
        "note": SAMPLING_NOTE,
        "assumptions": None,
        "monotonicity": None,
    }
    if "assumptions" in cfg.probes:
        ap = assumption_probe(cfg.problem, samples=cfg.probe_samples, seed=cfg.seed)
        payload["assumptions"] = ap.as_dict()
        flags.update({f"assumptions.{k}": v for k, v in ap.flags.items()})
    if "monotonicity" in cfg.probes:
        mono = monotonicity_probe(cfg.problem, cfg.reg, samples=cfg.probe_samples, seed=cfg.seed)
        payload["monotonicity"] = {
            "f_min": mono.f_min,
            "f_scale": mono.f_scale,
            "relative": mono.f_relative,
            "regularized_gap_min": mono.gap_min,
            "epsilon": cfg.reg.epsilon,
            "samples": mono.samples,
        }
        flags["monotonicity.f"] = bool(mono.f_relative >= -MONOTONICITY_TOL)
        flags["monotonicity.regularized_gap"] = bool(mono.gap_min >= 0.0)
    payload["flags"] = flags
    payload["passed"] = all(flags.values())
    _write_json(run_dir / "probe.json", payload, "probe")
    _write_manifest(run_dir, cfg, "probe", started, None)
    for name, ok in flags.items():
        con.say(f"  {name}: {'pass' if ok else 'FAIL'}")
    if not payload["passed"]:
        con.error("probe failed: " + ", ".join(k for k, v in flags.items() if not v))
        return EXIT_PROBE
    return EXIT_OK


def cmd_export(cfg: RunConfig, args, con: _Console) -> int:
    run_dir = run_directory(cfg, args.out)
    source = Path(args.fields) if args.fields else run_dir / FIELDS_FILE
    if not source.exists():
        raise InputError(f"{source}: no field file; run `mfgreg solve` first or pass --fields")
    cols = read_fields(source, cfg.problem.grid)
    started = _now()
    dest = run_dir / "export"
    dest.mkdir(parents=True, exist_ok=True)
    for fmt in args.format or cfg.formats:
        path = export_fields(cols, dest / f"fields.{fmt}", fmt)
        con.say(f"wrote {path}")
    _write_manifest(run_dir, cfg, "export", started, None)
    return EXIT_OK


_COMMANDS = {"solve": cmd_solve, "diagnose": cmd_diagnose, "probe": cmd_probe, "export": cmd_export}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the config/input status instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        val = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {val}")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run config, or the name of a shipped config")
    common.add_argument("--out", help=f"output base directory (overrides ${OUTPUT_ENV} and output.directory)")
    common.add_argument("--seed", type=_u64, help="diagnostics seed, overrides diagnostics.seed")
    common.add_argument("--eps", help="eps schedule, comma separated, overrides regularization.schedule")
    common.add_argument("--quiet", action="store_true", help="print errors only")
    parser = _Parser(prog="mfgreg", description="Regularized monotone mean-field game solver.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("solve", parents=[common], help="run the eps continuation and write fields and report")
    p = sub.add_parser("diagnose", parents=[common], help="run the diagnostics suite on a solution")
    p.add_argument("--fields", help="field CSV to diagnose; solves first when omitted")
    sub.add_parser("probe", parents=[common], help="sample the structural assumptions and monotonicity")
    p = sub.add_parser("export", parents=[common], help="re-export a field file as csv, json or npz")
    p.add_argument("--fields", help="field file to export; defaults to the run directory's fields.csv")
    p.add_argument("--format", nargs="+", choices=EXPORT_FORMATS, help="formats, default output.formats")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    con = _Console(args.quiet)
    try:
        eps = _parse_eps(args.eps) if args.eps is not None else None
        cfg = load_config(args.config, eps=eps, seed=args.seed)
        return _COMMANDS[args.command](cfg, args, con)
    except (ConfigError, InputError) as exc:
        con.error(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
