"""Run configuration (TOML), bit-exact field files, and report writers."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import FormatError, ParseError, ValidationError
from .grid import GridSpec, OneForm, ScalarField, TwoForm
from .solver import SolverConfig

# --------------------------------------------------------------------------
# field files

MAGIC = "AKCY-FIELD 1"
_KINDS = {"scalar": (ScalarField, 1), "1-form": (OneForm, 4), "2-form": (TwoForm, 6)}
_DTYPE = np.dtype("<f8")


def _kind_of(fld) -> str:
    for name, (cls, _) in _KINDS.items():
        if type(fld) is cls:
            return name
    raise FormatError(f"cannot serialize {type(fld).__name__}")


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_field(fld) -> bytes:
    kind = _kind_of(fld)
    ncomp = _KINDS[kind][1]
    grid = fld.grid
    header = "\n".join([
        MAGIC,
        f"kind: {kind}",
        f"components: {ncomp}",
        "dims: " + " ".join(str(n) for n in grid.dims),
        "periods: " + " ".join(float(p).hex() for p in grid.periods),
        "dtype: f64",
        "byteorder: little-endian",
        "layout: C-order, axis 0 slowest",
        "end",
        "",
    ])
    payload = np.ascontiguousarray(fld.data, dtype=_DTYPE).tobytes(order="C")
    return header.encode("ascii") + payload


def decode_field(blob: bytes):
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError("header is not terminated by 'end'")
        try:
            line = blob[pos:nl].decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError("header is not ASCII") from exc
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
        if len(lines) > 32:
            raise FormatError("header too long")
    if not lines or lines[0] != MAGIC:
        raise FormatError(f"bad magic line (expected {MAGIC!r})")
    meta = {}
    for line in lines[1:]:
        key, sep, val = line.partition(": ")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        meta[key] = val
    expected = {"kind", "components", "dims", "periods", "dtype", "byteorder", "layout"}
    if set(meta) != expected:
        raise FormatError(f"header keys {sorted(meta)} differ from {sorted(expected)}")
    if meta["kind"] not in _KINDS:
        raise FormatError(f"unknown field kind {meta['kind']!r}")
    cls, ncomp = _KINDS[meta["kind"]]
    if (meta["dtype"], meta["byteorder"], meta["layout"]) != ("f64", "little-endian", "C-order, axis 0 slowest"):
        raise FormatError("unsupported dtype, byte order or layout")
    try:
        if int(meta["components"]) != ncomp:
            raise FormatError(f"{meta['kind']} needs {ncomp} components, header says {meta['components']}")
        dims = tuple(int(v) for v in meta["dims"].split())
        periods = tuple(float.fromhex(v) for v in meta["periods"].split())
        grid = GridSpec(dims, periods)
    except ValueError as exc:
        raise FormatError(f"bad grid description: {exc}") from exc
    shape = dims if ncomp == 1 else (ncomp,) + dims
    need = math.prod(shape) * 8
    payload = blob[pos:]
    if len(payload) != need:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {need}")
    data = np.frombuffer(payload, dtype=_DTYPE).reshape(shape).astype(np.float64)
    return cls(grid, data)


def save_field(path, fld) -> None:
    atomic_write(path, encode_field(fld))


def load_field(path):
    """Read a field file; OSError propagates, format problems raise FormatError."""
    return decode_field(Path(path).read_bytes())


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StructureConfig:
    kind: str = "standard"       # standard | perturbed | file
    amplitude: float = 0.1
    seed: int = 0
    kmax: int = 1
    path: Path | None = None      # 2-form omega; J by polar retraction


@dataclass(frozen=True)
class RhsConfig:
    kind: str = "zero"            # zero | manufactured | file
    epsilon: float = 0.5
    mode: int = 1
    path: Path | None = None


@dataclass(frozen=True)
class TameConfig:
    omega_path: Path | None = None   # taming form; default: seeded test form
    amplitude: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec.cube(16))
    structure: StructureConfig = StructureConfig()
    rhs: RhsConfig = RhsConfig()
    solver: SolverConfig = SolverConfig()
    tame: TameConfig = TameConfig()
    output: Path = Path("akcy-out")
    seed: int = 0


_SECTIONS = {"grid", "structure", "rhs", "solver", "output", "tame", "run"}
_GRID_KEYS = {"dims", "n", "periods"}


def _check_keys(table: dict, allowed, where: str):
    for key in table:
        if key not in allowed:
            raise ParseError(f"unknown key '{where}.{key}'" if where else f"unknown section '{key}'")


def _typed(table, key, kind, where, default):
    if key not in table:
        return default
    val = table[key]
    ok = isinstance(val, kind) and not (kind in (int, float) and isinstance(val, bool))
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val, ok = float(val), True
    if not ok:
        raise ParseError(f"'{where}.{key}' must be of type {kind.__name__}, got {type(val).__name__}")
    return val


def _path(table, key, where, base: Path):
    val = _typed(table, key, str, where, None)
    if val is None:
        return None
    p = Path(val)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ValidationError(f"'{where}.{key}': file {p} does not exist")
    return p


def config_from_dict(doc: dict, base: Path = Path(".")) -> RunConfig:
    _check_keys(doc, _SECTIONS, "")
    g = doc.get("grid", {})
    _check_keys(g, _GRID_KEYS, "grid")
    if "dims" in g and "n" in g:
        raise ParseError("give either 'grid.dims' or 'grid.n', not both")
    if "dims" in g:
        dims = _typed(g, "dims", list, "grid", None)
        if len(dims) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in dims):
            raise ValidationError("'grid.dims' must be a list of 4 integers")
    else:
        dims = [_typed(g, "n", int, "grid", 16)] * 4
    periods = _typed(g, "periods", list, "grid", [2 * math.pi] * 4)
    if len(periods) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in periods):
        raise ValidationError("'grid.periods' must be a list of 4 numbers")
    for n in dims:
        if n < 4 or n % 2:
            raise ValidationError(f"'grid.dims' entries must be even and >= 4, got {dims}")
    if any(p <= 0 for p in periods):
        raise ValidationError(f"'grid.periods' must be positive, got {periods}")
    grid = GridSpec(tuple(dims), tuple(float(p) for p in periods))

    s = doc.get("structure", {})
    _check_keys(s, {f.name for f in fields(StructureConfig)}, "structure")
    kind = _typed(s, "kind", str, "structure", "standard")
    if kind not in ("standard", "perturbed", "file"):
        raise ValidationError(f"'structure.kind' must be standard, perturbed or file, got {kind!r}")
    amp = _typed(s, "amplitude", float, "structure", 0.1)
    if not 0 <= amp < 1:
        raise ValidationError(f"'structure.amplitude' must lie in [0, 1), got {amp}")
    structure = StructureConfig(kind, amp, _typed(s, "seed", int, "structure", 0),
                                _typed(s, "kmax", int, "structure", 1),
                                _path(s, "path", "structure", base))
    if kind == "file" and structure.path is None:
        raise ValidationError("'structure.path' is required for kind = 'file'")

    r = doc.get("rhs", {})
    _check_keys(r, {f.name for f in fields(RhsConfig)}, "rhs")
    rkind = _typed(r, "kind", str, "rhs", "zero")
    if rkind not in ("zero", "manufactured", "file"):
        raise ValidationError(f"'rhs.kind' must be zero, manufactured or file, got {rkind!r}")
    eps = _typed(r, "epsilon", float, "rhs", 0.5)
    if not 0 <= eps < 1:
        raise ValidationError(f"'rhs.epsilon' must lie in [0, 1) so that 1 - eps sin > 0, got {eps}")
    mode = _typed(r, "mode", int, "rhs", 1)
    if not 1 <= mode < grid.dims[0] // 2:
        raise ValidationError(f"'rhs.mode' must be resolved on the grid, got {mode}")
    rhs = RhsConfig(rkind, eps, mode, _path(r, "path", "rhs", base))
    if rkind == "file" and rhs.path is None:
        raise ValidationError("'rhs.path' is required for kind = 'file'")

    sv = doc.get("solver", {})
    _check_keys(sv, {f.name for f in fields(SolverConfig)}, "solver")
    kw = {}
    for f_ in fields(SolverConfig):
        typ = {"newton_max": int, "dealias": bool}.get(f_.name, float)
        if f_.name in sv:
            kw[f_.name] = _typed(sv, f_.name, typ, "solver", None)
    solver = SolverConfig(**kw)

    t = doc.get("tame", {})
    _check_keys(t, {f.name for f in fields(TameConfig)}, "tame")
    tame = TameConfig(_path(t, "omega_path", "tame", base), _typed(t, "amplitude", float, "tame", 0.05))

    o = doc.get("output", {})
    _check_keys(o, {"dir"}, "output")
    out = Path(_typed(o, "dir", str, "output", "akcy-out"))
    if not out.is_absolute():
        out = base / out
    run = doc.get("run", {})
    _check_keys(run, {"seed"}, "run")
    return RunConfig(grid, structure, rhs, solver, tame, out, _typed(run, "seed", int, "run", 0))


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base=path.parent)


# --------------------------------------------------------------------------
# reports

CSV_HEADER = "step,t,newton_iters,residual_linf,residual_l2,min_a1,max_trace,phi_linf"


def convergence_csv(records) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow([r.step, repr(r.t), r.newton_iters, repr(r.residual_linf), repr(r.residual_l2),
                    repr(r.min_a1), repr(r.max_trace), repr(r.phi_linf)])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, doc: dict) -> None:
    doc = {"schema": 1, **doc}
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    atomic_write(path, text.encode("utf-8"))


def write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))
