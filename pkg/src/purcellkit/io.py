"""File formats: stack descriptions, TOML configs, CSV tables and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError
from .tmm import LayerStack

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


# --------------------------------------------------------------------------
# stack files


def parse_stack(text: str, path=None) -> LayerStack:
    """Parse the line-oriented stack format.

    Directives (one per line, ``#`` starts a comment)::

        ambient <index>
        substrate <index>
        layer <index> <thickness_nm>
        repeat <count>
          ...layer lines...
        end

    Layers are listed in deposition order, substrate first.
    """
    ambient, substrate = 1.0, None
    layers: list = []
    block: list | None = None
    repeat_count = 0
    repeat_line = None
    name = ""

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if raw.strip().startswith("#") and not name and lineno == 1:
                name = raw.strip("# \t")
            continue
        tokens = line.split()
        key, args = tokens[0].lower(), tokens[1:]
        try:
            if key in ("ambient", "substrate"):
                if len(args) != 1:
                    raise ValueError(f"'{key}' takes exactly one index")
                value = float(args[0])
                if value < 1:
                    raise ValueError(f"{key} index {value} < 1")
                if key == "ambient":
                    ambient = value
                else:
                    substrate = value
            elif key == "layer":
                if len(args) != 2:
                    raise ValueError("'layer' takes an index and a thickness in nm")
                n, t = float(args[0]), float(args[1])
                if not (math.isfinite(n) and math.isfinite(t)):
                    raise ValueError("non-finite layer value")
                if n < 1:
                    raise ValueError(f"layer index {n} < 1")
                if t <= 0:
                    raise ValueError(f"layer thickness {t} nm must be > 0")
                (block if block is not None else layers).append((n, t))
            elif key == "repeat":
                if block is not None:
                    raise ValueError("nested 'repeat' blocks are not supported")
                if len(args) != 1 or not args[0].isdigit() or int(args[0]) < 1:
                    raise ValueError("'repeat' takes a positive integer count")
                block, repeat_count, repeat_line = [], int(args[0]), lineno
            elif key == "end":
                if block is None:
                    raise ValueError("'end' without 'repeat'")
                layers.extend(block * repeat_count)
                block = None
            else:
                raise ValueError(f"unknown directive {tokens[0]!r}")
        except ValueError as exc:
            raise ParseError(f"{exc}: {raw.strip()!r}", path, lineno) from None

    if block is not None:
        raise ParseError("unterminated 'repeat' block", path, repeat_line)
    if substrate is None:
        raise ParseError("missing 'substrate' directive", path)
    return LayerStack(ambient, tuple(layers), substrate, name=name)


def load_stack(path) -> LayerStack:
    path = Path(path)
    return parse_stack(path.read_text(), path)


def format_stack(stack: LayerStack) -> str:
    lines = [f"# {stack.name}"] if stack.name else []
    lines += [f"ambient {stack.ambient_index:g}", f"substrate {stack.substrate_index:g}"]
    lines += [f"layer {n:g} {t:g}" for n, t in stack.layers]
    return "\n".join(lines) + "\n"


def reference_stack(which: str) -> LayerStack:
    """Bundled reference coatings: ``'fiber'`` or ``'planar'``."""
    files = {"fiber": "fiber_mirror.stack", "planar": "planar_mirror.stack"}
    if which not in files:
        raise KeyError(f"unknown reference stack {which!r}; choose from {sorted(files)}")
    return load_stack(DATA_DIR / files[which])


# --------------------------------------------------------------------------
# configs


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        lineno = getattr(exc, "lineno", None)
        raise ParseError(str(exc), path, lineno) from None


def require(mapping: dict, key: str, kind=float, where: str = "config"):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required key {key!r}")
    try:
        return kind(mapping[key])
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: key {key!r} must be {kind.__name__}") from None


# --------------------------------------------------------------------------
# manifests


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def digest(obj) -> str:
    """Short SHA-256 digest of a JSON-serializable object."""
    blob = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# CSV


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, header, rows, manifest: str | None = None, comments=()) -> Path:
    """Write a CSV table preceded by ``#`` comment lines (manifest first)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    if manifest is not None:
        buf.write(f"# manifest: {manifest}\n")
    for c in comments:
        buf.write(f"# {c}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path, required=()) -> dict:
    """Read a CSV written by :func:`write_csv` into a dict of numpy columns.

    Non-numeric columns are returned as lists of strings.  Raises
    :class:`SchemaError` if the file is empty or lacks ``required`` columns.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: empty table")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; found {header}")
    raw = list(reader)
    for i, row in enumerate(raw, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}: data row {i} has {len(row)} fields, expected {len(header)}")
    cols = {}
    for j, name in enumerate(header):
        values = [row[j] for row in raw]
        try:
            cols[name] = np.array([float(v) for v in values])
        except ValueError:
            cols[name] = values
    return cols


def read_manifest_tag(path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# manifest:"):
        return first.split(":", 1)[1].strip()
    return None


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_canonical(obj), indent=2, sort_keys=True) + "\n")
    return path
