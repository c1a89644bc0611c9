"""Reading and writing point clouds (PLY, XYZ text) and per-tree reports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .core import CloudLike, PointCloud, as_points
from .errors import ParameterError, ParseError, ValidationError

__all__ = [
    "CloudFile",
    "TreeReport",
    "detect_format",
    "read_cloud",
    "read_vertex_properties",
    "write_cloud",
    "write_report",
    "read_report",
]

CloudFormat = Literal["ply_ascii", "ply_binary_le", "xyz_text"]
FORMATS = ("ply_ascii", "ply_binary_le", "xyz_text")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(frozen=True)
class CloudFile:
    path: Path
    format: CloudFormat

    @classmethod
    def open(cls, path) -> "CloudFile":
        path = Path(path)
        return cls(path, detect_format(path))


def detect_format(path) -> CloudFormat:
    """Sniff the format from the first line; fall back to XYZ text."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head.startswith(b"ply"):
        for line in head.split(b"\n")[1:]:
            line = line.strip()
            if line.startswith(b"format"):
                if line.split()[1:2] == [b"ascii"]:
                    return "ply_ascii"
                if line.split()[1:2] == [b"binary_little_endian"]:
                    return "ply_binary_le"
                raise ParseError(f"{path}: unsupported PLY format line {line.decode(errors='replace')!r}")
        raise ParseError(f"{path}: PLY header without a format line")
    return "xyz_text"


# --------------------------------------------------------------------------
# PLY


@dataclass
class _PlyHeader:
    fmt: str
    n_vertices: int
    properties: list  # (name, numpy type code) for the vertex element
    body_offset: int
    trailing_elements: bool


def _parse_ply_header(data: bytes, path) -> _PlyHeader:
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: PLY header has no end_header")
    nl = data.find(b"\n", end)
    body_offset = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: missing 'ply' magic at line 1")
    fmt = None
    n_vertices = None
    props: list = []
    current = None
    trailing = False
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: unsupported format at line {lineno}: {raw!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{path}: malformed element line {lineno}: {raw!r}")
            current = tok[1]
            if current == "vertex":
                try:
                    n_vertices = int(tok[2])
                except ValueError:
                    raise ParseError(f"{path}: bad vertex count at line {lineno}: {raw!r}") from None
                if n_vertices < 0:
                    raise ParseError(f"{path}: negative vertex count at line {lineno}")
            elif n_vertices is None:
                raise ParseError(f"{path}: element {current!r} before vertex element (line {lineno})")
            else:
                trailing = True
        elif tok[0] == "property":
            if current != "vertex":
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise ParseError(f"{path}: unsupported vertex property at line {lineno}: {raw!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"{path}: unexpected header keyword at line {lineno}: {raw!r}")
    if fmt is None:
        raise ParseError(f"{path}: PLY header without a format line")
    if n_vertices is None:
        raise ParseError(f"{path}: PLY header without a vertex element")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"{path}: vertex element lacks property {axis!r}")
    return _PlyHeader(fmt, n_vertices, props, body_offset, trailing)


def _read_ply(path) -> dict:
    data = Path(path).read_bytes()
    hdr = _parse_ply_header(data, path)
    names = [p[0] for p in hdr.properties]
    if hdr.fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + code) for name, code in hdr.properties])
        body = len(data) - hdr.body_offset
        need = hdr.n_vertices * dtype.itemsize
        if body < need or (body != need and not hdr.trailing_elements):
            raise ParseError(
                f"{path}: vertex count {hdr.n_vertices} needs {need} body bytes "
                f"from byte offset {hdr.body_offset}, found {body}"
            )
        arr = np.frombuffer(data, dtype=dtype, count=hdr.n_vertices, offset=hdr.body_offset)
        out = {name: np.array(arr[name]) for name in names}
        xyz = np.stack([out["x"], out["y"], out["z"]], axis=1).astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
        if len(bad):
            off = hdr.body_offset + int(bad[0]) * dtype.itemsize
            raise ParseError(f"{path}: non-finite coordinate in vertex {bad[0]} at byte offset {off}")
        return out
    # ascii
    text = data[hdr.body_offset:].decode("ascii", errors="replace").splitlines()
    header_lines = data[: hdr.body_offset].count(b"\n")
    rows = []
    lineno = header_lines
    it = iter(text)
    for _ in range(hdr.n_vertices):
        for line in it:
            lineno += 1
            if line.strip():
                break
        else:
            raise ParseError(
                f"{path}: expected {hdr.n_vertices} vertices, body ends after {len(rows)} (line {lineno})"
            )
        tok = line.split()
        if len(tok) != len(names):
            raise ParseError(f"{path}: line {lineno}: expected {len(names)} values, got {len(tok)}")
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric value in {line!r}") from None
        if not all(math.isfinite(vals[names.index(a)]) for a in "xyz"):
            raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
        rows.append(vals)
    if not hdr.trailing_elements:
        for line in it:
            lineno += 1
            if line.strip():
                raise ParseError(
                    f"{path}: line {lineno}: data beyond the declared {hdr.n_vertices} vertices"
                )
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    out = {}
    for col, (name, code) in enumerate(hdr.properties):
        out[name] = table[:, col].astype(code)
    out["x"], out["y"], out["z"] = (table[:, names.index(a)] for a in "xyz")
    return out


# --------------------------------------------------------------------------
# XYZ text


def _read_xyz(path) -> dict:
    rows = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) < 3:
                raise ParseError(f"{path}: line {lineno}: expected 'x y z', got {line!r}")
            try:
                x, y, z = float(tok[0]), float(tok[1]), float(tok[2])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric coordinate in {line!r}") from None
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
                raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append((x, y, z))
    xyz = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return {"x": xyz[:, 0], "y": xyz[:, 1], "z": xyz[:, 2]}


def read_vertex_properties(file) -> dict:
    """All per-vertex properties of a cloud file as numpy arrays, keyed by name."""
    cf = file if isinstance(file, CloudFile) else CloudFile.open(file)
    if not cf.path.exists():
        raise ParseError(f"{cf.path}: no such file")
    if cf.format == "xyz_text":
        return _read_xyz(cf.path)
    return _read_ply(cf.path)


def read_cloud(file) -> PointCloud:
    """Read x/y/z in file order; other properties are ignored."""
    cf = file if isinstance(file, CloudFile) else CloudFile.open(file)
    props = read_vertex_properties(cf)
    xyz = np.stack([props["x"], props["y"], props["z"]], axis=1).astype(np.float64)
    return PointCloud(xyz, frame_note=str(cf.path))


def write_cloud(
    cloud: CloudLike,
    path,
    format: CloudFormat = "ply_binary_le",
    labels: Optional[Sequence[int]] = None,
    extra: Optional[Mapping[str, Sequence[int]]] = None,
) -> None:
    """Write a cloud, optionally with an integer ``cluster`` property per point.

    ``extra`` adds further integer vertex properties by name. Binary PLY
    stores coordinates as doubles so reads are bit-exact. XYZ text cannot
    carry labels.
    """
    if format not in FORMATS:
        raise ParameterError(f"unknown cloud format {format!r}; expected one of {FORMATS}")
    pts = as_points(cloud)
    n = len(pts)
    props = {}
    if labels is not None:
        props["cluster"] = labels
    for name, vals in (extra or {}).items():
        if name in ("x", "y", "z") or name in props or not name.isidentifier():
            raise ParameterError(f"invalid extra property name {name!r}")
        props[name] = vals
    for name in props:
        props[name] = np.asarray(props[name], dtype=np.int32).reshape(-1)
        if len(props[name]) != n:
            raise ParameterError(f"{len(props[name])} {name} values for {n} points")
    path = Path(path)
    try:
        if format == "xyz_text":
            if props:
                raise ParameterError("xyz_text cannot store per-point labels")
            with open(path, "w", encoding="ascii") as fh:
                fh.write("# x y z\n")
                np.savetxt(fh, pts, fmt="%.17g")
            return
        header = ["ply", "format " + ("ascii" if format == "ply_ascii" else "binary_little_endian") + " 1.0",
                  f"element vertex {n}", "property double x", "property double y", "property double z"]
        header += [f"property int {name}" for name in props]
        header.append("end_header")
        head = ("\n".join(header) + "\n").encode("ascii")
        with open(path, "wb") as fh:
            fh.write(head)
            if format == "ply_binary_le":
                desc = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")] + [(name, "<i4") for name in props]
                rec = np.empty(n, dtype=desc)
                rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
                for name, vals in props.items():
                    rec[name] = vals
                fh.write(rec.tobytes())
            else:
                cols = list(props.values())
                lines = []
                for i, (a, b, c) in enumerate(pts):
                    ln = "%r %r %r" % (float(a), float(b), float(c))
                    if cols:
                        ln += " " + " ".join(str(int(col[i])) for col in cols)
                    lines.append(ln)
                if lines:
                    fh.write(("\n".join(lines) + "\n").encode("ascii"))
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class TreeReport:
    """One labelled tree with its canopy volume estimates (m³).

    ``degenerate`` marks trees whose geometry could not be reconstructed; their
    volumes are recorded as 0.
    """

    label: str
    row_id: str
    index_in_row: int
    centroid: tuple
    point_count: int
    convex_hull_volume: float
    alpha_shape_volume: float
    provenance: str
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "centroid", tuple(float(c) for c in self.centroid))
        if len(self.centroid) != 3:
            raise ValidationError(f"{self.label}: centroid must have 3 components")
        if self.provenance not in ("dbscan", "spectral_split"):
            raise ValidationError(f"{self.label}: unknown provenance {self.provenance!r}")
        if self.convex_hull_volume < 0 or self.alpha_shape_volume < 0:
            raise ValidationError(f"{self.label}: negative volume")
        if self.alpha_shape_volume > self.convex_hull_volume + 1e-9:
            raise ValidationError(
                f"{self.label}: alpha-shape volume {self.alpha_shape_volume} exceeds "
                f"convex hull volume {self.convex_hull_volume}"
            )


REPORT_FIELDS = [f.name for f in fields(TreeReport)]


def _check_unique(records: Iterable[TreeReport]) -> None:
    seen = set()
    for rec in records:
        if rec.label in seen:
            raise ValidationError(f"duplicate tree label {rec.label!r}")
        seen.add(rec.label)


def write_report(records: Sequence[TreeReport], path, format: Literal["json", "csv"] = "json") -> None:
    """Serialize tree reports. Floats are written with full repr precision."""
    _check_unique(records)
    path = Path(path)
    if format == "json":
        payload = []
        for rec in records:
            d = asdict(rec)
            d["centroid"] = list(rec.centroid)
            payload.append(d)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    elif format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_FIELDS)
            for rec in records:
                row = []
                for name in REPORT_FIELDS:
                    val = getattr(rec, name)
                    if name == "centroid":
                        val = " ".join(repr(c) for c in val)
                    elif isinstance(val, float):
                        val = repr(val)
                    elif isinstance(val, bool):
                        val = "true" if val else "false"
                    row.append(val)
                writer.writerow(row)
    else:
        raise ParameterError(f"unknown report format {format!r}")


def read_report(path) -> list:
    """Inverse of :func:`write_report`; the format follows the file suffix."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            out = []
            for lineno, row in enumerate(rows, start=2):
                try:
                    out.append(TreeReport(
                        label=row["label"],
                        row_id=row["row_id"],
                        index_in_row=int(row["index_in_row"]),
                        centroid=tuple(float(c) for c in row["centroid"].split()),
                        point_count=int(row["point_count"]),
                        convex_hull_volume=float(row["convex_hull_volume"]),
                        alpha_shape_volume=float(row["alpha_shape_volume"]),
                        provenance=row["provenance"],
                        degenerate=row.get("degenerate", "false").lower() == "true",
                    ))
                except (KeyError, ValueError) as exc:
                    raise ParseError(f"{path}: line {lineno}: {exc}") from None
        else:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
            out = [TreeReport(**{**d, "centroid": tuple(d["centroid"])}) for d in payload]
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    _check_unique(out)
    return out


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
