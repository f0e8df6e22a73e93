"""Point cloud container, PLY reading/writing and exact k-NN search."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InvalidArgument, IoError, ParseError, UnsupportedFormat

_NORMAL_TOL = 1e-6

# PLY scalar type name -> numpy little-endian dtype
_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points in voxel units, optionally with unit normals.

    Arrays are stored as read-only float64 copies.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    bit_depth: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgument(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("points contain non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidArgument("normals must have the same shape as points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > _NORMAL_TOL):
                raise InvalidArgument("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.bit_depth is not None and int(self.bit_depth) <= 0:
            raise InvalidArgument("bit_depth must be positive")

    def __len__(self):
        return self.points.shape[0]

    @property
    def has_normals(self):
        return self.normals is not None

    def with_normals(self, normals):
        return PointCloud(self.points, normals, self.bit_depth)


# ---------------------------------------------------------------------------
# PLY


def _parse_header(f):
    """Parse a PLY header from a binary file object.

    Returns (format, elements) where elements is a list of
    (name, count, [(prop_name, dtype or ("list", count_dtype, item_dtype))]).
    """
    lineno = 0

    def next_line():
        nonlocal lineno
        raw = f.readline()
        lineno += 1
        if not raw:
            raise ParseError("unexpected end of file in header", lineno)
        try:
            return raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ascii header line", lineno) from None

    if next_line() != "ply":
        raise ParseError("missing 'ply' magic", lineno)
    fmt = None
    elements = []
    while True:
        line = next_line()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tokens = line.split()
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3:
                raise ParseError("malformed format line", lineno)
            if tokens[1] == "binary_big_endian":
                raise UnsupportedFormat("binary_big_endian PLY is not supported")
            if tokens[1] not in ("ascii", "binary_little_endian") or tokens[2] != "1.0":
                raise ParseError(f"unknown format {tokens[1]} {tokens[2]}", lineno)
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", lineno) from None
            if count < 0:
                raise ParseError("negative element count", lineno)
            elements.append((tokens[1], count, []))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            if len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif (len(tokens) == 5 and tokens[1] == "list"
                  and tokens[2] in _PLY_TYPES and tokens[3] in _PLY_TYPES):
                elements[-1][2].append(
                    (tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            else:
                raise ParseError(f"malformed property line {line!r}", lineno)
        else:
            raise ParseError(f"unknown header keyword {key!r}", lineno)
    if fmt is None:
        raise ParseError("header has no format line", lineno)
    return fmt, elements, lineno


def _skip_binary_element(f, count, props):
    if any(isinstance(t, tuple) for _, t in props):
        for _ in range(count):
            for _, t in props:
                if isinstance(t, tuple):
                    cdt = np.dtype(t[1])
                    raw = f.read(cdt.itemsize)
                    if len(raw) < cdt.itemsize:
                        raise ParseError("truncated binary body")
                    n = int(np.frombuffer(raw, cdt)[0])
                    f.read(n * np.dtype(t[2]).itemsize)
                else:
                    f.read(np.dtype(t).itemsize)
    else:
        size = sum(np.dtype(t).itemsize for _, t in props)
        f.read(size * count)


def read_ply(path) -> PointCloud:
    """Read vertex positions (and normals when present) from a PLY file."""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    with f:
        fmt, elements, header_lines = _parse_header(f)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise ParseError("no 'vertex' element in header")
        vi = names.index("vertex")
        _, n, props = elements[vi]
        pnames = [p for p, _ in props]
        for axis in "xyz":
            if axis not in pnames:
                raise ParseError(f"vertex element lacks property {axis!r}")
        if any(isinstance(t, tuple) for _, t in props):
            raise UnsupportedFormat("list properties on vertices are not supported")
        if n == 0:
            raise EmptyInput("PLY file contains zero vertices")

        if fmt == "ascii":
            lineno = header_lines
            skip = sum(e[1] for e in elements[:vi])
            rows = []
            for raw in f:
                lineno += 1
                line = raw.decode("ascii", errors="replace").strip()
                if not line:
                    continue
                if skip:
                    skip -= 1
                    continue
                tokens = line.split()
                if len(tokens) < len(props):
                    raise ParseError(
                        f"expected {len(props)} values, got {len(tokens)}", lineno)
                rows.append(tokens[: len(props)])
                if len(rows) == n:
                    break
            if len(rows) < n:
                raise ParseError(f"header declares {n} vertices, body has {len(rows)}",
                                 lineno)
            try:
                table = np.array(rows, dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric vertex value: {exc}") from None
            cols = {p: table[:, i] for i, p in enumerate(pnames)}
        else:
            for name, count, eprops in elements[:vi]:
                _skip_binary_element(f, count, eprops)
            dtype = np.dtype([(p, t) for p, t in props])
            raw = f.read(dtype.itemsize * n)
            if len(raw) < dtype.itemsize * n:
                raise ParseError(
                    f"header declares {n} vertices, body has {len(raw) // dtype.itemsize}")
            table = np.frombuffer(raw, dtype=dtype)
            cols = {p: table[p].astype(np.float64) for p in pnames}

    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        lengths = np.linalg.norm(nrm, axis=1)
        if np.all(lengths > 0) and np.all(np.isfinite(lengths)):
            normals = nrm / lengths[:, None]
    if not np.all(np.isfinite(points)):
        raise ParseError("non-finite vertex coordinates")
    return PointCloud(points, normals)


def write_ply(pc: PointCloud, path, format="ascii"):
    """Write a point cloud as PLY.

    ASCII output stores doubles with round-trip precision; binary output
    stores 32-bit little-endian floats.
    """
    if len(pc) == 0:
        raise EmptyInput("cannot write an empty point cloud")
    if format not in ("ascii", "binary_little_endian"):
        raise InvalidArgument(f"unknown PLY format {format!r}")
    ascii_out = format == "ascii"
    scalar = "double" if ascii_out else "float"
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if pc.has_normals else [])
    header = ["ply", f"format {format} 1.0", f"element vertex {len(pc)}"]
    header += [f"property {scalar} {p}" for p in props]
    header.append("end_header")
    data = pc.points if not pc.has_normals else np.hstack([pc.points, pc.normals])
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if ascii_out:
                lines = (" ".join(repr(float(v)) for v in row) for row in data)
                f.write(("\n".join(lines) + "\n").encode("ascii"))
            else:
                f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def list_ply(directory):
    """Sorted PLY paths in a directory (non-recursive)."""
    return sorted(os.path.join(directory, p) for p in os.listdir(directory)
                  if p.lower().endswith(".ply"))


# ---------------------------------------------------------------------------
# k-NN


class SpatialIndex:
    """Exact k-nearest-neighbour index over a fixed point set.

    Results equal a brute-force scan sorted by (squared distance, index).
    """

    # relative slack when deciding whether the k-th and (k+1)-th candidates tie
    _TIE_RTOL = 1e-9

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise EmptyInput("cannot index an empty point set")
        self.points = pts
        self.points.setflags(write=False)
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return self.points.shape[0]

    def _sqdist(self, idx, q):
        return ((self.points[idx] - q[:, None, :]) ** 2).sum(axis=-1)

    def query(self, queries, k=1):
        """Batched exact k-NN.

        Returns (indices, squared_distances), both of shape (m, k), each
        row ascending by distance with ties broken by lowest index.
        """
        n = len(self)
        if k < 1 or k > n:
            raise InvalidArgument(f"k={k} outside [1, {n}]")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        m = q.shape[0]
        kq = min(n, k + 1)
        dist, idx = self._tree.query(q, k=kq)
        dist = dist.reshape(m, kq)
        idx = idx.reshape(m, kq)

        out_idx = np.empty((m, k), dtype=np.intp)
        out_d2 = np.empty((m, k), dtype=np.float64)

        # Candidate sets are already exact unless a near-tie straddles position k.
        radius = dist[:, k - 1] * (1 + self._TIE_RTOL) + 1e-12
        if kq > k:
            ambiguous = dist[:, k] <= radius
        else:
            ambiguous = np.zeros(m, dtype=bool)

        clean = ~ambiguous
        if np.any(clean):
            ci = idx[clean, :k]
            cd = self._sqdist(ci, q[clean])
            order = np.lexsort((ci, cd), axis=-1)
            out_idx[clean] = np.take_along_axis(ci, order, axis=1)
            out_d2[clean] = np.take_along_axis(cd, order, axis=1)

        for row in np.flatnonzero(ambiguous):
            cand = np.asarray(self._tree.query_ball_point(q[row], radius[row]), dtype=np.intp)
            d2 = ((self.points[cand] - q[row]) ** 2).sum(axis=-1)
            order = np.lexsort((cand, d2))[:k]
            out_idx[row] = cand[order]
            out_d2[row] = d2[order]
        return out_idx, out_d2


def build_index(pc) -> SpatialIndex:
    points = pc.points if isinstance(pc, PointCloud) else pc
    return SpatialIndex(points)


def nearest_neighbors(index: SpatialIndex, q, k=1):
    """List of (point index, squared distance) for the k nearest points to q."""
    idx, d2 = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(d)) for i, d in zip(idx[0], d2[0])]
