"""Triangle meshes: I/O, normalisation, point sampling and inside tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

__all__ = [
    "MeshError",
    "MeshParseError",
    "NotWatertightError",
    "TriangleMesh",
    "Transform",
    "PointSamples",
    "SpatialIndex",
    "load_mesh",
    "save_obj",
    "save_ply",
    "normalize_to_unit_cube",
    "sample_surface",
    "sample_interior",
    "is_inside",
    "nearest_distance",
    "icosphere",
    "box_mesh",
    "torus_mesh",
]


class MeshError(ValueError):
    pass


class MeshParseError(MeshError):
    """Malformed mesh file; carries the 1-based line or the byte offset."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class NotWatertightError(MeshError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise MeshError("need exactly one normal per vertex")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError(
                    f"face index out of range [0, {len(self.vertices)})"
                )
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face with repeated vertex index")

    @property
    def triangles(self) -> np.ndarray:
        """``(F, 3, 3)`` corner coordinates."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed volume; positive for outward-oriented closed meshes."""
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise MeshError("empty mesh")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def boundary_edge_count(self) -> int:
        """Number of undirected edges not shared by exactly two faces."""
        if "bad_edges" not in self._cache:
            e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
            _, counts = np.unique(e, axis=0, return_counts=True)
            self._cache["bad_edges"] = int(np.count_nonzero(counts != 2))
        return self._cache["bad_edges"]

    def is_watertight(self) -> bool:
        return len(self.faces) > 0 and self.boundary_edge_count() == 0

    def require_watertight(self):
        if not self.is_watertight():
            raise NotWatertightError(
                f"mesh is not watertight ({self.boundary_edge_count()} edges not shared by two faces)"
            )

    def transformed(self, transform: "Transform") -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.faces.copy(),
                            None if self.normals is None else self.normals.copy())

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy(),
                            None if self.normals is None else self.normals.copy())


@dataclass(frozen=True)
class Transform:
    """``x' = scale * x + translation`` (uniform scale)."""

    scale: float
    translation: tuple

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.translation)

    def inverse(self) -> "Transform":
        t = np.asarray(self.translation)
        return Transform(1.0 / self.scale, tuple(float(v) for v in -t / self.scale))

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d) -> "Transform":
        return cls(float(d["scale"]), tuple(float(v) for v in d["translation"]))


def normalize_to_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, Transform]:
    """Center the bounding box at the origin and scale its longest side to 1."""
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    scale = 1.0 / extent
    center = 0.5 * (lo + hi)
    tf = Transform(scale, tuple(float(v) for v in -center * scale))
    return mesh.transformed(tf), tf


# -- file I/O ------------------------------------------------------------------


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY (ASCII or binary little-endian) triangle mesh."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshParseError(f"unsupported mesh format {suffix!r}", path)


def _obj_index(token, n, path, lineno):
    try:
        idx = int(token)
    except ValueError:
        raise MeshParseError(f"bad index {token!r}", path, line=lineno) from None
    if idx == 0:
        raise MeshParseError("OBJ indices are 1-based; found 0", path, line=lineno)
    return idx - 1 if idx > 0 else n + idx


def _load_obj(path) -> TriangleMesh:
    verts, vnormals, faces, face_vn = [], [], [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag in ("v", "vn"):
                try:
                    xyz = [float(v) for v in parts[1:4]]
                except ValueError:
                    raise MeshParseError(f"bad {tag} record", path, line=lineno) from None
                if len(xyz) != 3:
                    raise MeshParseError(f"{tag} record needs 3 coordinates", path, line=lineno)
                (verts if tag == "v" else vnormals).append(xyz)
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshParseError("face with fewer than 3 vertices", path, line=lineno)
                vi, ni = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi.append(_obj_index(fields[0], len(verts), path, lineno))
                    if len(fields) == 3 and fields[2]:
                        ni.append(_obj_index(fields[2], len(vnormals), path, lineno))
                for j in range(1, len(vi) - 1):
                    faces.append((vi[0], vi[j], vi[j + 1]))
                    if len(ni) == len(vi):
                        face_vn.append((ni[0], ni[j], ni[j + 1]))
                for idx in vi:
                    if not 0 <= idx < len(verts):
                        raise MeshParseError(f"vertex index {idx + 1} out of range", path, line=lineno)
    normals = None
    if vnormals:
        vnormals = np.asarray(vnormals, dtype=np.float64)
        if face_vn and len(face_vn) == len(faces):
            normals = np.zeros((len(verts), 3))
            fv = np.asarray(faces).ravel()
            fn = np.asarray(face_vn).ravel()
            if fn.max() >= len(vnormals):
                raise MeshParseError("normal index out of range", path)
            normals[fv] = vnormals[fn]
        elif len(vnormals) == len(verts):
            normals = vnormals
    try:
        return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                            np.asarray(faces, dtype=np.int64).reshape(-1, 3), normals)
    except MeshError as exc:
        raise MeshParseError(str(exc), path) from None


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshParseError("missing ply magic or end_header", path, offset=0)
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, list_count_dtype or None)])
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError("property before element", path, line=lineno)
            try:
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], _PLY_TYPES[parts[3]], _PLY_TYPES[parts[2]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
            except (KeyError, IndexError):
                raise MeshParseError(f"bad property line {line!r}", path, line=lineno) from None
    if fmt == "binary_big_endian":
        raise MeshParseError("big-endian PLY is not supported", path)
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"unknown PLY format {fmt!r}", path)

    verts = normals = faces = None
    if fmt == "ascii":
        lines = data[body_start:].decode("ascii", errors="replace").splitlines()
        first_line = len(header) + 2
        pos = 0
        for name, count, props in elements:
            rows = []
            for j in range(count):
                if pos >= len(lines):
                    raise MeshParseError(f"unexpected end of file in element {name}", path,
                                         line=first_line + pos)
                try:
                    rows.append([float(v) for v in lines[pos].split()])
                except ValueError:
                    raise MeshParseError("bad number", path, line=first_line + pos) from None
                pos += 1
            if name == "vertex":
                verts, normals = _ply_vertex_columns(props, rows, path)
            elif name == "face":
                faces = _ply_ascii_faces(rows, path, first_line + pos - count)
    else:
        offset = body_start
        for name, count, props in elements:
            if all(p[2] is None for p in props):
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                nbytes = dt.itemsize * count
                if offset + nbytes > len(data):
                    raise MeshParseError(f"truncated element {name}", path, offset=offset)
                arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
                offset += nbytes
                if name == "vertex":
                    verts, normals = _ply_vertex_columns(props, arr, path)
            else:
                rows, offset = _ply_binary_lists(data, offset, count, props, path)
                if name == "face":
                    faces = rows
    if verts is None:
        raise MeshParseError("no vertex element", path)
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    try:
        return TriangleMesh(verts, faces, normals)
    except MeshError as exc:
        raise MeshParseError(str(exc), path) from None


def _ply_vertex_columns(props, rows, path):
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise MeshParseError("vertex element lacks x/y/z", path)
    if isinstance(rows, np.ndarray) and rows.dtype.names:
        col = lambda n: np.asarray(rows[n], dtype=np.float64)
    else:
        arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
        col = lambda n: arr[:, names.index(n)]
    verts = np.stack([col("x"), col("y"), col("z")], axis=1)
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([col("nx"), col("ny"), col("nz")], axis=1)
    return verts, normals


def _fan(poly):
    return [(poly[0], poly[j], poly[j + 1]) for j in range(1, len(poly) - 1)]


def _ply_ascii_faces(rows, path, first_line):
    faces = []
    for j, row in enumerate(rows):
        n = int(row[0])
        if len(row) < n + 1 or n < 3:
            raise MeshParseError("bad face record", path, line=first_line + j)
        faces.extend(_fan([int(v) for v in row[1:n + 1]]))
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _ply_binary_lists(data, offset, count, props, path):
    """Parse an element containing list properties; returns the first list as faces."""
    # fast path: exactly one property, a list of three indices per row
    if len(props) == 1:
        _, idt, cdt = props[0]
        dt = np.dtype([("n", "<" + cdt), ("i", "<" + idt, (3,))])
        if offset + dt.itemsize * count <= len(data):
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            if np.all(arr["n"] == 3):
                return arr["i"].astype(np.int64), offset + dt.itemsize * count
    faces = []
    for _ in range(count):
        first = None
        for name, vdt, cdt in props:
            if cdt is None:
                offset += np.dtype(vdt).itemsize
                continue
            csize = np.dtype(cdt).itemsize
            if offset + csize > len(data):
                raise MeshParseError("truncated list", path, offset=offset)
            n = int(np.frombuffer(data, dtype="<" + cdt, count=1, offset=offset)[0])
            offset += csize
            vsize = np.dtype(vdt).itemsize * n
            if offset + vsize > len(data):
                raise MeshParseError("truncated list", path, offset=offset)
            vals = np.frombuffer(data, dtype="<" + vdt, count=n, offset=offset)
            offset += vsize
            if first is None:
                first = vals
        if first is not None:
            if len(first) < 3:
                raise MeshParseError("face with fewer than 3 vertices", path, offset=offset)
            faces.extend(_fan([int(v) for v in first]))
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3), offset


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write ``v``/``f`` records only (1-based indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def save_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    has_n = mesh.normals is not None
    props = "property double x\nproperty double y\nproperty double z\n"
    if has_n:
        props += "property double nx\nproperty double ny\nproperty double nz\n"
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(mesh.vertices)}\n{props}"
        f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    cols = np.hstack([mesh.vertices, mesh.normals]) if has_n else mesh.vertices
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
            rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            for row in cols:
                fh.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# -- sampling ------------------------------------------------------------------


@dataclass
class PointSamples:
    """Points with optional unit normals and source-face ids."""

    positions: np.ndarray
    normals: np.ndarray | None = None
    source_faces: np.ndarray | None = None
    acceptance_rate: float | None = None

    def __len__(self):
        return len(self.positions)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> PointSamples:
    """Area-weighted uniform samples with flat-shaded face normals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not len(mesh.faces):
        raise MeshError("empty mesh")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(mesh.face_areas())
    if cdf[-1] <= 0:
        raise MeshError("mesh has zero area")
    face = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    face = np.minimum(face, len(cdf) - 1)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = mesh.triangles[face]
    pos = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return PointSamples(pos, mesh.face_normals()[face], face)


def sample_interior(mesh: TriangleMesh, n: int, seed: int = 0, *,
                    max_proposals: int = 10_000_000) -> PointSamples:
    """Rejection-sample ``n`` points uniformly from the solid bounded by ``mesh``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mesh.require_watertight()
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bounds()
    tester = _inside_tester(mesh)
    kept = []
    total = accepted = 0
    batch = max(1024, 2 * n)
    while accepted < n:
        if total >= max_proposals:
            rate = accepted / total
            if rate < 1e-4:
                raise MeshError(f"interior acceptance rate {rate:.2e} after {total} proposals")
        cand = lo + rng.random((batch, 3)) * (hi - lo)
        inside = tester(cand)
        total += batch
        kept.append(cand[inside])
        accepted += int(inside.sum())
    pts = np.concatenate(kept)[:n]
    return PointSamples(pts, acceptance_rate=accepted / total)


# -- inside test ---------------------------------------------------------------
#
# Parity of crossings along the +x ray.  Triangles are projected onto the (y, z)
# plane and the point-in-triangle test uses simulation of simplicity: the query
# is treated as displaced by (eps, eps^2) in (y, z).  Every shared edge is
# evaluated with canonically ordered endpoints, so a ray through an edge or a
# vertex is counted exactly once for a closed surface.


@njit(cache=True, inline="always")
def _edge_sign(py, pz, qy, qz, ty, tz):
    # orient(P, Q, T) on canonically ordered endpoints, sign only, with SoS tie-break
    swap = (qy < py) or (qy == py and qz < pz)
    if swap:
        py, qy = qy, py
        pz, qz = qz, pz
    e = (qy - py) * (tz - pz) - (qz - pz) * (ty - py)
    if e > 0:
        s = 1
    elif e < 0:
        s = -1
    elif qz != pz:
        s = -1 if qz > pz else 1
    else:
        s = 1 if qy > py else -1
    return -s if swap else s


@njit(cache=True, inline="always")
def _orient(py, pz, qy, qz, ty, tz):
    return (qy - py) * (tz - pz) - (qz - pz) * (ty - py)


@njit(parallel=True, cache=True)
def _parity_kernel(points, tri, y0, z0, cell, ny, nz, starts, items):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for p in prange(n):
        px = points[p, 0]
        py = points[p, 1]
        pz = points[p, 2]
        cy = int(math.floor((py - y0) / cell))
        cz = int(math.floor((pz - z0) / cell))
        if cy < 0 or cz < 0 or cy >= ny or cz >= nz:
            continue
        c = cy * nz + cz
        crossings = 0
        for j in range(starts[c], starts[c + 1]):
            t = items[j]
            ay = tri[t, 0, 1]
            az = tri[t, 0, 2]
            by = tri[t, 1, 1]
            bz = tri[t, 1, 2]
            qy = tri[t, 2, 1]
            qz = tri[t, 2, 2]
            s0 = _edge_sign(by, bz, qy, qz, py, pz)
            s1 = _edge_sign(qy, qz, ay, az, py, pz)
            s2 = _edge_sign(ay, az, by, bz, py, pz)
            if s0 != s1 or s1 != s2:
                continue
            w0 = _orient(by, bz, qy, qz, py, pz)
            w1 = _orient(qy, qz, ay, az, py, pz)
            w2 = _orient(ay, az, by, bz, py, pz)
            den = w0 + w1 + w2
            if den == 0.0:
                continue
            xh = (w0 * tri[t, 0, 0] + w1 * tri[t, 1, 0] + w2 * tri[t, 2, 0]) / den
            if xh > px:
                crossings += 1
        out[p] = (crossings & 1) == 1
    return out


class _InsideTester:
    def __init__(self, mesh: TriangleMesh):
        mesh.require_watertight()
        tri = np.ascontiguousarray(mesh.triangles)
        yz = tri[:, :, 1:]
        area2 = ((yz[:, 1, 0] - yz[:, 0, 0]) * (yz[:, 2, 1] - yz[:, 0, 1])
                 - (yz[:, 1, 1] - yz[:, 0, 1]) * (yz[:, 2, 0] - yz[:, 0, 0]))
        keep = np.flatnonzero(area2 != 0.0)  # faces parallel to the ray never cross it
        lo = yz.reshape(-1, 2).min(axis=0)
        hi = yz.reshape(-1, 2).max(axis=0)
        side = max(float((hi - lo).max()), 1e-300)
        g = max(1, int(math.sqrt(max(len(keep), 1))))
        cell = side / g * (1 + 1e-9)
        ny = nz = g
        tmin = yz[keep].min(axis=1)
        tmax = yz[keep].max(axis=1)
        cy0 = np.floor((tmin[:, 0] - lo[0]) / cell).astype(np.int64).clip(0, ny - 1)
        cy1 = np.floor((tmax[:, 0] - lo[0]) / cell).astype(np.int64).clip(0, ny - 1)
        cz0 = np.floor((tmin[:, 1] - lo[1]) / cell).astype(np.int64).clip(0, nz - 1)
        cz1 = np.floor((tmax[:, 1] - lo[1]) / cell).astype(np.int64).clip(0, nz - 1)
        cells, owners = [], []
        for t, a, b, c, d in zip(keep, cy0, cy1, cz0, cz1):
            yy, zz = np.meshgrid(np.arange(a, b + 1), np.arange(c, d + 1), indexing="ij")
            ids = (yy * nz + zz).ravel()
            cells.append(ids)
            owners.append(np.full(len(ids), t))
        cells = np.concatenate(cells) if cells else np.zeros(0, np.int64)
        owners = np.concatenate(owners) if owners else np.zeros(0, np.int64)
        order = np.argsort(cells, kind="stable")
        self.items = np.ascontiguousarray(owners[order])
        self.starts = np.zeros(ny * nz + 1, dtype=np.int64)
        np.add.at(self.starts, cells + 1, 1)
        self.starts = np.cumsum(self.starts)
        self.tri = tri
        self.y0, self.z0, self.cell, self.ny, self.nz = float(lo[0]), float(lo[1]), cell, ny, nz

    def __call__(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return _parity_kernel(pts, self.tri, self.y0, self.z0, self.cell, self.ny, self.nz,
                              self.starts, self.items)


def _inside_tester(mesh: TriangleMesh) -> _InsideTester:
    if "inside" not in mesh._cache:
        mesh._cache["inside"] = _InsideTester(mesh)
    return mesh._cache["inside"]


def is_inside(mesh: TriangleMesh, x):
    """Ray-parity inside test; raises :class:`NotWatertightError` for open meshes.

    Accepts one point or an ``(N, 3)`` array. Exact for points off the surface.
    """
    arr = np.asarray(x, dtype=np.float64)
    res = _inside_tester(mesh)(arr)
    return bool(res[0]) if arr.ndim == 1 else res


# -- nearest neighbours --------------------------------------------------------


class SpatialIndex:
    """Exact Euclidean nearest-neighbour queries; ties go to the lowest point id."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if not len(self.points):
            raise ValueError("SpatialIndex needs at least one point")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, x, k_check: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Distances and ids of the nearest indexed point for each query."""
        q = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        k = min(k_check, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        # recompute with one fixed formula so results match a plain scan bit-for-bit
        d = _distances(q, self.points, idx)
        best = np.lexsort((idx, d), axis=-1)[:, 0]
        rows = np.arange(len(q))
        dist, ids = d[rows, best], idx[rows, best]
        # a tie may extend beyond the k candidates; widen the search for those rows
        if k < len(self.points):
            unsure = np.flatnonzero(d[:, -1] <= dist)
            for r in unsure:
                cand = np.asarray(self._tree.query_ball_point(q[r], dist[r] * (1 + 1e-12) + 1e-300))
                dc = _distances(q[r:r + 1], self.points, cand[None, :])[0]
                j = np.lexsort((cand, dc))[0]
                dist[r], ids[r] = dc[j], cand[j]
        return dist, ids.astype(np.int64)


def _distances(q, pts, idx):
    diff = pts[idx] - q[:, None, :]
    return np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2])


def nearest_distance(index: SpatialIndex, x):
    """``(distance, point_id)`` of the closest indexed point to ``x``."""
    arr = np.asarray(x, dtype=np.float64)
    d, i = index.query(arr)
    if arr.ndim == 1:
        return float(d[0]), int(i[0])
    return d, i


# -- simple shapes -------------------------------------------------------------


def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron with outward-facing triangles."""
    p = (1 + math.sqrt(5)) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, 12 outward-facing triangles."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[(hi if (i >> a) & 1 else lo)[a] for a in range(3)] for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(faces))


def torus_mesh(major: float = 0.3, minor: float = 0.1, nu: int = 48, nv: int = 24) -> TriangleMesh:
    """Torus around the z axis with outward-facing triangles."""
    u = np.arange(nu) * 2 * np.pi / nu
    v = np.arange(nv) * 2 * np.pi / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(faces))
