"""Dense sampling of the potential, iso-surface extraction and planar slices."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .field import ChargeSet, eval_field
from .mesh import TriangleMesh

log = logging.getLogger(__name__)

__all__ = [
    "ScalarGrid",
    "SliceImage",
    "GridAllocationError",
    "default_grid",
    "evaluate_grid",
    "marching_cubes",
    "slice_field",
    "strict_interior_minima",
    "vertex_residual",
]


class GridAllocationError(MemoryError):
    pass


@dataclass
class ScalarGrid:
    """Cubic-cell grid; ``values[i, j, k]`` is the sample at ``origin + spacing * (i, j, k)``.

    ``flat_values()`` gives the x-fastest linear order used on disk.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = float(self.spacing)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def flat_values(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def node(self, i, j, k) -> np.ndarray:
        return self.origin + self.spacing * np.array([i, j, k], dtype=np.float64)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.values.shape[axis])


def default_grid(resolution: int = 256, padding: float = 0.1):
    """``(origin, spacing, dims)`` covering the unit cube ``[-0.5, 0.5]^3`` padded by ``padding``."""
    half = 0.5 * (1.0 + padding)
    spacing = 2 * half / (resolution - 1)
    return np.full(3, -half), spacing, (resolution,) * 3


def evaluate_grid(charge_set: ChargeSet, origin, spacing: float, dims) -> ScalarGrid:
    """Sample the potential on every grid node, one z-slab at a time."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError("dims must be three counts >= 2")
    origin = np.asarray(origin, dtype=np.float64)
    try:
        values = np.empty(dims)
    except MemoryError:
        raise GridAllocationError(
            f"cannot allocate grid {dims} ({np.prod(dims) * 8 / 2**20:.0f} MiB)"
        ) from None
    xs = origin[0] + spacing * np.arange(dims[0])
    ys = origin[1] + spacing * np.arange(dims[1])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    slab = np.empty((dims[0] * dims[1], 3))
    slab[:, 0] = gx.ravel()
    slab[:, 1] = gy.ravel()
    for k in range(dims[2]):
        slab[:, 2] = origin[2] + spacing * k
        values[:, :, k] = eval_field(charge_set, slab).reshape(dims[0], dims[1])
    return ScalarGrid(origin, spacing, values)


def marching_cubes(grid: ScalarGrid, tau: float) -> TriangleMesh:
    """Triangulate ``{phi = tau}``; faces are oriented toward decreasing values.

    Returns an empty mesh when ``tau`` is not strictly inside the value range.
    """
    vmin, vmax = float(grid.values.min()), float(grid.values.max())
    if not vmin < tau < vmax:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        grid.values, level=tau, spacing=(grid.spacing,) * 3, method="lewiner", allow_degenerate=True
    )
    verts = verts.astype(np.float64) + grid.origin
    # weld vertices that landed on the same grid node, then drop collapsed faces
    verts, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    mesh = TriangleMesh(verts, faces)
    if len(faces) and _points_uphill(mesh, grid):
        mesh = TriangleMesh(verts, faces[:, ::-1].copy())
    return mesh


def _points_uphill(mesh: TriangleMesh, grid: ScalarGrid) -> bool:
    """True if face normals point, on balance, toward increasing grid values."""
    centers = mesh.triangles.mean(axis=1)
    normals = mesh.face_normals()
    h = grid.spacing
    gi = np.gradient(grid.values, h)
    idx = np.clip(np.rint((centers - grid.origin) / h).astype(int), 0, np.array(grid.dims) - 1)
    g = np.stack([gi[a][idx[:, 0], idx[:, 1], idx[:, 2]] for a in range(3)], axis=1)
    return float(np.einsum("ij,ij->i", g, normals).sum()) > 0


def vertex_residual(charge_set: ChargeSet, mesh: TriangleMesh, tau: float | None = None) -> np.ndarray:
    """``|phi(v) - tau|`` at every mesh vertex."""
    tau = charge_set.iso_value if tau is None else tau
    return np.abs(eval_field(charge_set, mesh.vertices) - tau)


def strict_interior_minima(grid: ScalarGrid) -> np.ndarray:
    """Indices ``(M, 3)`` of interior nodes strictly below all six axis neighbours."""
    v = grid.values
    c = v[1:-1, 1:-1, 1:-1]
    mask = (
        (c < v[:-2, 1:-1, 1:-1]) & (c < v[2:, 1:-1, 1:-1])
        & (c < v[1:-1, :-2, 1:-1]) & (c < v[1:-1, 2:, 1:-1])
        & (c < v[1:-1, 1:-1, :-2]) & (c < v[1:-1, 1:-1, 2:])
    )
    return np.argwhere(mask) + 1


_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


@dataclass
class SliceImage:
    axis: int
    offset: float
    extent: float
    center: tuple
    tau: float
    values: np.ndarray
    contours: list = field(default_factory=list)

    @property
    def vmin(self) -> float:
        return float(self.values.min())

    @property
    def vmax(self) -> float:
        return float(self.values.max())

    @property
    def plane_axes(self) -> tuple[int, int]:
        return tuple(a for a in range(3) if a != self.axis)

    def to_pgm(self) -> str:
        """ASCII P2 image; rows run along the second in-plane axis."""
        lo, hi = self.vmin, self.vmax
        scaled = np.zeros_like(self.values) if hi == lo else (self.values - lo) / (hi - lo) * 255.0
        img = np.rint(scaled).astype(int).T[::-1]
        h, w = img.shape
        lines = ["P2", f"{w} {h}", "255"]
        lines += [" ".join(str(v) for v in row) for row in img]
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {
            "axis": "xyz"[self.axis],
            "offset": self.offset,
            "extent": self.extent,
            "center": list(self.center),
            "resolution": list(self.values.shape),
            "min": self.vmin,
            "max": self.vmax,
            "tau": self.tau,
            "contours": [
                {"closed": bool(len(c) > 2 and np.array_equal(c[0], c[-1])), "points": c.tolist()}
                for c in self.contours
            ],
        }

    def write(self, pgm_path, json_path=None) -> None:
        pgm_path = Path(pgm_path)
        pgm_path.write_text(self.to_pgm(), encoding="ascii")
        json_path = Path(json_path) if json_path else pgm_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.sidecar(), indent=2), encoding="utf-8")


def slice_field(charge_set: ChargeSet, axis="z", offset: float = 0.0, resolution: int = 256,
                extent: float = 1.1, center=(0.0, 0.0), tau: float | None = None) -> SliceImage:
    """Sample the potential on an axis-aligned plane and trace its ``tau`` contours.

    ``extent`` is the side length of the square window, centred at ``center``
    in the two in-plane coordinates.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    ax = _AXES[axis]
    tau = charge_set.iso_value if tau is None else float(tau)
    u_ax, v_ax = [a for a in range(3) if a != ax]
    step = extent / (resolution - 1)
    u = center[0] - extent / 2 + step * np.arange(resolution)
    v = center[1] - extent / 2 + step * np.arange(resolution)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.empty((resolution * resolution, 3))
    pts[:, ax] = offset
    pts[:, u_ax] = uu.ravel()
    pts[:, v_ax] = vv.ravel()
    values = eval_field(charge_set, pts).reshape(resolution, resolution)
    contours = []
    if values.min() < tau < values.max():
        for c in measure.find_contours(values, tau):
            contours.append(np.stack([u[0] + step * c[:, 0], v[0] + step * c[:, 1]], axis=1))
    return SliceImage(ax, float(offset), float(extent), tuple(float(c) for c in center), tau, values, contours)
