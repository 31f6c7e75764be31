"""Surface-reconstruction metrics on sampled point sets and voxelised solids."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .mesh import PointSamples, SpatialIndex, TriangleMesh, is_inside, sample_surface

__all__ = [
    "MetricReport",
    "chamfer",
    "hausdorff",
    "f1_score",
    "normal_consistency",
    "iou_voxel",
    "evaluate_pair",
]

TSV_FIELDS = ("chamfer", "hausdorff", "f1", "precision", "recall",
              "normal_consistency", "iou", "sample_count", "voxel_resolution")


@dataclass
class MetricReport:
    chamfer: float
    hausdorff: float
    f1: float
    precision: float
    recall: float
    normal_consistency: float
    iou: float | None
    sample_count: int
    voxel_resolution: int | None
    seed: int
    f1_threshold: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_tsv(self) -> str:
        """One line, nine tab-separated fields in ``TSV_FIELDS`` order."""
        out = []
        for name in TSV_FIELDS:
            v = getattr(self, name)
            out.append("nan" if v is None else (str(v) if isinstance(v, int) else f"{v:.9g}"))
        return "\t".join(out)


def _positions(s) -> np.ndarray:
    return np.asarray(getattr(s, "positions", s), dtype=np.float64).reshape(-1, 3)


def _directed(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest point of ``b``."""
    return SpatialIndex(_positions(b)).query(_positions(a))[0]


def chamfer(a, b) -> float:
    """Symmetric mean of (non-squared) nearest-neighbour distances."""
    return 0.5 * float(np.mean(_directed(a, b))) + 0.5 * float(np.mean(_directed(b, a)))


def hausdorff(a, b) -> float:
    return max(float(_directed(a, b).max()), float(_directed(b, a).max()))


def f1_score(pred, gt, threshold: float) -> tuple[float, float, float]:
    """``(f1, precision, recall)`` in percent for a distance ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    precision = 100.0 * float(np.mean(_directed(pred, gt) < threshold))
    recall = 100.0 * float(np.mean(_directed(gt, pred) < threshold))
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def normal_consistency(pred: PointSamples, gt: PointSamples) -> float:
    """Mean ``|n_x . n_nn(x)|`` over both directions."""
    if pred.normals is None or gt.normals is None:
        raise ValueError("normal consistency needs normals on both point sets")

    def one_way(a, b):
        _, idx = SpatialIndex(b.positions).query(a.positions)
        return np.abs(np.einsum("ij,ij->i", a.normals, b.normals[idx]))

    return 0.5 * float(np.mean(one_way(pred, gt))) + 0.5 * float(np.mean(one_way(gt, pred)))


def voxel_box(meshes, resolution: int, pad: float = 0.02):
    """Cubified union bounding box, padded by ``pad`` of its longest side."""
    lo = np.min([m.bounds()[0] for m in meshes], axis=0)
    hi = np.max([m.bounds()[1] for m in meshes], axis=0)
    side = float((hi - lo).max()) * (1.0 + pad)
    origin = 0.5 * (lo + hi) - side / 2
    return origin, side / resolution


def iou_voxel(pred: TriangleMesh, gt: TriangleMesh, resolution: int = 128) -> float:
    """Volumetric IoU from inside tests at voxel centres."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    pred.require_watertight()
    gt.require_watertight()
    origin, h = voxel_box([pred, gt], resolution)
    c = (np.arange(resolution) + 0.5) * h
    gx, gy = np.meshgrid(origin[0] + c, origin[1] + c, indexing="ij")
    slab = np.empty((resolution * resolution, 3))
    slab[:, 0] = gx.ravel()
    slab[:, 1] = gy.ravel()
    inter = union = 0
    for k in range(resolution):
        slab[:, 2] = origin[2] + c[k]
        a = is_inside(pred, slab)
        b = is_inside(gt, slab)
        inter += int(np.count_nonzero(a & b))
        union += int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def evaluate_pair(pred: TriangleMesh, gt: TriangleMesh, points: int = 100_000,
                  iou_resolution: int | None = 128, seed: int = 0) -> MetricReport:
    """All metrics for a predicted mesh against ground truth.

    The F1 threshold is 1% of the longest side of ``gt``'s bounding box.
    Pass ``iou_resolution=None`` to skip IoU.
    """
    ps = sample_surface(pred, points, seed=seed)
    gs = sample_surface(gt, points, seed=seed)
    lo, hi = gt.bounds()
    thr = 0.01 * float((hi - lo).max())
    d_pg = _directed(ps, gs)
    d_gp = _directed(gs, ps)
    precision = 100.0 * float(np.mean(d_pg < thr))
    recall = 100.0 * float(np.mean(d_gp < thr))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricReport(
        chamfer=0.5 * float(d_pg.mean()) + 0.5 * float(d_gp.mean()),
        hausdorff=max(float(d_pg.max()), float(d_gp.max())),
        f1=f1,
        precision=precision,
        recall=recall,
        normal_consistency=normal_consistency(ps, gs),
        iou=None if iou_resolution is None else iou_voxel(pred, gt, iou_resolution),
        sample_count=points,
        voxel_resolution=iou_resolution,
        seed=seed,
        f1_threshold=thr,
    )
