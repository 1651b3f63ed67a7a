"""Volumetric overlap and surface-distance evaluation, plus paired t-tests."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import t as t_dist


class EmptyMaskError(ValueError):
    """Surface distances are undefined when a mask has no foreground."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class OverlapResult:
    dsc: float
    sn: float
    sp: float
    counts: ConfusionCounts
    degenerate: bool = False


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    degenerate: bool = False


@dataclass(frozen=True)
class CaseMetrics:
    subject: str
    gate: int
    structure: str
    dsc: float
    hd: float  # nan when undefined (empty mask)
    asd: float
    sn: float
    sp: float


@dataclass(frozen=True)
class StructureAggregate:
    structure: str
    n_cases: int
    dsc_mean: float
    dsc_std: float
    hd_mean: float
    hd_std: float
    asd_mean: float
    asd_std: float
    sn_mean: float
    sn_std: float
    sp_mean: float
    sp_std: float


@dataclass(frozen=True)
class MetricsReport:
    cases: tuple[CaseMetrics, ...]
    aggregates: tuple[StructureAggregate, ...]


def _check_binary_volume(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> OverlapResult:
    """Dice, sensitivity, specificity from voxel confusion counts.

    An empty denominator (no foreground for SN, no background for SP, both
    masks empty for DSC) yields the sentinel 1.0 and sets the degenerate flag.
    """
    p = _check_binary_volume(pred, "pred")
    g = _check_binary_volume(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    degenerate = False
    if 2 * tp + fp + fn > 0:
        dsc = 2.0 * tp / (2 * tp + fp + fn)
    else:
        dsc, degenerate = 1.0, True
    if tp + fn > 0:
        sn = tp / (tp + fn)
    else:
        sn, degenerate = 1.0, True
    if tn + fp > 0:
        sp = tn / (tn + fp)
    else:
        sp, degenerate = 1.0, True
    return OverlapResult(dsc=dsc, sn=sn, sp=sp, counts=counts, degenerate=degenerate)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-bounds
    neighbor, as an [k, 3] integer coordinate array."""
    m = _check_binary_volume(mask, "mask")
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-d, got shape {m.shape}")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Symmetric Hausdorff and pooled average surface distance, in pixels.

    Distances are Euclidean between boundary voxel centers. Raises
    EmptyMaskError when either mask has no foreground.
    """
    bp = boundary_voxels(pred)
    bg = boundary_voxels(gt)
    if bp.shape[0] == 0 or bg.shape[0] == 0:
        raise EmptyMaskError("surface distance undefined for an empty mask")
    d_pred_to_gt, _ = cKDTree(bg).query(bp)
    d_gt_to_pred, _ = cKDTree(bp).query(bg)
    hd = max(float(d_pred_to_gt.max()), float(d_gt_to_pred.max()))
    pooled = np.concatenate([d_pred_to_gt, d_gt_to_pred])
    return hd, float(pooled.mean())


def paired_t_test(a, b) -> TTestResult:
    """Classic paired t on the differences, two-sided p with n-1 dof."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(statistic=math.nan, p_value=math.nan, degenerate=True)
    stat = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * float(t_dist.sf(abs(stat), n - 1))
    return TTestResult(statistic=float(stat), p_value=p, degenerate=False)


CSV_HEADER = "subject,gate,structure,dsc,hd,asd,sn,sp"


def _aggregate(structure: str, cases: list[CaseMetrics]) -> StructureAggregate:
    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        finite = arr[np.isfinite(arr)]
        if finite.size == 0:
            return math.nan, math.nan
        return float(finite.mean()), float(finite.std())

    dsc = stats([c.dsc for c in cases])
    hd = stats([c.hd for c in cases])
    asd = stats([c.asd for c in cases])
    sn = stats([c.sn for c in cases])
    sp = stats([c.sp for c in cases])
    return StructureAggregate(
        structure=structure,
        n_cases=len(cases),
        dsc_mean=dsc[0],
        dsc_std=dsc[1],
        hd_mean=hd[0],
        hd_std=hd[1],
        asd_mean=asd[0],
        asd_std=asd[1],
        sn_mean=sn[0],
        sn_std=sn[1],
        sp_mean=sp[0],
        sp_std=sp[1],
    )


def metrics_report(cases: list[CaseMetrics]) -> tuple[MetricsReport, bytes]:
    """Per-case CSV plus aggregate mean+-std rows per structure, LF-terminated UTF-8."""
    by_structure: dict[str, list[CaseMetrics]] = {}
    for c in cases:
        by_structure.setdefault(c.structure, []).append(c)
    aggregates = tuple(_aggregate(s, cs) for s, cs in sorted(by_structure.items()))

    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for c in cases:
        buf.write(
            f"{c.subject},{c.gate},{c.structure},"
            f"{c.dsc:.6f},{c.hd:.6f},{c.asd:.6f},{c.sn:.6f},{c.sp:.6f}\n"
        )
    for agg in aggregates:
        buf.write(
            f"aggregate,,{agg.structure},"
            f"{agg.dsc_mean:.6f}±{agg.dsc_std:.6f},"
            f"{agg.hd_mean:.6f}±{agg.hd_std:.6f},"
            f"{agg.asd_mean:.6f}±{agg.asd_std:.6f},"
            f"{agg.sn_mean:.6f}±{agg.sn_std:.6f},"
            f"{agg.sp_mean:.6f}±{agg.sp_std:.6f}\n"
        )
    report = MetricsReport(cases=tuple(cases), aggregates=aggregates)
    return report, buf.getvalue().encode("utf-8")
