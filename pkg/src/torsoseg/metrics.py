"""Segmentation quality metrics: Dice, ASSD, per-class reports, bootstrap CIs.

Conventions: Dice of two empty masks is undefined (None) and excluded
from aggregates; exactly one empty mask scores 0. ASSD is undefined when
either mask is empty. Surface distances are exact nearest-neighbor
distances in mm with anisotropic spacing applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .schema import LabelSchema
from .volume import Volume, require_same_grid

BOOTSTRAP_ITERATIONS = 10_000
_BOOT_CHUNK = 2_048  # fixed generation chunk; keeps results seed-stable


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    dice: float | None
    assd: float | None  # mm
    pred_volume: float  # mm^3
    ref_volume: float  # mm^3
    status: str  # ok | ref_empty | pred_empty | both_empty


@dataclass(frozen=True)
class BootstrapCI:
    mean: float
    lo: float
    hi: float
    iterations: int
    level: float
    seed: int


def dice(pred: Volume, ref: Volume) -> float | None:
    """2|A∩B| / (|A|+|B|); None if both masks are empty, 0 if exactly one is."""
    require_same_grid(pred, ref, what="dice operands")
    p = pred.data != 0
    r = ref.data != 0
    np_, nr = int(np.count_nonzero(p)), int(np.count_nonzero(r))
    if np_ == 0 and nr == 0:
        return None
    inter = int(np.count_nonzero(p & r))
    return 2.0 * inter / (np_ + nr)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbor; the
    volume boundary counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = np.ones_like(m)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def assd(
    pred: Volume, ref: Volume, spacing: tuple[float, float, float] | None = None
) -> float | None:
    """Average symmetric surface distance in mm; None if either mask is empty.

    Sum of nearest-surface distances in both directions divided by the
    total surface voxel count. Nearest distances are exact (KD-tree).
    """
    require_same_grid(pred, ref, what="assd operands")
    sp = np.asarray(spacing if spacing is not None else pred.spacing, dtype=np.float64)
    sp_surf = surface_mask(pred.data != 0)
    sr_surf = surface_mask(ref.data != 0)
    if not sp_surf.any() or not sr_surf.any():
        return None
    p_pts = np.argwhere(sp_surf) * sp
    r_pts = np.argwhere(sr_surf) * sp
    d_pr = cKDTree(r_pts).query(p_pts, k=1)[0]
    d_rp = cKDTree(p_pts).query(r_pts, k=1)[0]
    return float((d_pr.sum() + d_rp.sum()) / (len(p_pts) + len(r_pts)))


def class_metrics(pred: Volume, ref: Volume, class_id: int) -> ClassMetrics:
    """Dice/ASSD/volumes for one class of two labelmaps."""
    require_same_grid(pred, ref, what="labelmaps")
    p = pred.data == class_id
    r = ref.data == class_id
    np_, nr = int(np.count_nonzero(p)), int(np.count_nonzero(r))
    voxvol = pred.voxel_volume

    if np_ == 0 and nr == 0:
        status, d, a = "both_empty", None, None
    elif nr == 0:
        status, d, a = "ref_empty", 0.0, None
    elif np_ == 0:
        status, d, a = "pred_empty", 0.0, None
    else:
        status = "ok"
        inter = int(np.count_nonzero(p & r))
        d = 2.0 * inter / (np_ + nr)
        a = assd(pred.with_data(p, copy=False), ref.with_data(r, copy=False))
    return ClassMetrics(
        class_id=class_id,
        dice=d,
        assd=a,
        pred_volume=np_ * voxvol,
        ref_volume=nr * voxvol,
        status=status,
    )


def per_class_report(pred: Volume, ref: Volume, schema: LabelSchema) -> list[ClassMetrics]:
    """One ClassMetrics entry per schema class."""
    require_same_grid(pred, ref, what="labelmaps")
    return [class_metrics(pred, ref, c.id) for c in schema.classes]


def macro_dice(report: list[ClassMetrics]) -> float | None:
    """Mean Dice over classes present in either mask (status != both_empty)."""
    vals = [m.dice for m in report if m.status != "both_empty"]
    return float(np.mean(vals)) if vals else None


def bootstrap_ci(
    values,
    iterations: int = BOOTSTRAP_ITERATIONS,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap CI for the mean of ``values``.

    n-of-n resampling with replacement; deterministic per seed (Philox
    counter-based generator, fixed-size generation chunks).
    """
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        raise ValidationError("bootstrap_ci requires at least one value")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0,1), got {level}")
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")

    n = vals.size
    rng = np.random.Generator(np.random.Philox(seed))
    means = np.empty(iterations, dtype=np.float64)
    for start in range(0, iterations, _BOOT_CHUNK):
        stop = min(iterations, start + _BOOT_CHUNK)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = vals[idx].mean(axis=1)

    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return BootstrapCI(
        mean=float(vals.mean()),
        lo=float(lo),
        hi=float(hi),
        iterations=iterations,
        level=level,
        seed=seed,
    )
