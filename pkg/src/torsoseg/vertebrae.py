"""Vertebra instance labeling by top-down counting, with anomaly detection.

Components of the vertebra-body mask are ordered superior to inferior
and assigned consecutive levels from a configurable start (default C3,
where the cohorts' field of view begins). Absolute level identity cannot
be recovered from geometry alone, so suspicious height/gap outliers are
only flagged, never corrected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import ValidationError
from .schema import VERTEBRA_LEVELS, LabelSchema, builtin_schema
from .volume import Volume, directed_profile

MIN_COMPONENT_VOLUME = 500.0  # mm^3
MERGED_EXTENT_FACTOR = 1.8  # x median component height
GAP_DISTANCE_FACTOR = 1.8  # x median inter-centroid distance


@dataclass(frozen=True)
class LevelAssignment:
    level: str
    component_id: int
    volume: float  # mm^3
    centroid: tuple[float, float, float]  # world mm
    si_extent: float  # mm, superior-inferior height


@dataclass(frozen=True)
class Anomaly:
    kind: str  # merged_suspect | gap_suspect | count_overflow
    detail: str
    levels: tuple[str, ...] = ()


@dataclass
class SpineReport:
    assigned_levels: list[LevelAssignment] = field(default_factory=list)
    anomalies: list[Anomaly] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "assigned_levels": [
                {
                    "level": a.level,
                    "component_id": a.component_id,
                    "volume_mm3": a.volume,
                    "centroid_mm": list(a.centroid),
                    "si_extent_mm": a.si_extent,
                }
                for a in self.assigned_levels
            ],
            "anomalies": [
                {"kind": a.kind, "detail": a.detail, "levels": list(a.levels)}
                for a in self.anomalies
            ],
        }


def _level_ids(schema: LabelSchema) -> dict[str, int]:
    if schema.instance_classes:
        return {i.level: i.id for i in schema.instance_classes}
    return {lv: i + 1 for i, lv in enumerate(VERTEBRA_LEVELS)}


def instance_label(
    vertebra_body: Volume,
    ivd: Volume | None = None,
    start_level: str = "C3",
    schema: LabelSchema | None = None,
    min_volume: float = MIN_COMPONENT_VOLUME,
) -> tuple[Volume, SpineReport]:
    """Assign vertebra levels to mask components by counting downward.

    26-connected components of at least ``min_volume`` mm^3 are sorted by
    centroid along superior-inferior and given consecutive levels from
    ``start_level``. When an IVD mask is supplied, a component crossed in
    its interior by an IVD component's axial plane is split there first
    (both halves must clear ``min_volume``). Components past L5 stay 0
    and are reported as count_overflow.
    """
    if start_level not in VERTEBRA_LEVELS:
        raise ValidationError(f"start_level must be one of C3..L5, got {start_level!r}")
    mask = vertebra_body.data != 0
    if not mask.any():
        raise ValidationError("instance_label requires a nonempty vertebra mask")
    schema = schema or builtin_schema()
    level_ids = _level_ids(schema)

    si_axis, s_coords = directed_profile(vertebra_body, "S")
    voxvol = vertebra_body.voxel_volume
    structure = ndi.generate_binary_structure(3, 3)
    lab, k = ndi.label(mask, structure=structure)

    # Component membership as flat voxel index lists, dropping small ones.
    comp_voxels: list[np.ndarray] = []
    counts = np.bincount(lab.ravel(), minlength=k + 1)
    flat_lab = lab.ravel()
    order_idx = np.argsort(flat_lab, kind="stable")
    boundaries = np.cumsum(counts)
    for cid in range(1, k + 1):
        if counts[cid] * voxvol < min_volume:
            continue
        comp_voxels.append(order_idx[boundaries[cid - 1] : boundaries[cid]])

    # Split planes: one axial plane per IVD component, at its SI centroid.
    planes: list[float] = []
    if ivd is not None:
        ivd_lab, ivd_k = ndi.label(ivd.data != 0, structure=structure)
        # Mean SI coordinate per IVD component.
        loc = np.nonzero(ivd_lab)
        ids = ivd_lab[loc]
        si_of_vox = s_coords[loc[si_axis]]
        sums = np.bincount(ids, weights=si_of_vox, minlength=ivd_k + 1)
        nums = np.bincount(ids, minlength=ivd_k + 1)
        planes = [float(sums[c] / nums[c]) for c in range(1, ivd_k + 1) if nums[c] > 0]

    shape = vertebra_body.shape
    pieces: list[np.ndarray] = []
    for vox in comp_voxels:
        pieces.extend(_split_at_planes(vox, planes, shape, si_axis, s_coords, voxvol, min_volume))

    # Superior-first ordering by centroid SI coordinate.
    def mean_s(vox: np.ndarray) -> float:
        si = np.unravel_index(vox, shape)[si_axis]
        return float(s_coords[si].mean())

    pieces.sort(key=mean_s, reverse=True)

    levels = list(VERTEBRA_LEVELS[VERTEBRA_LEVELS.index(start_level):])
    out = np.zeros(shape, dtype=np.int16)
    report = SpineReport()
    for comp_id, vox in enumerate(pieces, start=1):
        idx3 = np.unravel_index(vox, shape)
        si = idx3[si_axis]
        centroid_idx = np.array([idx3[a].mean() for a in range(3)])
        centroid = tuple(float(x) for x in vertebra_body.world_points(centroid_idx)[0])
        s_lo, s_hi = float(s_coords[si].min()), float(s_coords[si].max())
        extent = s_hi - s_lo + vertebra_body.spacing[si_axis]
        if comp_id <= len(levels):
            level = levels[comp_id - 1]
            out[idx3] = level_ids[level]
            report.assigned_levels.append(
                LevelAssignment(
                    level=level,
                    component_id=comp_id,
                    volume=len(vox) * voxvol,
                    centroid=centroid,
                    si_extent=extent,
                )
            )
        else:
            report.anomalies.append(
                Anomaly(
                    kind="count_overflow",
                    detail=f"component {comp_id} exceeds L5; left unlabeled "
                    f"(centroid S={centroid[2]:.1f} mm)",
                )
            )
    return vertebra_body.with_data(out, kind="labelmap", copy=False), report


def _split_at_planes(
    vox: np.ndarray,
    planes: list[float],
    shape,
    si_axis: int,
    s_coords: np.ndarray,
    voxvol: float,
    min_volume: float,
) -> list[np.ndarray]:
    """Split one component at every qualifying axial plane.

    A plane qualifies when it lies strictly inside the component's SI
    extent and both resulting halves clear the volume threshold.
    """
    si = np.unravel_index(vox, shape)[si_axis]
    s = s_coords[si]
    parts = [(vox, s)]
    for plane in sorted(planes):
        next_parts = []
        for pvox, ps in parts:
            lo, hi = float(ps.min()), float(ps.max())
            if not lo < plane < hi:
                next_parts.append((pvox, ps))
                continue
            above = ps >= plane
            a, b = pvox[above], pvox[~above]
            if len(a) * voxvol < min_volume or len(b) * voxvol < min_volume:
                next_parts.append((pvox, ps))
                continue
            next_parts.append((a, ps[above]))
            next_parts.append((b, ps[~above]))
        parts = next_parts
    return [p for p, _ in parts]


def detect_anomalies(
    instances: Volume,
    report: SpineReport,
    merged_factor: float = MERGED_EXTENT_FACTOR,
    gap_factor: float = GAP_DISTANCE_FACTOR,
) -> SpineReport:
    """Append merged/gap suspects based on height and spacing outliers.

    A component much taller than the median assigned height suggests two
    vertebrae fused into one label; consecutive centroids much farther
    apart than the median step suggest a skipped vertebra.
    """
    out = SpineReport(
        assigned_levels=list(report.assigned_levels),
        anomalies=list(report.anomalies),
    )
    assigned = report.assigned_levels
    if len(assigned) < 2:
        return out

    si_axis, _ = directed_profile(instances, "S")
    extents = np.array([a.si_extent for a in assigned])
    med_extent = float(np.median(extents))
    for a in assigned:
        if med_extent > 0 and a.si_extent > merged_factor * med_extent:
            out.anomalies.append(
                Anomaly(
                    kind="merged_suspect",
                    detail=f"{a.level}: height {a.si_extent:.1f} mm vs median "
                    f"{med_extent:.1f} mm",
                    levels=(a.level,),
                )
            )

    s_of = [a.centroid for a in assigned]
    # Centroid separation along superior-inferior, in assignment order.
    world_axis = int(np.argmax(np.abs(instances.affine[:3, si_axis])))
    s_vals = [c[world_axis] for c in s_of]
    gaps = np.abs(np.diff(s_vals))
    med_gap = float(np.median(gaps))
    for i, g in enumerate(gaps):
        if med_gap > 0 and g > gap_factor * med_gap:
            out.anomalies.append(
                Anomaly(
                    kind="gap_suspect",
                    detail=f"centroid step {g:.1f} mm vs median {med_gap:.1f} mm "
                    f"between {assigned[i].level} and {assigned[i + 1].level}",
                    levels=(assigned[i].level, assigned[i + 1].level),
                )
            )
    return out
