"""Connectivity-based cleanup and priority merging of segmentation masks.

Component labeling is deterministic: components are numbered 1..K by
descending voxel count, ties broken by the smallest flat index of the
component's first voxel, so repeated runs (and parallel callers) agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage as ndi

from .errors import ValidationError
from .schema import LabelSchema
from .volume import Volume, require_same_grid

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class ComponentStats:
    component_id: int
    class_id: int
    voxel_count: int
    volume: float  # mm^3
    centroid: tuple[float, float, float]  # world mm
    bbox: tuple[int, int, int, int, int, int]  # inclusive (i0,j0,k0,i1,j1,k1)


def _structure(connectivity: int) -> np.ndarray:
    try:
        return ndi.generate_binary_structure(3, _CONNECTIVITY_RANK[int(connectivity)])
    except KeyError:
        raise ValidationError(f"connectivity must be 6, 18 or 26, got {connectivity}") from None


def _order_components(lab: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Component ids 1..k sorted by (-voxel_count, first flat voxel index).

    Raster order within a bounding box agrees with raster order in the
    full array, so this tie-break is stable under the bbox-local labeling
    used elsewhere in this module.
    """
    flat = lab.ravel()
    counts = np.bincount(flat, minlength=k + 1).astype(np.int64)
    ids, first_idx = np.unique(flat, return_index=True)
    firsts = np.empty(k + 1, dtype=np.int64)
    firsts[ids] = first_idx
    order = np.lexsort((firsts[1:], -counts[1:])).astype(np.int64) + 1
    return order, counts


def connected_components(
    mask: Volume, connectivity: int = 26, class_id: int = 1, with_stats: bool = True
) -> tuple[Volume, list[ComponentStats]]:
    """Label the connected components of a binary mask.

    Returns the relabeled volume (components 1..K in the deterministic
    order above) and exact per-component stats (empty list when
    ``with_stats`` is off).
    """
    structure = _structure(connectivity)
    binary = mask.data != 0
    lab, k = ndi.label(binary, structure=structure)
    if k == 0:
        return mask.with_data(lab.astype(np.int32), kind="labelmap", copy=False), []

    order, counts = _order_components(lab, k)
    lut = np.zeros(k + 1, dtype=np.int32)
    lut[order] = np.arange(1, k + 1, dtype=np.int32)
    relabeled = lut[lab]
    out = mask.with_data(relabeled, kind="labelmap", copy=False)
    if not with_stats:
        return out, []

    # Index sums per component -> exact centroids in one pass per axis.
    flat = lab.ravel()
    sums = np.empty((3, k + 1), dtype=np.float64)
    for ax in range(3):
        ramp = np.arange(mask.shape[ax], dtype=np.float64).reshape(
            [-1 if a == ax else 1 for a in range(3)]
        )
        w = np.broadcast_to(ramp, mask.shape).ravel()
        sums[ax] = np.bincount(flat, weights=w, minlength=k + 1)
    slices = ndi.find_objects(lab)
    voxvol = mask.voxel_volume

    stats = []
    for new_id, old_id in enumerate(order, start=1):
        n = int(counts[old_id])
        centroid_idx = sums[:, old_id] / n
        centroid = tuple(float(x) for x in mask.world_points(centroid_idx)[0])
        sl = slices[old_id - 1]
        bbox = (
            int(sl[0].start), int(sl[1].start), int(sl[2].start),
            int(sl[0].stop) - 1, int(sl[1].stop) - 1, int(sl[2].stop) - 1,
        )
        stats.append(
            ComponentStats(
                component_id=new_id,
                class_id=class_id,
                voxel_count=n,
                volume=n * voxvol,
                centroid=centroid,
                bbox=bbox,
            )
        )
    return out, stats


def filter_small_components(
    labels: Volume, schema: LabelSchema, connectivity: int = 26
) -> Volume:
    """Remove per-class components below the class volume threshold.

    Classes marked single_component keep only their largest component
    (ties resolved by the deterministic component order). Ids not present
    in the schema are left untouched. Never adds voxels.
    """
    if not labels.is_labelmap:
        raise ValidationError("filter_small_components expects a labelmap")
    structure = _structure(connectivity)
    voxvol = labels.voxel_volume
    out = np.array(labels.data)

    objects = ndi.find_objects(out)
    for cid, sl in enumerate(objects, start=1):
        if sl is None or cid not in schema:
            continue
        cdef = schema[cid]
        sub = out[sl]
        m = sub == cid
        lab, k = ndi.label(m, structure=structure)
        if k == 0:
            continue
        counts = np.bincount(lab.ravel(), minlength=k + 1).astype(np.int64)
        keep = counts * voxvol >= cdef.min_component_volume
        keep[0] = False
        if cdef.single_component and keep.any():
            order, _ = _order_components(lab, k)
            winner = next(int(c) for c in order if keep[c])
            keep[:] = False
            keep[winner] = True
        sub[m & ~keep[lab]] = 0
    return labels.with_data(out, copy=False)


def merge_with_priority(
    masks: Iterable[tuple[int, Volume]], schema: LabelSchema
) -> Volume:
    """Merge per-class binary masks into one labelmap by priority.

    A voxel gets the claiming class with the lowest (merge_priority,
    class_id); later claimants never overwrite a better one, so the
    result is independent of input order. Masks are consumed lazily and
    only one is held in memory at a time.
    """
    out = None
    rank = None
    first: Volume | None = None
    seen: set[int] = set()

    for class_id, vol in masks:
        class_id = int(class_id)
        if class_id in seen:
            raise ValidationError(f"duplicate class id {class_id} in merge input")
        seen.add(class_id)
        cdef = schema[class_id]
        if first is None:
            first = vol
            out = np.zeros(vol.shape, dtype=np.int32)
            rank = np.full(vol.shape, np.iinfo(np.int32).max, dtype=np.int32)
        else:
            require_same_grid(first, vol, what="merge masks")
        m = vol.data != 0
        r = cdef.merge_priority
        claim = m & ((rank > r) | ((rank == r) & (out > class_id)))
        out[claim] = class_id
        rank[claim] = r

    if first is None:
        raise ValidationError("merge_with_priority requires at least one mask")
    return first.with_data(out, kind="labelmap", copy=False)


def stats_to_rows(stats: Iterable[ComponentStats]) -> list[dict]:
    """Flatten ComponentStats for CSV/JSON emission."""
    return [
        {
            "component_id": s.component_id,
            "class_id": s.class_id,
            "voxel_count": s.voxel_count,
            "volume_mm3": s.volume,
            "centroid_x_mm": s.centroid[0],
            "centroid_y_mm": s.centroid[1],
            "centroid_z_mm": s.centroid[2],
            "bbox_i0": s.bbox[0], "bbox_j0": s.bbox[1], "bbox_k0": s.bbox[2],
            "bbox_i1": s.bbox[3], "bbox_j1": s.bbox[4], "bbox_k1": s.bbox[5],
        }
        for s in stats
    ]
