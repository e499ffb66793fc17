"""Coarse body-localization labelmap: the eleven-quadrant auxiliary input.

The body is resampled to a fixed 4 mm isotropic 96-voxel cube (384 mm
field of view) centered on the foreground, thresholded into a body mask,
and carved into axial bands: the most superior band stays whole (label
1), every band below is split left/right at the mid-sagittal plane
through the body centroid. The default of 6 bands yields 11 regions.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from .errors import ValidationError
from .volume import GridSpec, Volume, axis_toward, directed_profile, resample

ISO_SPACING = 4.0  # mm
ISO_SHAPE = 96  # voxels per axis -> 384 mm cube
DEFAULT_BANDS = 6
DEFAULT_BODY_THRESHOLD = 0.1


def to_iso4(v: Volume) -> Volume:
    """Resample to the fixed 4 mm isotropic 96^3 grid around the foreground.

    The target grid reuses the input's axis directions and is centered on
    the foreground centroid; cropping and zero-padding fall out of the
    resampling itself.
    """
    fg = np.nonzero(v.data > 0)
    if fg[0].size == 0:
        raise ValidationError("to_iso4 requires a volume with positive foreground")
    centroid_idx = np.array([fg[0].mean(), fg[1].mean(), fg[2].mean()])
    centroid_world = v.world_points(centroid_idx)[0]

    units = v.affine[:3, :3] / np.linalg.norm(v.affine[:3, :3], axis=0)
    affine = np.eye(4)
    affine[:3, :3] = units * ISO_SPACING
    affine[:3, 3] = centroid_world - affine[:3, :3] @ np.full(3, (ISO_SHAPE - 1) / 2.0)
    grid = GridSpec((ISO_SHAPE,) * 3, (ISO_SPACING,) * 3, affine)
    return resample(v, grid)


def body_mask(inphase_iso4: Volume, threshold_fraction: float = DEFAULT_BODY_THRESHOLD) -> Volume:
    """Threshold the image, keep the largest component, fill interior holes.

    Threshold is ``threshold_fraction`` x the 99th-percentile intensity;
    holes are filled slice-wise perpendicular to the superior-inferior
    axis so enclosed low-signal regions (lungs, bowel gas) join the body.
    """
    if not 0.0 < threshold_fraction < 1.0:
        raise ValidationError(f"threshold_fraction must be in (0,1), got {threshold_fraction}")
    data = inphase_iso4.data
    threshold = threshold_fraction * float(np.percentile(data, 99.0))
    mask = data > threshold
    if not mask.any():
        raise ValidationError("body_mask: threshold leaves an empty mask")

    structure = ndi.generate_binary_structure(3, 3)
    lab, k = ndi.label(mask, structure=structure)
    counts = np.bincount(lab.ravel(), minlength=k + 1)
    counts[0] = 0
    mask = lab == int(np.argmax(counts))

    si_axis, _ = axis_toward(inphase_iso4.affine, "S")
    filled = np.empty_like(mask)
    mover = np.moveaxis(mask, si_axis, 0)
    fout = np.moveaxis(filled, si_axis, 0)
    for z in range(mover.shape[0]):
        fout[z] = ndi.binary_fill_holes(mover[z])
    return inphase_iso4.with_data(filled.astype(np.uint8), kind="labelmap", copy=False)


def compute_quadrants(body: Volume, bands: int = DEFAULT_BANDS) -> Volume:
    """Partition a body mask into 2*bands-1 regions encoding position.

    The superior-inferior extent splits into ``bands`` equal-height axial
    bands; the top band is label 1, and band b below it contributes labels
    2b (anatomical left) and 2b+1 (right), split at the mid-sagittal plane
    through the body centroid. Only body voxels are labeled.
    """
    if bands < 2:
        raise ValidationError(f"bands must be >= 2, got {bands}")
    mask = body.data != 0
    if not mask.any():
        raise ValidationError("compute_quadrants requires a nonempty body mask")

    si_axis, s_coords = directed_profile(body, "S")
    lr_axis, l_coords = directed_profile(body, "L")

    fg = np.nonzero(mask)
    s_vox = s_coords[fg[si_axis]]
    top, bottom = float(s_vox.max()), float(s_vox.min())
    height = (top - bottom) / bands if top > bottom else 1.0
    band_idx = np.clip(((top - s_vox) / height).astype(np.int64), 0, bands - 1)

    plane_l = float(l_coords[fg[lr_axis]].mean())
    is_left = l_coords[fg[lr_axis]] > plane_l

    labels_fg = np.where(
        band_idx == 0,
        1,
        2 * band_idx + np.where(is_left, 0, 1),
    )
    out = np.zeros(body.shape, dtype=np.int16)
    out[fg] = labels_fg.astype(np.int16)
    return body.with_data(out, kind="labelmap", copy=False)


def quadrant_labelmap(
    inphase: Volume,
    bands: int = DEFAULT_BANDS,
    threshold_fraction: float = DEFAULT_BODY_THRESHOLD,
) -> Volume:
    """Full pipeline: iso-4mm grid -> body mask -> quadrant labels."""
    iso = to_iso4(inphase)
    return compute_quadrants(body_mask(iso, threshold_fraction), bands=bands)
