"""Pseudo-CT intensity manipulation of VIBE water images.

Makes an MR water image look enough like CT attenuation for a CT-trained
model to produce usable initial masks: muscle signal is damped by 20%
and background/lung regions are pushed down by 600.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage as ndi

from .errors import ValidationError
from .volume import Volume, require_same_grid

logger = logging.getLogger(__name__)

BACKGROUND_LABEL = 1
LUNG_LABEL = 2

MUSCLE_SCALE = 0.8
AIR_SHIFT = 600.0

DEFAULT_THRESHOLD_FRACTION = 0.1
DEFAULT_MIN_LUNG_VOLUME = 50_000.0  # mm^3

# Fraction of in-body voxels below -AIR_SHIFT that triggers the
# "intensity manipulation not transferable" warning.
_WARN_FRACTION = 0.01


def find_background_and_lung(
    inphase: Volume,
    threshold_fraction: float = DEFAULT_THRESHOLD_FRACTION,
    min_volume: float = DEFAULT_MIN_LUNG_VOLUME,
) -> Volume:
    """Split low-intensity voxels into background (1) and lung (2).

    Voxels below ``threshold_fraction`` x the 99th-percentile intensity
    form the candidate mask; its 26-connected components touching the
    volume boundary are background, interior components of at least
    ``min_volume`` mm^3 are lung, smaller ones are dropped.
    """
    if not 0.0 < threshold_fraction < 1.0:
        raise ValidationError(f"threshold_fraction must be in (0,1), got {threshold_fraction}")
    data = inphase.data
    if data.size == 0 or float(data.min()) < 0:
        raise ValidationError("in-phase image must be nonempty with nonnegative intensities")

    threshold = threshold_fraction * float(np.percentile(data, 99.0))
    low = data < threshold
    frac = low.mean()
    if frac > 0.95:
        raise ValidationError(
            f"threshold selects {frac:.0%} of voxels; image looks degenerate"
        )

    out = np.zeros(inphase.shape, dtype=np.uint8)
    if not low.any():
        return inphase.with_data(out, kind="labelmap", copy=False)

    structure = ndi.generate_binary_structure(3, 3)
    lab, k = ndi.label(low, structure=structure)

    border_ids = np.unique(
        np.concatenate(
            [
                lab[0].ravel(), lab[-1].ravel(),
                lab[:, 0].ravel(), lab[:, -1].ravel(),
                lab[:, :, 0].ravel(), lab[:, :, -1].ravel(),
            ]
        )
    )
    border_ids = border_ids[border_ids != 0]

    counts = np.bincount(lab.ravel(), minlength=k + 1)
    voxvol = inphase.voxel_volume
    lut = np.zeros(k + 1, dtype=np.uint8)
    lut[counts * voxvol >= min_volume] = LUNG_LABEL
    lut[border_ids] = BACKGROUND_LABEL
    lut[0] = 0
    out = lut[lab]
    return inphase.with_data(out, kind="labelmap", copy=False)


def make_pseudo_ct(water: Volume, muscle_mask: Volume, bglung_mask: Volume) -> Volume:
    """out = water x (0.8 if muscle) - (600 if background/lung), per voxel.

    Muscle scaling applies first, the air shift second, so a voxel in both
    masks follows the single closed form. Results may be negative; voxels
    outside both masks are untouched bit-exactly.
    """
    require_same_grid(water, muscle_mask, bglung_mask, what="pseudo-CT inputs")
    out = water.data.astype(np.float64)
    muscle = muscle_mask.data != 0
    air = bglung_mask.data != 0
    out[muscle] *= MUSCLE_SCALE
    out[air] -= AIR_SHIFT

    body = ~air
    n_body = int(np.count_nonzero(body))
    if n_body and np.count_nonzero(out[body] < -AIR_SHIFT) > _WARN_FRACTION * n_body:
        logger.warning(
            "make_pseudo_ct: >%.0f%% of body voxels fall below %g; the fixed "
            "intensity offsets may not suit this water image",
            _WARN_FRACTION * 100, -AIR_SHIFT,
        )

    if np.issubdtype(water.data.dtype, np.floating):
        out = out.astype(water.data.dtype)
    return water.with_data(out, kind="image", copy=False)
