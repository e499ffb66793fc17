"""Shared helpers for building test volumes."""

import numpy as np

from torsoseg import Volume

_LETTER_AXIS = {
    "L": (0, -1), "R": (0, +1),
    "P": (1, -1), "A": (1, +1),
    "I": (2, -1), "S": (2, +1),
}


def affine_for(orientation="RAS", spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Axis-aligned affine whose voxel axes follow an orientation code."""
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for ax, letter in enumerate(orientation):
        w, sgn = _LETTER_AXIS[letter]
        aff[w, ax] = sgn * spacing[ax]
    aff[:3, 3] = origin
    return aff


def mkvol(data, spacing=(1.0, 1.0, 1.0), orientation="RAS", origin=(0.0, 0.0, 0.0), kind=None):
    data = np.asarray(data)
    if kind is None:
        kind = "labelmap" if np.issubdtype(data.dtype, np.integer) or data.dtype == bool else "image"
    return Volume(data, affine_for(orientation, spacing, origin), kind)
