"""Fuse overlapping axial stacks into one volume with feathered blending.

Blend weights are purely geometric (linear distance to a stack's
superior-inferior edge), so the result does not depend on the order the
stacks are passed in. Images blend with normalized ramp weights;
labelmaps take the value of the maximum-weight stack.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError
from .volume import GridSpec, Volume, _resample_array, bounding_grid, directed_profile

logger = logging.getLogger(__name__)

# Tiny interior weight so edge slices keep a nonzero (normalizable) weight.
_EDGE_EPS = 1e-3

# Overlap-zone mean intensity discrepancy that triggers a warning.
_DISCREPANCY_FRACTION = 0.2


def _si_interval(v: Volume) -> tuple[float, float]:
    """World S-coordinates (toward superior) of the stack's slice centers."""
    _, prof = directed_profile(v, "S")
    return float(prof.min()), float(prof.max())


def stitch(stacks: list[Volume], reference_spacing=None) -> Volume:
    """Stitch ≥1 stacks into a volume covering their world bounding box.

    The output grid uses the finest per-axis spacing of the inputs unless
    ``reference_spacing`` overrides it. Stacks must overlap or abut
    (gap ≤ 1 slice) along the superior-inferior axis.
    """
    if not stacks:
        raise ValidationError("stitch requires at least one stack")
    kinds = {v.kind for v in stacks}
    if len(kinds) != 1:
        raise ValidationError(f"stacks mix element kinds: {sorted(kinds)}")
    kind = kinds.pop()

    # Canonical geometric order: inferior to superior, then origin.
    stacks = sorted(
        stacks,
        key=lambda v: (_si_interval(v)[0], tuple(np.round(v.affine[:3, 3], 6))),
    )
    orientation = stacks[0].orientation

    # Finest spacing per output axis (spacings mapped through orientation).
    spacing = None
    if reference_spacing is not None:
        spacing = tuple(float(s) for s in reference_spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"reference_spacing must be 3 positive reals, got {spacing}")
    else:
        per_world = np.full(3, np.inf)
        for v in stacks:
            rot = v.affine[:3, :3]
            for j in range(3):
                w = int(np.argmax(np.abs(rot[:, j])))
                per_world[w] = min(per_world[w], v.spacing[j])
        out_rot_world = []
        ref = GridSpec.from_affine((1, 1, 1), stacks[0].affine)
        for j in range(3):
            w = int(np.argmax(np.abs(ref.affine[:3, j])))
            out_rot_world.append(w)
        spacing = tuple(float(per_world[w]) for w in out_rot_world)

    grid = bounding_grid(stacks, spacing, orientation)

    # SI adjacency: intervals sorted above must touch within one slice.
    intervals = [_si_interval(v) for v in stacks]
    si_spacings = [v.spacing[directed_profile(v, "S")[0]] for v in stacks]
    for (lo_a, hi_a), (lo_b, _), sa, sb in zip(
        intervals, intervals[1:], si_spacings, si_spacings[1:]
    ):
        # Center-to-center distance of `s` means zero missing slices; up to
        # one absent slice (2s) still counts as adjacency.
        gap = lo_b - hi_a
        if gap > 2.0 * max(sa, sb) + 1e-6:
            raise ValidationError(
                f"stacks are disjoint along superior-inferior: gap {gap:.2f} mm "
                f"exceeds one slice"
            )

    out_si_axis, out_prof = directed_profile(
        Volume(np.zeros(grid.shape, dtype=np.uint8), grid.affine, "labelmap", copy=False), "S"
    )
    order = 0 if kind == "labelmap" else 1

    acc = None
    wsum = np.zeros(grid.shape, dtype=np.float64)
    coverage = np.zeros(grid.shape, dtype=np.int16)
    solo_vals = None
    best_w = None
    best_vals = None
    overlap_means: list[tuple[float, float]] = []

    for v, (lo, hi) in zip(stacks, intervals):
        vals, inside = _resample_array(v.data, v.affine, grid, order, want_inside=True)
        # Ramp weight: mm distance to the nearer SI edge of this stack.
        w_line = np.minimum(out_prof - lo, hi - out_prof) + _EDGE_EPS
        w_line = np.maximum(w_line, 0.0)
        shape = [1, 1, 1]
        shape[out_si_axis] = -1
        w = np.broadcast_to(w_line.reshape(shape), grid.shape) * inside

        if kind == "labelmap":
            if best_w is None:
                best_w = np.zeros(grid.shape, dtype=np.float64)
                best_vals = np.zeros(grid.shape, dtype=vals.dtype)
            better = w > best_w
            best_vals[better] = vals[better]
            best_w[better] = w[better]
        else:
            vals_f = vals.astype(np.float64, copy=False)
            if acc is None:
                acc = np.zeros(grid.shape, dtype=np.float64)
                solo_vals = np.zeros(grid.shape, dtype=np.float64)
            prev_mean = (
                float(vals_f[inside & (coverage > 0)].mean())
                if np.any(inside & (coverage > 0))
                else None
            )
            if prev_mean is not None:
                existing = acc[inside & (coverage > 0)] / wsum[inside & (coverage > 0)]
                overlap_means.append((float(existing.mean()), prev_mean))
            acc += vals_f * w
            solo_vals[inside] = vals_f[inside]
        wsum += w
        coverage += inside.astype(np.int16)

    if kind == "labelmap":
        out = best_vals
    else:
        out = np.zeros(grid.shape, dtype=np.float64)
        multi = coverage > 1
        out[multi] = acc[multi] / wsum[multi]
        solo = coverage == 1
        out[solo] = solo_vals[solo]
        for m_prev, m_new in overlap_means:
            denom = max(abs(m_prev), abs(m_new), 1e-12)
            if abs(m_prev - m_new) / denom > _DISCREPANCY_FRACTION:
                logger.warning(
                    "stitch: overlap-zone mean intensities differ by >%.0f%% "
                    "(%.2f vs %.2f); no harmonization is applied",
                    _DISCREPANCY_FRACTION * 100, m_prev, m_new,
                )
        src_dtype = stacks[0].data.dtype
        if np.issubdtype(src_dtype, np.floating):
            out = out.astype(src_dtype)
    return Volume(out, grid.affine, kind, copy=False)
