"""Volume data model and geometric resampling primitives.

A :class:`Volume` couples a dense 3D array with a voxel-to-world affine
(world axes follow the usual radiological convention: +x toward the
subject's right, +y anterior, +z superior). Volumes are immutable; every
operation returns a new instance, so they are safe to share between
threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import GridMismatchError, ValidationError

logger = logging.getLogger(__name__)

# Letters for the negative/positive end of each world axis.
_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))
_LETTER_TO_WORLD = {
    "L": (0, -1), "R": (0, +1),
    "P": (1, -1), "A": (1, +1),
    "I": (2, -1), "S": (2, +1),
}

# Resampled coordinates within this distance of an integer are snapped, so
# grid-aligned resampling reproduces source voxels bit-exactly.
_GRID_SNAP_TOL = 1e-6

# Target-voxel slab size (in voxels) for chunked resampling.
_RESAMPLE_CHUNK_VOXELS = 4_000_000


def _as_affine(affine) -> np.ndarray:
    a = np.asarray(affine, dtype=np.float64)
    if a.shape != (4, 4):
        raise ValidationError(f"affine must be 4x4, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("affine contains non-finite entries")
    if not np.allclose(a[3], (0.0, 0.0, 0.0, 1.0), atol=1e-12):
        raise ValidationError("affine last row must be [0, 0, 0, 1]")
    if abs(np.linalg.det(a[:3, :3])) < 1e-12:
        raise ValidationError("affine is singular")
    return a


class Volume:
    """A 3D scalar image or labelmap with world-space geometry.

    Args:
        data: dense 3D array. Integer dtypes are expected for labelmaps;
            bool input is widened to uint8.
        affine: 4x4 voxel-index-to-world-mm matrix.
        kind: ``"image"`` (continuous values) or ``"labelmap"``
            (non-negative integer class ids).

    The voxel spacing is derived from the affine column norms, so the
    spacing/affine consistency invariant holds by construction.
    """

    __slots__ = ("_data", "_affine", "_kind")

    def __init__(self, data, affine, kind: str = "image", *, copy: bool = True):
        arr = np.asarray(data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"volume data must be 3D and non-empty, got shape {arr.shape}")
        if kind not in ("image", "labelmap"):
            raise ValidationError(f"kind must be 'image' or 'labelmap', got {kind!r}")
        if kind == "labelmap":
            if arr.dtype == bool:
                arr = arr.astype(np.uint8)
                copy = False
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValidationError(f"labelmap requires an integer dtype, got {arr.dtype}")
            if arr.size and int(arr.min()) < 0:
                raise ValidationError("labelmap contains negative values")
        if copy:
            arr = arr.copy()
        arr.flags.writeable = False
        self._data = arr
        self._affine = _as_affine(affine)
        self._affine.flags.writeable = False
        self._kind = kind

    @property
    def data(self) -> np.ndarray:
        """Voxel array (read-only view)."""
        return self._data

    @property
    def affine(self) -> np.ndarray:
        """Voxel-index-to-world 4x4 matrix (read-only view)."""
        return self._affine

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def is_labelmap(self) -> bool:
        return self._kind == "labelmap"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        """Voxel size in mm along each voxel axis (affine column norms)."""
        return tuple(float(x) for x in np.linalg.norm(self._affine[:3, :3], axis=0))

    @property
    def voxel_volume(self) -> float:
        """Physical volume of one voxel in mm^3."""
        s = self.spacing
        return s[0] * s[1] * s[2]

    @property
    def orientation(self) -> str:
        """Three-letter axis code, e.g. ``"RAS"`` or ``"LPS"``."""
        return orientation_from_affine(self._affine)

    @property
    def grid(self) -> "GridSpec":
        return GridSpec(self.shape, self.spacing, self._affine)

    def with_data(self, data, *, kind: str | None = None, affine=None, copy: bool = True) -> "Volume":
        """New volume reusing this geometry unless overridden."""
        return Volume(
            data,
            self._affine if affine is None else affine,
            self._kind if kind is None else kind,
            copy=copy,
        )

    def world_points(self, indices) -> np.ndarray:
        """Map an (N, 3) array of voxel indices to world mm coordinates."""
        idx = np.atleast_2d(np.asarray(indices, dtype=np.float64))
        return idx @ self._affine[:3, :3].T + self._affine[:3, 3]

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return (
            f"Volume(shape={self.shape}, spacing={tuple(round(s, 4) for s in self.spacing)}, "
            f"orientation={self.orientation}, kind={self._kind}, dtype={self._data.dtype})"
        )


@dataclass(frozen=True)
class GridSpec:
    """Target sampling grid: shape, spacing, and voxel-to-world affine."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValidationError(f"grid shape must be 3 positive integers, got {self.shape}")
        aff = _as_affine(self.affine)
        aff.flags.writeable = False
        object.__setattr__(self, "affine", aff)
        norms = np.linalg.norm(aff[:3, :3], axis=0)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"grid spacing must be 3 positive reals, got {spacing}")
        if not np.allclose(norms, spacing, rtol=1e-6, atol=0):
            raise ValidationError(
                f"grid spacing {spacing} disagrees with affine column norms {tuple(norms)}"
            )

    @classmethod
    def from_affine(cls, shape: Sequence[int], affine) -> "GridSpec":
        aff = _as_affine(affine)
        spacing = tuple(float(s) for s in np.linalg.norm(aff[:3, :3], axis=0))
        return cls(tuple(shape), spacing, aff)

    def same_as(self, other: "GridSpec", tol: float = 1e-6) -> bool:
        return self.shape == other.shape and np.allclose(
            self.affine, other.affine, rtol=tol, atol=tol
        )


def same_grid(a: Volume, b: Volume, tol: float = 1e-6) -> bool:
    return a.shape == b.shape and np.allclose(a.affine, b.affine, rtol=tol, atol=tol)


def require_same_grid(*volumes: Volume, what: str = "operands") -> None:
    first = volumes[0]
    for v in volumes[1:]:
        if not same_grid(first, v):
            raise GridMismatchError(
                f"{what} must share one grid: {first.shape}/{v.shape} with differing affines"
            )


# ---------------------------------------------------------------------------
# Orientation handling
# ---------------------------------------------------------------------------

def orientation_from_affine(affine) -> str:
    """Derive the three-letter axis code of a (non-oblique) affine.

    Each voxel axis is labeled by the world axis its direction vector is
    dominated by; an affine whose voxel axes do not map to three distinct
    world axes (strongly oblique) has no code and raises.
    """
    a = np.asarray(affine, dtype=np.float64)
    rot = a[:3, :3]
    letters = []
    used = set()
    for j in range(3):
        col = rot[:, j]
        w = int(np.argmax(np.abs(col)))
        if w in used:
            raise ValidationError("affine is too oblique for an orientation code")
        used.add(w)
        letters.append(_AXIS_LETTERS[w][1 if col[w] > 0 else 0])
    return "".join(letters)


def _validate_code(code: str) -> list[tuple[int, int]]:
    """Parse an axis code into per-voxel-axis (world_axis, sign) pairs."""
    if not isinstance(code, str) or len(code) != 3:
        raise ValidationError(f"orientation code must be 3 letters, got {code!r}")
    out = []
    seen = set()
    for ch in code.upper():
        if ch not in _LETTER_TO_WORLD:
            raise ValidationError(f"invalid orientation letter {ch!r} in {code!r}")
        w, s = _LETTER_TO_WORLD[ch]
        if w in seen:
            raise ValidationError(f"orientation code {code!r} repeats a world axis")
        seen.add(w)
        out.append((w, s))
    return out


def axis_toward(affine, letter: str) -> tuple[int, int]:
    """Voxel axis dominated by ``letter``'s world axis, and the index step
    (+1/-1) that moves toward that letter."""
    if letter not in _LETTER_TO_WORLD:
        raise ValidationError(f"invalid direction letter {letter!r}")
    w, want_sign = _LETTER_TO_WORLD[letter]
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    dominants = [int(np.argmax(np.abs(rot[:, j]))) for j in range(3)]
    if sorted(dominants) != [0, 1, 2]:
        raise ValidationError("affine is too oblique to identify anatomical axes")
    ax = dominants.index(w)
    sign = 1 if rot[w, ax] > 0 else -1
    return ax, sign * want_sign


def directed_profile(v: Volume, letter: str) -> tuple[int, np.ndarray]:
    """Per-index world coordinate measured toward ``letter``.

    Returns the voxel axis that runs along that world direction and a 1D
    array (length = shape[axis]) of signed mm coordinates, increasing
    toward ``letter``. Requires a non-oblique affine, where the world
    component is a function of that single voxel axis.
    """
    w, want_sign = _LETTER_TO_WORLD[letter]
    ax, _ = axis_toward(v.affine, letter)
    row = v.affine[w]
    for other in range(3):
        if other != ax and abs(row[other]) > 1e-6 * max(v.spacing):
            raise ValidationError("affine is too oblique for an axis-aligned profile")
    idx = np.arange(v.shape[ax], dtype=np.float64)
    return ax, want_sign * (row[ax] * idx + row[3])


def reorient(v: Volume, target: str) -> Volume:
    """Permute/flip voxel axes so the volume carries ``target`` orientation.

    World coordinates are preserved exactly: the returned affine satisfies
    new_affine @ new_index == old_affine @ old_index for corresponding
    voxels, and the voxel value multiset is untouched.
    """
    wanted = _validate_code(target)
    rot = v.affine[:3, :3]
    dominants = [int(np.argmax(np.abs(rot[:, j]))) for j in range(3)]
    if sorted(dominants) != [0, 1, 2]:
        raise ValidationError("affine is too oblique to reorient by axis code")
    signs = [1 if rot[dominants[j], j] > 0 else -1 for j in range(3)]

    perm = []
    flips = []
    for w, s in wanted:
        j = dominants.index(w)
        perm.append(j)
        flips.append(signs[j] != s)

    data = v.data.transpose(perm)
    # old_index = T @ new_index, accumulating flips into the translation.
    t = np.zeros((4, 4))
    t[3, 3] = 1.0
    for new_ax, (old_ax, flip) in enumerate(zip(perm, flips)):
        if flip:
            data = np.flip(data, axis=new_ax)
            t[old_ax, new_ax] = -1.0
            t[old_ax, 3] = v.shape[old_ax] - 1
        else:
            t[old_ax, new_ax] = 1.0
    new_affine = v.affine @ t
    return Volume(data, new_affine, v.kind)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _voxel_map(src_affine: np.ndarray, tgt_affine: np.ndarray) -> np.ndarray:
    """Target-voxel-index to source-voxel-index 4x4 map, with near-integer
    entries snapped so grid-aligned resampling is exact."""
    m = np.linalg.solve(src_affine, tgt_affine)
    r = np.round(m)
    near = np.abs(m - r) < _GRID_SNAP_TOL
    m[near] = r[near]
    return m


def _interp_order(v: Volume, mode: str) -> int:
    if mode not in ("nearest", "trilinear"):
        raise ValidationError(f"mode must be 'nearest' or 'trilinear', got {mode!r}")
    if v.is_labelmap and mode != "nearest":
        raise ValidationError("labelmaps must be resampled with mode='nearest'")
    return 0 if mode == "nearest" else 1


def resample(v: Volume, target: GridSpec, mode: str | None = None) -> Volume:
    """Sample the volume at the world positions of a target grid.

    Values outside the source grid (any source coordinate beyond
    [0, n-1]) are set to 0. Labelmaps require nearest interpolation;
    ``mode=None`` picks nearest for labelmaps and trilinear for images.
    """
    if mode is None:
        mode = "nearest" if v.is_labelmap else "trilinear"
    order = _interp_order(v, mode)
    out, _ = _resample_array(v.data, v.affine, target, order)
    return Volume(out, target.affine, v.kind, copy=False)


def _resample_array(
    data: np.ndarray,
    src_affine: np.ndarray,
    target: GridSpec,
    order: int,
    *,
    want_inside: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Core resampler; optionally also returns the in-bounds mask."""
    src_grid = GridSpec.from_affine(data.shape, src_affine)
    if target.same_as(src_grid, tol=0.0) and not want_inside:
        return data.copy(), None

    m = _voxel_map(src_affine, target.affine)
    if order == 1 and not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)

    nx, ny, nz = target.shape
    out = np.empty(target.shape, dtype=data.dtype)
    inside_full = np.empty(target.shape, dtype=bool) if want_inside else None
    jj = np.arange(ny, dtype=np.float64)[:, None]
    kk = np.arange(nz, dtype=np.float64)[None, :]
    lim = [n - 1.0 for n in data.shape]

    slab = max(1, _RESAMPLE_CHUNK_VOXELS // max(1, ny * nz))
    for i0 in range(0, nx, slab):
        i1 = min(nx, i0 + slab)
        ii = np.arange(i0, i1, dtype=np.float64)[:, None, None]
        coords = [m[a, 0] * ii + m[a, 1] * jj + m[a, 2] * kk + m[a, 3] for a in range(3)]
        inside = (
            (coords[0] >= 0.0) & (coords[0] <= lim[0])
            & (coords[1] >= 0.0) & (coords[1] <= lim[1])
            & (coords[2] >= 0.0) & (coords[2] <= lim[2])
        )
        vals = map_coordinates(data, coords, order=order, mode="nearest")
        vals[~inside] = 0
        out[i0:i1] = vals
        if want_inside:
            inside_full[i0:i1] = inside
    return out, inside_full


# ---------------------------------------------------------------------------
# Elastic deformation
# ---------------------------------------------------------------------------

def elastic_deform(
    v: Volume,
    control_spacing: float = 32.0,
    sigma: float = 4.0,
    seed: int = 0,
    mode: str | None = None,
) -> Volume:
    """Random smooth warp for training-set augmentation.

    A displacement field is drawn on a coarse control grid (per-axis
    i.i.d. normal, std ``sigma`` mm, spacing ``control_spacing`` mm),
    trilinearly upsampled to voxel resolution, and applied by backward
    warping. Deterministic for a given (seed, shape, parameters); sigma=0
    returns the input unchanged.
    """
    if control_spacing <= 0:
        raise ValidationError("control_spacing must be positive")
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if mode is None:
        mode = "nearest" if v.is_labelmap else "trilinear"
    order = _interp_order(v, mode)
    if sigma == 0.0:
        return Volume(v.data, v.affine, v.kind)

    spacing = v.spacing
    disp_mm = displacement_field(v.shape, spacing, control_spacing, sigma, seed)
    data = v.data
    if order == 1 and not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)

    coords = []
    for ax in range(3):
        idx = np.arange(v.shape[ax], dtype=np.float64).reshape(
            [-1 if a == ax else 1 for a in range(3)]
        )
        coords.append(idx + disp_mm[ax] / spacing[ax])

    inside = (
        (coords[0] >= 0.0) & (coords[0] <= v.shape[0] - 1.0)
        & (coords[1] >= 0.0) & (coords[1] <= v.shape[1] - 1.0)
        & (coords[2] >= 0.0) & (coords[2] <= v.shape[2] - 1.0)
    )
    vals = map_coordinates(data, coords, order=order, mode="nearest")
    vals[~inside] = 0
    return Volume(vals, v.affine, v.kind, copy=False)


def displacement_field(
    shape: Sequence[int],
    spacing: Sequence[float],
    control_spacing: float,
    sigma: float,
    seed: int,
) -> np.ndarray:
    """The (3, *shape) mm displacement field elastic_deform would apply.

    Exposed so the field statistics can be inspected without warping.
    """
    shape = tuple(int(n) for n in shape)
    nodes = [int(np.floor((n - 1) * sp / control_spacing)) + 2 for n, sp in zip(shape, spacing)]
    rng = np.random.Generator(np.random.Philox(seed))
    field = rng.normal(0.0, sigma, size=(3,) + tuple(nodes))
    u = [np.arange(n, dtype=np.float64) * sp / control_spacing for n, sp in zip(shape, spacing)]
    uu = np.meshgrid(*u, indexing="ij")
    return np.stack([map_coordinates(field[ax], uu, order=1, mode="nearest") for ax in range(3)])


def crop(v: Volume, slices: tuple[slice, slice, slice]) -> Volume:
    """Sub-volume for index slices, with the affine shifted to match."""
    starts = []
    for sl, n in zip(slices, v.shape):
        start, stop, step = sl.indices(n)
        if step != 1 or stop <= start:
            raise ValidationError(f"crop slices must be forward unit-step, got {sl}")
        starts.append(start)
    affine = v.affine.copy()
    affine[:3, 3] += affine[:3, :3] @ np.asarray(starts, dtype=np.float64)
    return Volume(v.data[slices], affine, v.kind)


def bounding_grid(
    volumes: Iterable[Volume],
    spacing: Sequence[float],
    orientation: str = "RAS",
) -> GridSpec:
    """Smallest axis-aligned grid (at ``spacing``, in ``orientation``)
    whose voxel centers span the union of the inputs' voxel centers."""
    wanted = _validate_code(orientation)
    pts = []
    for v in volumes:
        n0, n1, n2 = v.shape
        corners = np.array(
            [(i, j, k) for i in (0, n0 - 1) for j in (0, n1 - 1) for k in (0, n2 - 1)],
            dtype=np.float64,
        )
        pts.append(v.world_points(corners))
    allpts = np.vstack(pts)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)

    spacing = [float(s) for s in np.asarray(spacing, dtype=np.float64)]
    affine = np.eye(4)
    shape = []
    for ax, (w, sgn) in enumerate(wanted):
        extent = hi[w] - lo[w]
        n = int(np.round(extent / spacing[ax])) + 1
        affine[:3, ax] = 0.0
        affine[w, ax] = sgn * spacing[ax]
        affine[w, 3] = lo[w] if sgn > 0 else hi[w]
        shape.append(max(1, n))
    return GridSpec(tuple(shape), tuple(spacing), affine)
