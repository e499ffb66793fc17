"""Sliding-window tile planning and memory-bounded fusion of patch scores.

A pluggable patch oracle (the stand-in for a trained network) maps an
image patch to per-class scores; fusion blends overlapping tiles with a
uniform or Gaussian kernel and takes the argmax label. Processing is
chunked along the through-plane axis (axis 2) so the per-class score
accumulator never exceeds a configured byte budget, while producing
bit-identical results to unchunked fusion.
"""

from __future__ import annotations

import shlex
import struct
import subprocess
from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import ValidationError
from .volume import Volume

DEFAULT_PATCH_SHAPE = (224, 224, 64)
DEFAULT_OVERLAP = 0.5
DEFAULT_KERNEL = "gaussian"
DEFAULT_MEMORY_BUDGET = 2 << 30  # 2 GiB

_PRECISIONS = {"float32": np.float32, "float16": np.float16}


@dataclass(frozen=True)
class TilePlan:
    patch_shape: tuple[int, int, int]
    step: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]
    weight_kernel: str  # "uniform" | "gaussian"
    volume_shape: tuple[int, int, int]


@dataclass(frozen=True)
class FusionConfig:
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    accumulator_precision: str = "float32"

    def derive_chunk_depth(self, plan: "TilePlan", num_classes: int) -> int:
        """Through-plane slices whose per-class accumulator fits the budget.

        Raises when the budget cannot hold even one chunk of the patch
        through-plane extent.
        """
        dtype = _PRECISIONS.get(self.accumulator_precision)
        if dtype is None:
            raise ValidationError(
                f"accumulator_precision must be one of {sorted(_PRECISIONS)}"
            )
        nx, ny, nz = plan.volume_shape
        bytes_per_z = (num_classes + 1) * nx * ny * np.dtype(dtype).itemsize
        depth = min(nz, int(self.memory_budget // bytes_per_z))
        pz = plan.patch_shape[2]
        if depth < pz:
            raise ValidationError(
                f"memory budget {self.memory_budget} B cannot hold one chunk of "
                f"the patch depth ({pz} slices need {pz * bytes_per_z} B)"
            )
        return depth


@dataclass
class FusionStats:
    chunk_depth: int
    num_chunks: int
    peak_accumulator_bytes: int
    tiles_evaluated: int
    scores: np.ndarray | None = None  # normalized (C, *volume), if kept


def plan_tiles(
    volume_shape,
    patch_shape=DEFAULT_PATCH_SHAPE,
    overlap_fraction: float = DEFAULT_OVERLAP,
    weight_kernel: str = DEFAULT_KERNEL,
) -> TilePlan:
    """Minimal axis-aligned tile grid covering the volume.

    Step is ceil(patch x (1 - overlap)); the last tile per axis is
    clamped to end at the volume boundary, so every voxel is covered.
    """
    vol = tuple(int(n) for n in volume_shape)
    patch = tuple(int(n) for n in patch_shape)
    if len(vol) != 3 or len(patch) != 3 or min(patch) < 1:
        raise ValidationError("volume_shape and patch_shape must be 3 positive integers")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValidationError(f"overlap_fraction must be in [0,1), got {overlap_fraction}")
    if weight_kernel not in ("uniform", "gaussian"):
        raise ValidationError(f"weight_kernel must be uniform or gaussian, got {weight_kernel!r}")
    if any(p > n for p, n in zip(patch, vol)):
        raise ValidationError(
            f"patch {patch} exceeds volume {vol}; zero-pad smaller volumes first"
        )

    per_axis = []
    step = []
    for p, n in zip(patch, vol):
        s = max(1, ceil(p * (1.0 - overlap_fraction)))
        step.append(s)
        offs = list(range(0, n - p + 1, s))
        if offs[-1] != n - p:
            offs.append(n - p)
        per_axis.append(offs)
    origins = tuple(
        (i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]
    )
    return TilePlan(
        patch_shape=patch,
        step=tuple(step),
        origins=origins,
        weight_kernel=weight_kernel,
        volume_shape=vol,
    )


def kernel_weights(plan: TilePlan, dtype=np.float32) -> np.ndarray:
    """Per-voxel tile weight: ones, or a separable Gaussian (sigma=patch/8)."""
    if plan.weight_kernel == "uniform":
        return np.ones(plan.patch_shape, dtype=dtype)
    w = np.ones((), dtype=np.float64)
    for ax, n in enumerate(plan.patch_shape):
        sigma = n / 8.0
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        g = np.exp(-0.5 * (x / sigma) ** 2)
        w = w[..., None] * g if ax else g
    out = w.astype(dtype)
    # Corner weights must stay positive after the dtype cast (float16
    # would otherwise flush them to zero and break coverage).
    return np.maximum(out, np.finfo(dtype).tiny)


# ---------------------------------------------------------------------------
# Patch oracles
# ---------------------------------------------------------------------------

class PatchOracle:
    """Maps an image patch to per-class scores.

    Subclasses implement :meth:`evaluate`; it must be deterministic and
    return float32 scores of shape (num_classes, *patch_shape).
    """

    num_classes: int = 2

    def evaluate(self, patch: np.ndarray, aux: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError


def _one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    scores = np.zeros((num_classes,) + classes.shape, dtype=np.float32)
    for c in range(num_classes):
        scores[c][classes == c] = 1.0
    return scores


class ConstantOracle(PatchOracle):
    """Scores class ``c`` everywhere."""

    def __init__(self, c: int, num_classes: int | None = None):
        c = int(c)
        if c < 0:
            raise ValidationError("constant oracle class must be >= 0")
        self.constant = c
        self.num_classes = max(2, c + 1) if num_classes is None else int(num_classes)
        if self.constant >= self.num_classes:
            raise ValidationError("constant class outside num_classes")

    def evaluate(self, patch, aux=None):
        scores = np.zeros((self.num_classes,) + patch.shape, dtype=np.float32)
        scores[self.constant] = 1.0
        return scores


class ThresholdOracle(PatchOracle):
    """Class 1 where intensity > t, else class 0."""

    def __init__(self, t: float):
        self.threshold = float(t)
        self.num_classes = 2

    def evaluate(self, patch, aux=None):
        return _one_hot((patch > self.threshold).astype(np.int8), 2)


class CheckerboardOracle(PatchOracle):
    """Class = parity of the patch-local voxel index sum."""

    num_classes = 2

    def evaluate(self, patch, aux=None):
        i, j, k = np.indices(patch.shape)
        return _one_hot(((i + j + k) % 2).astype(np.int8), 2)


class BinsOracle(PatchOracle):
    """Class = number of thresholds strictly below the intensity."""

    def __init__(self, thresholds):
        ts = sorted(float(t) for t in thresholds)
        if not ts:
            raise ValidationError("bins oracle needs at least one threshold")
        self.thresholds = ts
        self.num_classes = len(ts) + 1

    def evaluate(self, patch, aux=None):
        classes = np.zeros(patch.shape, dtype=np.int16)
        for t in self.thresholds:
            classes += patch > t
        return _one_hot(classes, self.num_classes)


def mock_oracle(kind: str, *params, num_classes: int | None = None) -> PatchOracle:
    """Deterministic test oracles: constant(c), threshold(t), checkerboard,
    bins(t1,t2,...)."""
    if kind == "constant":
        return ConstantOracle(params[0], num_classes=num_classes)
    if kind == "threshold":
        return ThresholdOracle(params[0])
    if kind == "checkerboard":
        return CheckerboardOracle()
    if kind == "bins":
        return BinsOracle(params)
    raise ValidationError(f"unknown mock oracle kind {kind!r}")


class SubprocessOracle(PatchOracle):
    """Patch oracle speaking a raw little-endian pipe protocol.

    For each patch one frame goes to the child's stdin and one comes back
    on its stdout. Frame layout (all little-endian): uint32 rank, rank x
    uint32 dims, then float32 payload in C order. Requests have rank 4
    with shape (channels, *patch) — channels is 1, or 2 when a quadrant
    patch rides along. Responses must have rank 4 with shape
    (num_classes, *patch).
    """

    def __init__(self, command, num_classes: int):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.num_classes = int(num_classes)
        if self.num_classes < 2:
            raise ValidationError("subprocess oracle needs num_classes >= 2")
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        return self._proc

    @staticmethod
    def _write_frame(stream, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(arr.tobytes())
        stream.flush()

    @staticmethod
    def _read_exact(stream, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = stream.read(n - len(buf))
            if not chunk:
                raise ValidationError("oracle subprocess closed its stdout mid-frame")
            buf += chunk
        return buf

    def _read_frame(self, stream) -> np.ndarray:
        (rank,) = struct.unpack("<I", self._read_exact(stream, 4))
        dims = struct.unpack(f"<{rank}I", self._read_exact(stream, 4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = self._read_exact(stream, 4 * count)
        return np.frombuffer(payload, dtype="<f4").reshape(dims)

    def evaluate(self, patch, aux=None):
        request = patch[None].astype(np.float32)
        if aux is not None:
            request = np.stack([patch, aux]).astype(np.float32)
        proc = self._ensure()
        self._write_frame(proc.stdin, request)
        scores = self._read_frame(proc.stdout)
        expected = (self.num_classes,) + tuple(patch.shape)
        if scores.shape != expected:
            raise ValidationError(
                f"oracle returned shape {scores.shape}, expected {expected}"
            )
        return scores.astype(np.float32, copy=False)

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_oracle_spec(spec: str, num_classes: int | None = None) -> PatchOracle:
    """Build an oracle from a CLI spec: ``mock:threshold:0.5``,
    ``mock:constant:3``, ``mock:checkerboard``, ``mock:bins:0.5,1.5``,
    or ``proc:<command line>``."""
    head, _, rest = spec.partition(":")
    if head == "mock":
        kind, _, args = rest.partition(":")
        params: tuple = ()
        if kind in ("constant",):
            params = (int(args),) if args else ()
        elif kind in ("threshold", "bins"):
            params = tuple(float(x) for x in args.split(",") if x != "")
        if kind == "threshold":
            if len(params) != 1:
                raise ValidationError("mock:threshold needs exactly one value")
            return ThresholdOracle(params[0])
        return mock_oracle(kind, *params, num_classes=num_classes)
    if head == "proc":
        if num_classes is None:
            raise ValidationError("proc oracles require --num-classes")
        return SubprocessOracle(rest, num_classes)
    raise ValidationError(f"unknown oracle spec {spec!r}")


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fuse_scored(
    plan: TilePlan,
    image: Volume,
    oracle: PatchOracle,
    cfg: FusionConfig | None = None,
    aux: Volume | None = None,
    keep_scores: bool = False,
) -> tuple[Volume, FusionStats]:
    """Fuse oracle scores over the tile plan into an argmax labelmap.

    Per voxel the fused score is sum(kernel x score) over covering tiles
    (in plan order), normalized by the kernel sum; ties go to the lower
    class id. The per-class accumulator lives only for the active
    through-plane chunk, whose depth is derived from the memory budget.
    """
    cfg = cfg or FusionConfig()
    if tuple(image.shape) != plan.volume_shape:
        raise ValidationError(
            f"plan was made for shape {plan.volume_shape}, image is {image.shape}"
        )
    if oracle.num_classes < 2:
        raise ValidationError("oracle must score at least 2 classes")
    if aux is not None and tuple(aux.shape) != plan.volume_shape:
        raise ValidationError("aux volume must be on the image grid")
    acc_dtype = _PRECISIONS.get(cfg.accumulator_precision)
    if acc_dtype is None:
        raise ValidationError(
            f"accumulator_precision must be one of {sorted(_PRECISIONS)}"
        )

    nx, ny, nz = plan.volume_shape
    px, py, pz = plan.patch_shape
    num_classes = int(oracle.num_classes)
    chunk_depth = cfg.derive_chunk_depth(plan, num_classes)

    kernel = kernel_weights(plan, dtype=acc_dtype)
    labels = np.zeros(plan.volume_shape, dtype=np.int32)
    kept = (
        np.zeros((num_classes, nx, ny, nz), dtype=acc_dtype) if keep_scores else None
    )
    aux_data = aux.data if aux is not None else None

    peak = 0
    num_chunks = 0
    tiles_evaluated = 0
    for c0 in range(0, nz, chunk_depth):
        c1 = min(nz, c0 + chunk_depth)
        num_chunks += 1
        acc = np.zeros((num_classes, nx, ny, c1 - c0), dtype=acc_dtype)
        wsum = np.zeros((nx, ny, c1 - c0), dtype=acc_dtype)
        peak = max(peak, acc.nbytes + wsum.nbytes)

        for ox, oy, oz in plan.origins:
            lo = max(oz, c0)
            hi = min(oz + pz, c1)
            if lo >= hi:
                continue
            patch = image.data[ox : ox + px, oy : oy + py, oz : oz + pz]
            aux_patch = (
                aux_data[ox : ox + px, oy : oy + py, oz : oz + pz]
                if aux_data is not None
                else None
            )
            scores = oracle.evaluate(patch, aux_patch)
            if scores.shape != (num_classes, px, py, pz):
                raise ValidationError(
                    f"oracle returned shape {scores.shape}, expected "
                    f"{(num_classes, px, py, pz)}"
                )
            tiles_evaluated += 1
            zs = slice(lo - oz, hi - oz)
            kslice = kernel[:, :, zs]
            acc[:, ox : ox + px, oy : oy + py, lo - c0 : hi - c0] += (
                scores[:, :, :, zs].astype(acc_dtype, copy=False) * kslice
            )
            wsum[ox : ox + px, oy : oy + py, lo - c0 : hi - c0] += kslice

        # wsum > 0 everywhere (coverage), and is class-independent, so the
        # argmax of the raw accumulator equals the argmax of normalized scores.
        labels[:, :, c0:c1] = np.argmax(acc, axis=0)
        if kept is not None:
            kept[:, :, :, c0:c1] = acc / wsum

    out = Volume(labels, image.affine, "labelmap", copy=False)
    return out, FusionStats(
        chunk_depth=chunk_depth,
        num_chunks=num_chunks,
        peak_accumulator_bytes=peak,
        tiles_evaluated=tiles_evaluated,
        scores=kept,
    )


def fuse(
    plan: TilePlan,
    image: Volume,
    oracle: PatchOracle,
    cfg: FusionConfig | None = None,
    aux: Volume | None = None,
) -> Volume:
    """Fusion entry point returning just the labelmap."""
    out, _ = fuse_scored(plan, image, oracle, cfg=cfg, aux=aux)
    return out


def pad_to_patch(image: Volume, patch_shape) -> tuple[Volume, tuple[slice, slice, slice]]:
    """Zero-pad a volume (centered) up to at least the patch shape.

    Returns the padded volume and the slices that recover the original
    region; the affine shifts so world coordinates are preserved.
    """
    patch = tuple(int(p) for p in patch_shape)
    before = []
    after = []
    for n, p in zip(image.shape, patch):
        missing = max(0, p - n)
        before.append(missing // 2)
        after.append(missing - missing // 2)
    if not any(before) and not any(after):
        return image, tuple(slice(0, n) for n in image.shape)
    padded = np.pad(
        image.data, list(zip(before, after)), mode="constant", constant_values=0
    )
    affine = image.affine.copy()
    affine[:3, 3] -= affine[:3, :3] @ np.asarray(before, dtype=np.float64)
    crop = tuple(slice(b, b + n) for b, n in zip(before, image.shape))
    return Volume(padded, affine, image.kind, copy=False), crop
