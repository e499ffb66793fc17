"""Label-schema catalog, CT-schema mapping, and label-volume validation.

The shipped catalog (``data/catalog_v1.json``) freezes the 71 semantic
classes plus the 22 vertebra instance levels, with per-class chirality,
component rules, and merge priorities. Numeric ids are an artifact of
this catalog version; interop with other id layouts goes through a
user-supplied catalog JSON of the same format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volume import Volume, axis_toward

GROUPS = (
    "organ", "muscle", "vessel", "bone", "digestion",
    "lung", "spine", "body-composition", "other",
)

CATALOG_VERSION = "vibe-catalog-1"
CT_REFERENCE_VERSION = "ct-reference-1"


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    group: str = "other"
    chirality: str = "none"  # none | left | right
    partner_id: int | None = None
    single_component: bool = False
    min_component_volume: float = 0.0  # mm^3
    merge_priority: int = 99  # lower rank merges first

    def __post_init__(self):
        if self.id <= 0:
            raise ValidationError(f"class id must be positive, got {self.id}")
        if self.group not in GROUPS:
            raise ValidationError(f"unknown group {self.group!r} for class {self.name!r}")
        if self.chirality not in ("none", "left", "right"):
            raise ValidationError(f"bad chirality {self.chirality!r} for class {self.name!r}")
        if self.min_component_volume < 0:
            raise ValidationError("min_component_volume must be >= 0")


@dataclass(frozen=True)
class InstanceClassDef:
    id: int
    level: str  # C3..C7, T1..T12, L1..L5


VERTEBRA_LEVELS = tuple(
    [f"C{i}" for i in range(3, 8)] + [f"T{i}" for i in range(1, 13)] + [f"L{i}" for i in range(1, 6)]
)


class LabelSchema:
    """Immutable catalog of semantic classes (plus optional instance levels)."""

    def __init__(self, version: str, classes, instance_classes=()):
        self.version = str(version)
        self.classes: tuple[ClassDef, ...] = tuple(classes)
        self.instance_classes: tuple[InstanceClassDef, ...] = tuple(instance_classes)
        self._by_id = {c.id: c for c in self.classes}
        self._by_name = {c.name: c for c in self.classes}
        if len(self._by_id) != len(self.classes):
            raise ValidationError("duplicate class ids in schema")
        if len(self._by_name) != len(self.classes):
            raise ValidationError("duplicate class names in schema")
        for c in self.classes:
            if c.chirality == "none":
                continue
            if c.partner_id is None or c.partner_id not in self._by_id:
                raise ValidationError(f"chiral class {c.name!r} has no partner")
            p = self._by_id[c.partner_id]
            want = "right" if c.chirality == "left" else "left"
            if p.chirality != want or p.partner_id != c.id:
                raise ValidationError(f"asymmetric chirality pairing {c.name!r} / {p.name!r}")
        inst_ids = {i.id for i in self.instance_classes}
        if len(inst_ids) != len(self.instance_classes):
            raise ValidationError("duplicate instance ids in schema")

    def __contains__(self, class_id: int) -> bool:
        return int(class_id) in self._by_id

    def __getitem__(self, class_id: int) -> ClassDef:
        try:
            return self._by_id[int(class_id)]
        except KeyError:
            raise ValidationError(f"class id {class_id} not in schema {self.version}") from None

    def by_name(self, name: str) -> ClassDef | None:
        return self._by_name.get(_norm(name))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.classes)

    def chirality_pairs(self) -> list[tuple[ClassDef, ClassDef]]:
        """(left, right) class pairs, each pair listed once."""
        return [
            (c, self._by_id[c.partner_id])
            for c in self.classes
            if c.chirality == "left"
        ]

    # -- serialization ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        try:
            classes = [
                ClassDef(
                    id=int(c["id"]),
                    name=_norm(c["name"]),
                    group=c.get("group", "other"),
                    chirality=c.get("chirality", "none"),
                    partner_id=c.get("partner_id"),
                    single_component=bool(c.get("single_component", False)),
                    min_component_volume=float(c.get("min_volume_mm3", 0.0)),
                    merge_priority=int(c.get("priority", 99)),
                )
                for c in d["classes"]
            ]
            instances = [
                InstanceClassDef(id=int(i["id"]), level=str(i["level"]))
                for i in d.get("instance_classes", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed catalog: {exc}") from exc
        return cls(d.get("version", "unversioned"), classes, instances)

    @classmethod
    def from_json(cls, path) -> "LabelSchema":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "classes": [
                {
                    "id": c.id,
                    "name": c.name,
                    "group": c.group,
                    "chirality": c.chirality,
                    "partner_id": c.partner_id,
                    "single_component": c.single_component,
                    "min_volume_mm3": c.min_component_volume,
                    "priority": c.merge_priority,
                }
                for c in self.classes
            ],
            "instance_classes": [
                {"id": i.id, "level": i.level} for i in self.instance_classes
            ],
        }

    def dump_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def diff(self, other: "LabelSchema") -> list[str]:
        """Human-readable field-level differences between two catalogs."""
        out = []
        if self.version != other.version:
            out.append(f"version: {self.version} != {other.version}")
        mine, theirs = self._by_id, other._by_id
        for cid in sorted(set(mine) | set(theirs)):
            a, b = mine.get(cid), theirs.get(cid)
            if a is None:
                out.append(f"class {cid} only in right ({b.name})")
            elif b is None:
                out.append(f"class {cid} only in left ({a.name})")
            elif a != b:
                fields = [
                    f
                    for f in ("name", "group", "chirality", "partner_id",
                              "single_component", "min_component_volume", "merge_priority")
                    if getattr(a, f) != getattr(b, f)
                ]
                out.append(f"class {cid} ({a.name}) differs in: {', '.join(fields)}")
        if [i.level for i in self.instance_classes] != [i.level for i in other.instance_classes]:
            out.append("instance level lists differ")
        return out


def _norm(name: str) -> str:
    return str(name).strip().lower().replace(" ", "_")


def _load_packaged(name: str) -> dict:
    with resources.files("torsoseg.data").joinpath(name).open() as f:
        return json.load(f)


@lru_cache(maxsize=1)
def builtin_schema() -> LabelSchema:
    """The shipped 71-class semantic + 22-level instance catalog."""
    return LabelSchema.from_dict(_load_packaged("catalog_v1.json"))


@lru_cache(maxsize=1)
def ct_reference_schema() -> LabelSchema:
    """Reference CT-side catalog (names only; ids are this file's own)."""
    return LabelSchema.from_dict(_load_packaged("ct_reference_v1.json"))


# ---------------------------------------------------------------------------
# CT-catalog mapping
# ---------------------------------------------------------------------------

@dataclass
class MappingReport:
    mapped: list[tuple[int, int]] = field(default_factory=list)
    dropped: list[tuple[int, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


_DROP_REASONS = (
    (("brain", "skull"), "outside field of view"),
    (("rib_",), "not reproduced"),
    (("kidney_cyst",), "out of scope"),
)


def _map_ct_name(name: str, target: LabelSchema) -> tuple[int | None, str | None, str | None]:
    """Resolve one CT class name to (target_id, drop_reason, warning)."""
    n = _norm(name)
    if n in ("colon", "small_bowel"):
        return target.by_name("intestine").id, None, None
    if n.startswith("vertebrae_"):
        return (
            target.by_name("vertebra_body").id,
            None,
            f"{n}: per-level vertebra labels collapse to vertebra_body; the "
            "body/posterior-elements split is not derivable by relabeling",
        )
    for prefixes, reason in _DROP_REASONS:
        if any(n == p or n.startswith(p) for p in prefixes):
            return None, reason, None
    hit = target.by_name(n)
    if hit is not None:
        return hit.id, None, None
    return None, "no counterpart class", None


def map_total_ct(
    labels: Volume,
    ct_catalog: LabelSchema,
    target: LabelSchema | None = None,
) -> tuple[Volume, MappingReport]:
    """Relabel a CT-schema labelmap into the torso catalog.

    Colon and small bowel merge into intestine; per-level vertebrae map to
    the combined vertebra-body class (with a warning); ribs, brain, skull
    and kidney cysts are dropped with reasons. Ids present in the volume
    but unknown to ``ct_catalog`` are zeroed and reported, not fatal.
    """
    if not labels.is_labelmap:
        raise ValidationError("map_total_ct expects a labelmap volume")
    target = target or builtin_schema()
    report = MappingReport()

    present = np.unique(labels.data)
    present = present[present != 0]
    max_id = int(present.max()) if present.size else 0
    lut = np.zeros(max_id + 1, dtype=np.int64)
    warned: set[str] = set()
    for sid in (int(s) for s in present):
        if sid not in ct_catalog:
            report.dropped.append((sid, "unknown id"))
            continue
        tid, reason, warning = _map_ct_name(ct_catalog[sid].name, target)
        if warning and warning not in warned:
            report.warnings.append(warning)
            warned.add(warning)
        if tid is None:
            report.dropped.append((sid, reason))
        else:
            lut[sid] = tid
            report.mapped.append((sid, tid))

    out = lut[labels.data] if max_id else labels.data.astype(np.int64)
    return labels.with_data(out, copy=False), report


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class LabelReport:
    unknown: list[tuple[int, int]]  # (id, voxel_count)
    classes: list[dict]  # id, name, voxels, volume_mm3
    empty_groups: list[str]


def validate_labels(labels: Volume, schema: LabelSchema) -> LabelReport:
    """Per-class voxel/volume accounting plus unknown-id findings."""
    if not labels.is_labelmap:
        raise ValidationError("validate_labels expects a labelmap volume")
    counts = np.bincount(labels.data.ravel())
    voxvol = labels.voxel_volume

    unknown = []
    stats = []
    group_voxels = {c.group: 0 for c in schema.classes}
    for cid in range(1, counts.size):
        n = int(counts[cid])
        if n == 0:
            continue
        if cid in schema:
            c = schema[cid]
            stats.append(
                {"id": cid, "name": c.name, "voxels": n, "volume_mm3": n * voxvol}
            )
            group_voxels[c.group] += n
        else:
            unknown.append((cid, n))
    empty = sorted(g for g, n in group_voxels.items() if n == 0)
    return LabelReport(unknown=unknown, classes=stats, empty_groups=empty)


# ---------------------------------------------------------------------------
# Laterality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LateralityFlag:
    left_id: int
    right_id: int
    status: str  # "swapped" | "indeterminate"
    left_offset_mm: float
    right_offset_mm: float


def laterality_check(labels: Volume, schema: LabelSchema) -> list[LateralityFlag]:
    """Flag chirality pairs whose centroids sit on the wrong side.

    The mid-sagittal plane passes through the whole-foreground centroid,
    with its normal the anatomical-left direction taken from the affine.
    Offsets are signed mm toward anatomical left; a pair with either
    centroid within one voxel of the plane is flagged indeterminate.
    """
    if not labels.is_labelmap:
        raise ValidationError("laterality_check expects a labelmap volume")
    data = labels.data
    fg = np.nonzero(data)
    if fg[0].size == 0:
        raise ValidationError("laterality_check requires a nonempty foreground")

    # Plane normal: the voxel axis running left-right, pointed toward
    # anatomical left (world -x).
    lr_axis, _ = axis_toward(labels.affine, "L")
    col = labels.affine[:3, lr_axis]
    left_unit = col / np.linalg.norm(col)
    if left_unit[0] > 0:
        left_unit = -left_unit

    center_idx = np.array([fg[0].mean(), fg[1].mean(), fg[2].mean()])
    plane_point = labels.world_points(center_idx)[0]
    voxel_tol = labels.spacing[lr_axis]

    def class_offset(cid: int) -> float | None:
        loc = np.nonzero(data == cid)
        if loc[0].size == 0:
            return None
        idx = np.array([loc[0].mean(), loc[1].mean(), loc[2].mean()])
        return float((labels.world_points(idx)[0] - plane_point) @ left_unit)

    flags = []
    for left, right in schema.chirality_pairs():
        lo = class_offset(left.id)
        ro = class_offset(right.id)
        if lo is None or ro is None:
            continue
        if abs(lo) < voxel_tol or abs(ro) < voxel_tol:
            flags.append(LateralityFlag(left.id, right.id, "indeterminate", lo, ro))
        elif lo < 0 or ro > 0:
            flags.append(LateralityFlag(left.id, right.id, "swapped", lo, ro))
    return flags
