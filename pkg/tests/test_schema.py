import numpy as np
import pytest

from torsoseg import (
    LabelSchema,
    ValidationError,
    builtin_schema,
    ct_reference_schema,
    laterality_check,
    map_total_ct,
    validate_labels,
)
from torsoseg.schema import VERTEBRA_LEVELS, ClassDef

from util import mkvol


def ct_id(name):
    return next(c.id for c in ct_reference_schema().classes if c.name == name)


def vibe_id(name):
    return builtin_schema().by_name(name).id


class TestBuiltinCatalog:
    def test_semantic_class_count(self):
        assert len(builtin_schema().classes) == 71

    def test_instance_class_count(self):
        assert len(builtin_schema().instance_classes) == 22

    def test_instance_levels_ordered_superior_to_inferior(self):
        levels = [i.level for i in builtin_schema().instance_classes]
        assert levels == list(VERTEBRA_LEVELS)
        assert levels[0] == "C3" and levels[-1] == "L5"

    def test_every_left_class_has_right_partner(self):
        s = builtin_schema()
        lefts = [c for c in s.classes if c.chirality == "left"]
        rights = [c for c in s.classes if c.chirality == "right"]
        assert len(lefts) == len(rights) > 0
        for c in lefts:
            p = s[c.partner_id]
            assert p.chirality == "right" and p.partner_id == c.id

    def test_expected_new_classes_present(self):
        s = builtin_schema()
        for name in (
            "intestine", "outer_skin", "muscle_other", "inner_fat",
            "intervertebral_disc", "vertebra_body",
            "vertebra_posterior_elements", "spinal_canal", "bone_other",
        ):
            assert s.by_name(name) is not None, name

    def test_dropped_ct_classes_absent(self):
        s = builtin_schema()
        for name in ("brain", "skull", "colon", "small_bowel", "kidney_cyst_left"):
            assert s.by_name(name) is None, name
        assert not any(c.name.startswith("rib") for c in s.classes)

    def test_ids_are_dense_from_one(self):
        assert sorted(builtin_schema().ids) == list(range(1, 72))

    def test_json_round_trip_and_diff(self, tmp_path):
        s = builtin_schema()
        p = tmp_path / "cat.json"
        s.dump_json(p)
        again = LabelSchema.from_json(p)
        assert s.diff(again) == []
        tweaked = LabelSchema(
            again.version,
            [
                ClassDef(**{**c.__dict__, "merge_priority": 42}) if c.id == 1 else c
                for c in again.classes
            ],
            again.instance_classes,
        )
        assert any("merge_priority" in line for line in s.diff(tweaked))

    def test_asymmetric_pairing_rejected(self):
        with pytest.raises(ValidationError):
            LabelSchema(
                "x",
                [
                    ClassDef(id=1, name="a_left", chirality="left", partner_id=2),
                    ClassDef(id=2, name="a_right", chirality="none"),
                ],
            )


class TestMapTotalCT:
    def test_colon_and_small_bowel_become_intestine(self):
        lab = np.zeros((4, 4, 4), np.int32)
        lab[0] = ct_id("colon")
        lab[1] = ct_id("small_bowel")
        out, report = map_total_ct(mkvol(lab), ct_reference_schema())
        assert set(np.unique(out.data)) == {0, vibe_id("intestine")}
        assert len(report.mapped) == 2

    def test_ribs_dropped_with_reason(self):
        lab = np.full((3, 3, 3), ct_id("rib_right_7"), np.int32)
        out, report = map_total_ct(mkvol(lab), ct_reference_schema())
        assert np.all(out.data == 0)
        assert report.dropped and "reproduc" in report.dropped[0][1]

    def test_brain_skull_cyst_reasons(self):
        lab = np.zeros((4, 4, 4), np.int32)
        lab[0, 0, 0] = ct_id("brain")
        lab[1, 1, 1] = ct_id("skull")
        lab[2, 2, 2] = ct_id("kidney_cyst_right")
        out, report = map_total_ct(mkvol(lab), ct_reference_schema())
        assert np.all(out.data == 0)
        reasons = {sid: reason for sid, reason in report.dropped}
        assert "field of view" in reasons[ct_id("brain")]
        assert "field of view" in reasons[ct_id("skull")]
        assert "scope" in reasons[ct_id("kidney_cyst_right")]

    def test_vertebrae_collapse_with_warning(self):
        lab = np.zeros((4, 4, 4), np.int32)
        lab[0] = ct_id("vertebrae_l3")
        lab[1] = ct_id("vertebrae_c5")
        out, report = map_total_ct(mkvol(lab), ct_reference_schema())
        assert set(np.unique(out.data)) == {0, vibe_id("vertebra_body")}
        assert any("posterior" in w for w in report.warnings)

    def test_empty_volume(self):
        out, report = map_total_ct(mkvol(np.zeros((3, 3, 3), np.int32)), ct_reference_schema())
        assert np.all(out.data == 0)
        assert report.mapped == [] and report.dropped == [] and report.warnings == []

    def test_unknown_id_zeroed_not_fatal(self):
        lab = np.zeros((3, 3, 3), np.int32)
        lab[0, 0, 0] = 9999
        out, report = map_total_ct(mkvol(lab), ct_reference_schema())
        assert out.data[0, 0, 0] == 0
        assert report.dropped == [(9999, "unknown id")]

    def test_idempotent_on_mapped_volume(self):
        # Target ids map to themselves when the source catalog is the
        # target catalog (an already-mapped volume).
        rng = np.random.default_rng(0)
        ids = [vibe_id("liver"), vibe_id("intestine"), vibe_id("vertebra_body"), 0]
        lab = rng.choice(ids, size=(6, 6, 6)).astype(np.int32)
        once, _ = map_total_ct(mkvol(lab), builtin_schema(), builtin_schema())
        twice, _ = map_total_ct(once, builtin_schema(), builtin_schema())
        assert np.array_equal(once.data, lab)
        assert np.array_equal(twice.data, once.data)

    def test_report_covers_every_source_id(self):
        rng = np.random.default_rng(1)
        lab = rng.integers(0, 130, (8, 8, 8)).astype(np.int32)
        _, report = map_total_ct(mkvol(lab), ct_reference_schema())
        covered = {sid for sid, _ in report.mapped} | {sid for sid, _ in report.dropped}
        present = set(int(x) for x in np.unique(lab)) - {0}
        assert covered == present

    def test_never_produces_foreign_ids(self):
        rng = np.random.default_rng(2)
        lab = rng.integers(0, 130, (8, 8, 8)).astype(np.int32)
        out, _ = map_total_ct(mkvol(lab), ct_reference_schema())
        valid = set(builtin_schema().ids) | {0}
        assert set(int(x) for x in np.unique(out.data)) <= valid


class TestValidateLabels:
    def test_clean_volume_has_no_unknowns(self):
        lab = np.zeros((4, 4, 4), np.int32)
        lab[0] = vibe_id("liver")
        report = validate_labels(mkvol(lab), builtin_schema())
        assert report.unknown == []

    def test_single_unknown_voxel_reported_once(self):
        lab = np.zeros((4, 4, 4), np.int32)
        lab[1, 2, 3] = 9999
        report = validate_labels(mkvol(lab), builtin_schema())
        assert report.unknown == [(9999, 1)]

    def test_volumes_match_bruteforce_count(self):
        rng = np.random.default_rng(3)
        lab = rng.integers(0, 5, (6, 7, 8)).astype(np.int32)
        v = mkvol(lab, spacing=(1.4, 1.4, 3.0))
        report = validate_labels(v, builtin_schema())
        voxvol = 1.4 * 1.4 * 3.0
        for entry in report.classes:
            count = sum(
                1 for val in lab.ravel().tolist() if val == entry["id"]
            )
            assert entry["voxels"] == count
            assert entry["volume_mm3"] == count * voxvol


def _paired_phantom(left_name, right_name, swap=False):
    """Two blobs straddling the mid-sagittal plane of an RAS volume."""
    s = builtin_schema()
    lab = np.zeros((40, 24, 24), np.int32)
    left_block = (slice(4, 12), slice(8, 16), slice(8, 16))    # low x = anatomical left
    right_block = (slice(28, 36), slice(8, 16), slice(8, 16))  # high x = right
    lid, rid = s.by_name(left_name).id, s.by_name(right_name).id
    if swap:
        lid, rid = rid, lid
    lab[left_block] = lid
    lab[right_block] = rid
    return mkvol(lab)


class TestLaterality:
    def test_correct_phantom_unflagged(self):
        flags = laterality_check(
            _paired_phantom("kidney_left", "kidney_right"), builtin_schema()
        )
        assert flags == []

    def test_swapped_pair_flagged(self):
        flags = laterality_check(
            _paired_phantom("kidney_left", "kidney_right", swap=True), builtin_schema()
        )
        assert len(flags) == 1 and flags[0].status == "swapped"

    def test_mirrored_volume_flags_every_pair(self):
        s = builtin_schema()
        lab = np.zeros((40, 24, 24), np.int32)
        lab[4:12, 2:10, 2:10] = s.by_name("kidney_left").id
        lab[28:36, 2:10, 2:10] = s.by_name("kidney_right").id
        lab[2:14, 12:20, 12:20] = s.by_name("humerus_left").id
        lab[26:38, 12:20, 12:20] = s.by_name("humerus_right").id
        v = mkvol(lab)
        assert laterality_check(v, s) == []
        mirrored = v.with_data(np.flip(v.data, axis=0))
        flags = laterality_check(mirrored, s)
        assert {(f.left_id, f.right_id) for f in flags} == {
            (s.by_name("kidney_left").id, s.by_name("kidney_right").id),
            (s.by_name("humerus_left").id, s.by_name("humerus_right").id),
        }
        assert all(f.status == "swapped" for f in flags)

    def test_single_swapped_pair_among_correct_ones(self):
        s = builtin_schema()
        lab = np.zeros((40, 24, 24), np.int32)
        lab[4:12, 2:10, 2:10] = s.by_name("kidney_left").id
        lab[28:36, 2:10, 2:10] = s.by_name("kidney_right").id
        # Humerus pair deliberately swapped.
        lab[2:14, 12:20, 12:20] = s.by_name("humerus_right").id
        lab[26:38, 12:20, 12:20] = s.by_name("humerus_left").id
        flags = laterality_check(mkvol(lab), s)
        assert len(flags) == 1
        assert flags[0].left_id == s.by_name("humerus_left").id
        assert flags[0].status == "swapped"

    def test_centroid_on_plane_is_indeterminate(self):
        # Pair centroids 0.5 voxel either side of the foreground centroid:
        # within the one-voxel dead zone, so neither swapped nor ok.
        s = builtin_schema()
        lab = np.zeros((41, 24, 24), np.int32)
        lab[18:22, 4:10, 8:16] = s.by_name("kidney_left").id
        lab[19:23, 14:20, 8:16] = s.by_name("kidney_right").id
        flags = laterality_check(mkvol(lab), s)
        assert len(flags) == 1 and flags[0].status == "indeterminate"

    def test_empty_foreground_rejected(self):
        with pytest.raises(ValidationError):
            laterality_check(mkvol(np.zeros((4, 4, 4), np.int32)), builtin_schema())

    def test_mirror_complementarity(self):
        s = builtin_schema()
        rng = np.random.default_rng(4)
        lab = np.zeros((32, 20, 20), np.int32)
        pairs = s.chirality_pairs()[:6]
        for i, (left, right) in enumerate(pairs):
            y = 2 + 3 * (i % 5)
            z = 2 + 3 * (i // 5) * 2
            if rng.random() < 0.5:
                lab[2:8, y : y + 2, z : z + 2] = left.id
                lab[24:30, y : y + 2, z : z + 2] = right.id
            else:
                lab[2:8, y : y + 2, z : z + 2] = right.id
                lab[24:30, y : y + 2, z : z + 2] = left.id
        v = mkvol(lab)
        base = {(f.left_id, f.right_id) for f in laterality_check(v, s)}
        mirrored = v.with_data(np.flip(v.data, axis=0))
        flipped = {(f.left_id, f.right_id) for f in laterality_check(mirrored, s)}
        all_pairs = {(l.id, r.id) for l, r in pairs}
        assert base | flipped == all_pairs
        assert base & flipped == set()
