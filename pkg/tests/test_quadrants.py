import numpy as np
import pytest

from torsoseg import ValidationError, body_mask, compute_quadrants, quadrant_labelmap, to_iso4
from torsoseg.quadrants import ISO_SHAPE, ISO_SPACING

from util import mkvol


def cylinder_image(shape=(40, 40, 60), radius=12, value=900.0, spacing=(4.0, 4.0, 4.0)):
    i, j, _ = np.indices(shape)
    ci, cj = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    body = (i - ci) ** 2 + (j - cj) ** 2 <= radius**2
    img = np.where(body, value, 0.0)
    img[:, :, :4] = 0.0
    img[:, :, -4:] = 0.0
    return mkvol(img, spacing=spacing)


class TestToIso4:
    def test_output_geometry(self):
        v = cylinder_image()
        out = to_iso4(v)
        assert out.shape == (ISO_SHAPE,) * 3
        assert out.spacing == (ISO_SPACING,) * 3

    def test_already_centered_is_identity(self):
        rng = np.random.default_rng(0)
        data = np.zeros((96, 96, 96))
        data[30:66, 30:66, 30:66] = rng.uniform(100, 1000, (36, 36, 36))
        v = mkvol(data, spacing=(4.0, 4.0, 4.0))
        out = to_iso4(v)
        assert np.array_equal(out.data, v.data)
        assert np.allclose(out.affine, v.affine)

    def test_oversized_input_cropped_about_centroid(self):
        data = np.zeros((120, 120, 120))
        data[20:100, 20:100, 20:100] = 500.0
        v = mkvol(data, spacing=(4.0, 4.0, 4.0))
        out = to_iso4(v)
        assert out.shape == (96, 96, 96)
        fg = np.nonzero(v.data > 0)
        want_center = v.world_points([c.mean() for c in fg])[0]
        got_center = out.world_points(np.full(3, (ISO_SHAPE - 1) / 2.0))[0]
        assert np.all(np.abs(want_center - got_center) <= ISO_SPACING)

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            to_iso4(mkvol(np.zeros((8, 8, 8))))

    def test_labelmap_uses_nearest(self):
        data = np.zeros((30, 30, 30), np.int16)
        data[10:20, 10:20, 10:20] = 7
        out = to_iso4(mkvol(data, spacing=(2, 2, 2)))
        assert set(np.unique(out.data)) <= {0, 7}


class TestBodyMask:
    def test_solid_cylinder(self):
        v = cylinder_image()
        iso = to_iso4(v)
        bm = body_mask(iso, 0.1)
        assert bm.data.sum() > 0
        assert np.all(iso.data[bm.data != 0] >= 0)

    def test_interior_hole_filled(self):
        img = np.zeros((40, 40, 40))
        img[8:32, 8:32, 8:32] = 800.0
        img[18:24, 18:24, 18:24] = 0.0  # enclosed dark blob
        v = mkvol(img, spacing=(4, 4, 4))
        bm = body_mask(v, 0.1)
        assert np.all(bm.data[18:24, 18:24, 18:24] == 1)

    def test_largest_component_kept(self):
        img = np.zeros((40, 40, 40))
        img[2:32, 2:32, 2:32] = 700.0   # big blob
        img[35:38, 35:38, 35:38] = 700.0  # 10x smaller
        v = mkvol(img, spacing=(4, 4, 4))
        bm = body_mask(v, 0.1)
        assert np.all(bm.data[35:38, 35:38, 35:38] == 0)
        assert bm.data[10, 10, 10] == 1

    def test_empty_after_threshold_rejected(self):
        with pytest.raises(ValidationError):
            body_mask(mkvol(np.zeros((8, 8, 8))), 0.5)


class TestComputeQuadrants:
    def test_label_range(self):
        v = cylinder_image()
        bm = body_mask(to_iso4(v), 0.1)
        q = compute_quadrants(bm)
        labels = set(np.unique(q.data))
        assert labels <= set(range(0, 12))
        assert q.data.max() == 11

    def test_partition_of_body(self):
        v = cylinder_image()
        bm = body_mask(to_iso4(v), 0.1)
        q = compute_quadrants(bm)
        assert np.array_equal(q.data != 0, bm.data != 0)

    def test_symmetric_body_equal_left_right_counts(self):
        body = np.zeros((40, 40, 60), np.uint8)
        body[8:32, 8:32, 4:56] = 1  # 24 voxels wide: symmetric about x=19.5
        q = compute_quadrants(mkvol(body, spacing=(4, 4, 4)))
        for b in range(1, 6):
            left = int((q.data == 2 * b).sum())
            right = int((q.data == 2 * b + 1).sum())
            assert left == right > 0

    def test_band_arithmetic_300mm_5_bands(self):
        # 300 mm extent at 2 mm spacing: 150 slices of body, bands=5 ->
        # 60 mm bands; boundaries 60/120/180/240 mm below the top.
        body = np.zeros((20, 20, 160), np.uint8)
        body[4:16, 4:16, 5:156] = 1  # S extent: centers 10..310 mm
        v = mkvol(body, spacing=(2.0, 2.0, 2.0))
        q = compute_quadrants(v, bands=5)
        # Top slice (z=155 at S=310mm) is band 0 -> label 1.
        assert set(np.unique(q.data[:, :, 155])) == {0, 1}
        # 59.9mm below top (z=126, S=252) still band 0; 60.1mm below is band 1.
        assert set(np.unique(q.data[:, :, 126])) == {0, 1}
        assert set(np.unique(q.data[:, :, 125])) <= {0, 2, 3}
        # Bottom slice falls in the last band (labels 8, 9 for bands=5).
        assert set(np.unique(q.data[:, :, 5])) <= {0, 8, 9}
        assert q.data.max() == 9

    def test_mirror_swaps_left_right_and_fixes_top(self):
        rng = np.random.default_rng(1)
        body = np.zeros((30, 24, 50), np.uint8)
        body[4:26, 4:20, 2:48] = (rng.random((22, 16, 46)) < 0.9).astype(np.uint8)
        v = mkvol(body, spacing=(4, 4, 4))
        q = compute_quadrants(v)
        mirrored = v.with_data(np.flip(v.data, axis=0))
        q_m = compute_quadrants(mirrored)
        swap = np.array([0, 1, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10])
        assert np.array_equal(q_m.data, swap[np.flip(q.data, axis=0)])

    def test_bands_validation(self):
        v = mkvol(np.ones((8, 8, 8), np.uint8))
        with pytest.raises(ValidationError):
            compute_quadrants(v, bands=1)

    def test_empty_body_rejected(self):
        with pytest.raises(ValidationError):
            compute_quadrants(mkvol(np.zeros((8, 8, 8), np.uint8)))


class TestPipeline:
    def test_quadrant_labelmap_end_to_end(self):
        v = cylinder_image()
        q = quadrant_labelmap(v)
        assert q.shape == (96, 96, 96)
        assert q.spacing == (4.0, 4.0, 4.0)
        assert 0 < q.data.max() <= 11
