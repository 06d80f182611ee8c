import numpy as np
import pytest

from aumeta.errors import ConfigError
from aumeta.geometry import (
    AUCenterRule,
    AUCenterTable,
    builtin_bp4d_table,
    compute_au_centers,
    crop_region,
    crops_backward,
    crops_forward,
    flip_landmarks,
    interocular_distance,
    load_au_table,
    map_to_feature_grid,
    save_au_table,
)
from aumeta.synth import TEMPLATE_49


def table_of(*rules):
    return AUCenterTable(tuple(AUCenterRule(*r) for r in rules))


class TestAuCenters:
    def test_zero_offset_equals_anchor(self):
        t = table_of(("a", 4, 5, 0.0, 0.0))
        centers = compute_au_centers(TEMPLATE_49, t)
        np.testing.assert_allclose(centers[0], TEMPLATE_49[4])
        np.testing.assert_allclose(centers[1], TEMPLATE_49[5])

    def test_brow_upward_offset(self):
        # 0.2 x inter-ocular upward from the inner brow anchors
        t = table_of(("au1", 4, 5, 0.0, -0.2))
        iod = interocular_distance(TEMPLATE_49)
        assert iod == pytest.approx(68.0)
        centers = compute_au_centers(TEMPLATE_49, t)
        np.testing.assert_allclose(centers[0], [90.0, 70.0 - 0.2 * 68.0])
        np.testing.assert_allclose(centers[1], [134.0, 70.0 - 0.2 * 68.0])

    def test_symmetric_landmarks_give_mirrored_centers(self):
        t = table_of(("a", 4, 5, 0.1, -0.15), ("b", 0, 9, -0.05, 0.2))
        centers = compute_au_centers(TEMPLATE_49, t)
        mid = 112.0
        for c in range(t.n_au):
            left, right = centers[2 * c], centers[2 * c + 1]
            assert left[1] == pytest.approx(right[1])
            assert (2 * mid - left[0]) == pytest.approx(right[0])

    def test_horizontal_flip_swaps_left_right_exactly(self):
        rng = np.random.default_rng(0)
        lm = TEMPLATE_49 + rng.normal(0, 3, TEMPLATE_49.shape)  # break symmetry
        t = table_of(("a", 4, 5, 0.07, -0.2), ("b", 31, 37, -0.1, 0.12))
        axis = 100.0
        orig = compute_au_centers(lm, t)
        swapped = compute_au_centers(flip_landmarks(lm, axis), t)
        for c in range(t.n_au):
            mirrored_right = orig[2 * c + 1].copy()
            mirrored_right[0] = 2 * axis - mirrored_right[0]
            mirrored_left = orig[2 * c].copy()
            mirrored_left[0] = 2 * axis - mirrored_left[0]
            np.testing.assert_allclose(swapped[2 * c], mirrored_right, atol=1e-9)
            np.testing.assert_allclose(swapped[2 * c + 1], mirrored_left, atol=1e-9)

    def test_bad_anchor_rejected(self):
        with pytest.raises(ConfigError):
            table_of(("a", 49, 0, 0.0, 0.0))

    def test_wrong_landmark_count(self):
        with pytest.raises(ValueError):
            compute_au_centers(np.zeros((48, 2)), table_of(("a", 0, 1, 0.0, 0.0)))


class TestGridMapping:
    def test_origin(self):
        assert tuple(map_to_feature_grid((0, 0))) == (0, 0)

    def test_corner(self):
        assert tuple(map_to_feature_grid((223, 223))) == (13, 13)

    def test_interior(self):
        assert tuple(map_to_feature_grid((112, 160))) == (7, 10)

    def test_clamps_out_of_bounds(self):
        assert tuple(map_to_feature_grid((-5, 400))) == (0, 13)

    def test_indivisible_sizes_rejected(self):
        with pytest.raises(ConfigError):
            map_to_feature_grid((0, 0), image_size=225, grid_size=14)


class TestCrop:
    def test_impulse_recovered_at_window_interior(self):
        fmap = np.zeros((14, 14, 2))
        fmap[7, 9, 1] = 3.0
        crop = crop_region(fmap, (7, 9), size=6)
        assert crop.shape == (6, 6, 2)
        assert crop[3, 3, 1] == 3.0
        assert crop.sum() == 3.0

    def test_clamp_shift_top_left(self):
        fmap = np.arange(14 * 14, dtype=float).reshape(14, 14, 1)
        crop = crop_region(fmap, (0, 0), size=6)
        np.testing.assert_array_equal(crop, fmap[0:6, 0:6])

    def test_clamp_shift_bottom_right(self):
        fmap = np.arange(14 * 14, dtype=float).reshape(14, 14, 1)
        crop = crop_region(fmap, (13, 13), size=6)
        np.testing.assert_array_equal(crop, fmap[8:14, 8:14])

    def test_all_196_centers_shape_and_mass(self):
        rng = np.random.default_rng(1)
        fmap = rng.random((14, 14, 3))
        total = fmap.sum()
        for r in range(14):
            for c in range(14):
                crop = crop_region(fmap, (r, c), size=6)
                assert crop.shape == (6, 6, 3)
                assert crop.sum() <= total + 1e-9

    def test_oversized_crop_rejected(self):
        with pytest.raises(ConfigError):
            crop_region(np.zeros((4, 4, 1)), (0, 0), size=6)

    def test_batched_crops_match_single(self):
        rng = np.random.default_rng(2)
        fmaps = rng.random((3, 14, 14, 2))
        centers = rng.integers(0, 14, size=(3, 4, 2))
        crops, origins = crops_forward(fmaps, centers, size=6)
        for b in range(3):
            for k in range(4):
                np.testing.assert_array_equal(crops[b, k], crop_region(fmaps[b], centers[b, k], 6))

    def test_crops_backward_is_adjoint(self):
        rng = np.random.default_rng(3)
        fmaps = rng.random((2, 14, 14, 2))
        centers = rng.integers(0, 14, size=(2, 3, 2))
        crops, origins = crops_forward(fmaps, centers, size=6)
        dcrops = rng.random(crops.shape)
        df = crops_backward(dcrops, origins, fmaps.shape)
        # <crops, dcrops> == <fmaps, dfmaps> for a linear gather/scatter pair
        assert np.sum(crops * dcrops) == pytest.approx(np.sum(fmaps * df))


class TestTableIO:
    def test_builtin_table_loads(self):
        t = builtin_bp4d_table()
        assert t.n_au == 12
        assert t.au_names[0] == "au1"

    def test_round_trip(self, tmp_path):
        t = table_of(("x", 1, 2, 0.25, -0.5), ("y", 3, 4, 0.0, 0.125))
        path = tmp_path / "table.txt"
        save_au_table(path, t)
        t2 = load_au_table(path)
        assert t2 == t

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("au1 1 2 0.0\n")
        with pytest.raises(ConfigError, match="expected 5 fields"):
            load_au_table(path)
