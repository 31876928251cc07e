import numpy as np
import pytest

from aspan import synth
from aspan.config import GenConfig
from aspan.tensor_io import FormatError


class TestGenPair:
    def test_identity_warp(self):
        pair = synth.pair_from_homography(0, (32, 32), np.eye(3))
        xx, yy = np.meshgrid(np.arange(32.0), np.arange(32.0))
        np.testing.assert_allclose(pair.flow_ab[..., 0], xx)
        np.testing.assert_allclose(pair.flow_ab[..., 1], yy)
        assert pair.vis_a.all() and pair.vis_b.all()

    def test_pure_translation(self):
        hom = np.eye(3)
        hom[0, 2] = 10.0
        pair = synth.pair_from_homography(1, (32, 32), hom)
        xx, yy = np.meshgrid(np.arange(32.0), np.arange(32.0))
        np.testing.assert_allclose(pair.flow_ab[..., 0], xx + 10.0)
        np.testing.assert_allclose(pair.flow_ab[..., 1], yy)
        assert not pair.vis_a[:, -10:].any()
        assert pair.vis_a[:, :-10].all()

    def test_forward_backward_composition(self):
        """A->B->A composition stays within 0.5 px on visible pixels."""
        for seed in range(6):
            pair = synth.gen_pair(seed, (48, 48), "medium", max_occluders=1)
            h, w = pair.extent
            fwd = pair.flow_ab[pair.vis_a]
            x0 = np.clip(np.floor(fwd[:, 0]).astype(int), 0, w - 2)
            y0 = np.clip(np.floor(fwd[:, 1]).astype(int), 0, h - 2)
            tx = (fwd[:, 0] - x0)[:, None]
            ty = (fwd[:, 1] - y0)[:, None]
            back = ((1 - ty) * (1 - tx) * pair.flow_ba[y0, x0]
                    + (1 - ty) * tx * pair.flow_ba[y0, x0 + 1]
                    + ty * (1 - tx) * pair.flow_ba[y0 + 1, x0]
                    + ty * tx * pair.flow_ba[y0 + 1, x0 + 1])
            xx, yy = np.meshgrid(np.arange(float(w)), np.arange(float(h)))
            start = np.stack([xx[pair.vis_a], yy[pair.vis_a]], axis=1)
            err = np.linalg.norm(back - start, axis=1)
            assert err.max() < 0.5

    def test_visible_pixels_land_inside(self):
        pair = synth.gen_pair(3, (48, 48), "hard", max_occluders=0)
        fwd = pair.flow_ab[pair.vis_a]
        assert (fwd[:, 0] >= 0).all() and (fwd[:, 0] <= 47).all()
        assert (fwd[:, 1] >= 0).all() and (fwd[:, 1] <= 47).all()
        invisible = pair.flow_ab[~pair.vis_a]
        if invisible.size:
            occ = synth._occluded_at(
                synth._inside_frame(pair.flow_ba, 48, 48) & ~pair.vis_b, invisible)
            outside = ~synth._inside_frame(invisible[None], 48, 48)[0]
            assert (outside | occ).all()

    def test_deterministic_from_seed(self):
        a = synth.gen_pair(42, (32, 32), "easy", 1)
        b = synth.gen_pair(42, (32, 32), "easy", 1)
        np.testing.assert_array_equal(a.image_a, b.image_a)
        np.testing.assert_array_equal(a.image_b, b.image_b)
        np.testing.assert_array_equal(a.homography, b.homography)

    def test_images_in_unit_range(self):
        pair = synth.gen_pair(7, (32, 32), "medium", 2)
        for img in (pair.image_a, pair.image_b):
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_rejects_bad_extent(self):
        with pytest.raises(ValueError):
            synth.gen_pair(0, (30, 32), "easy", 0)


class TestGtCoarseMatches:
    def test_identity_warp_gives_diagonal(self):
        pair = synth.pair_from_homography(0, (32, 32), np.eye(3))
        matches = synth.gt_coarse_matches(pair, stride=8)
        assert matches == [(i, i) for i in range(16)]

    def test_translation_shifts_one_cell(self):
        hom = np.eye(3)
        hom[0, 2] = 8.0
        pair = synth.pair_from_homography(1, (32, 32), hom)
        matches = synth.gt_coarse_matches(pair, stride=8)
        assert matches  # interior cells survive
        for i, j in matches:
            ra, ca = divmod(i, 4)
            rb, cb = divmod(j, 4)
            assert (rb, cb) == (ra, ca + 1)

    def test_reprojection_within_half_cell_diagonal(self):
        from aspan.backbone import cell_center_px
        for seed in range(4):
            pair = synth.gen_pair(seed, (48, 48), "medium", 1)
            wc = 6
            for i, j in synth.gt_coarse_matches(pair, stride=8):
                ra, ca = divmod(i, wc)
                rb, cb = divmod(j, wc)
                a_xy = np.array([cell_center_px(ca, 8), cell_center_px(ra, 8)])
                warped = synth.apply_homography(pair.homography, a_xy)
                b_xy = np.array([cell_center_px(cb, 8), cell_center_px(rb, 8)])
                assert np.linalg.norm(warped - b_xy) <= np.sqrt(2) / 2 * 8 + 1e-9


class TestRescalePair:
    def test_flows_exact_at_new_extent(self):
        pair = synth.gen_pair(5, (32, 32), "easy", 0)
        big = synth.rescale_pair(pair, 1.5)
        assert big.extent == (48, 48)
        # flows at the new extent follow the conjugated homography exactly
        probe = np.array([10.0, 20.0])
        expected = synth.apply_homography(big.homography, probe)
        np.testing.assert_allclose(big.flow_ab[20, 10], expected)

    def test_corners_map_consistently_with_original(self):
        pair = synth.gen_pair(6, (32, 32), "easy", 0)
        big = synth.rescale_pair(pair, 1.5)
        sx = 47.0 / 31.0
        orig = synth.apply_homography(pair.homography, np.array([31.0, 31.0]))
        scaled = synth.apply_homography(big.homography, np.array([47.0, 47.0]))
        np.testing.assert_allclose(scaled, orig * sx, atol=1e-9)


class TestDatasetIO:
    def test_write_read_roundtrip(self, tmp_path):
        cfg = GenConfig(n_pairs=3, extent=(32, 32), tier="easy", seed=9)
        synth.write_dataset(tmp_path / "ds", cfg)
        manifest, pairs = synth.read_dataset(tmp_path / "ds")
        assert manifest.n_pairs == 3 and len(pairs) == 3
        regen = synth.gen_pair(pairs[0].seed, (32, 32), "easy", cfg.max_occluders)
        np.testing.assert_array_equal(pairs[0].image_a, regen.image_a)
        np.testing.assert_array_equal(pairs[0].flow_ab, regen.flow_ab)
        np.testing.assert_array_equal(pairs[0].vis_b, regen.vis_b)

    def test_regeneration_bitwise_identical(self, tmp_path):
        cfg = GenConfig(n_pairs=2, extent=(32, 32), tier="medium", seed=4)
        synth.write_dataset(tmp_path / "a", cfg)
        synth.write_dataset(tmp_path / "b", cfg)
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes(), rel

    def test_truncated_file_raises_format_error(self, tmp_path):
        cfg = GenConfig(n_pairs=1, extent=(32, 32), tier="easy", seed=1)
        synth.write_dataset(tmp_path / "ds", cfg)
        victim = tmp_path / "ds" / "pair_0" / "image_a.aspt"
        victim.write_bytes(victim.read_bytes()[:40])
        with pytest.raises(FormatError):
            synth.read_dataset(tmp_path / "ds")

    def test_bad_magic_raises_format_error(self, tmp_path):
        cfg = GenConfig(n_pairs=1, extent=(32, 32), tier="easy", seed=1)
        synth.write_dataset(tmp_path / "ds", cfg)
        victim = tmp_path / "ds" / "pair_0" / "flow_ab.aspt"
        raw = bytearray(victim.read_bytes())
        raw[:4] = b"POTA"
        victim.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            synth.read_dataset(tmp_path / "ds")
