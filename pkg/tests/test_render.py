import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fmgcam import testbed
from fmgcam.cam import ClassSaliency, FusedSaliency, fm_g_cam, fuse_filter, normalize_activate
from fmgcam.errors import ParameterError, ShapeError
from fmgcam.render import (
    BASE_HUES,
    GAP,
    TITLE_HEIGHT,
    Palette,
    _to_uint8,
    colorize_fused,
    colorize_map,
    column_bounds,
    default_palette,
    get_palette,
    overlay,
    panel,
    save_png,
    upsample,
    upsample_fused,
)


def _hand_bilinear(m, H, W):
    """Pixel-centre bilinear resampling written out per output pixel."""
    I, J = m.shape
    out = np.zeros((H, W))
    for y in range(H):
        sy = min(max((y + 0.5) * I / H - 0.5, 0), I - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, I - 1)
        fy = sy - y0
        for x in range(W):
            sx = min(max((x + 0.5) * J / W - 0.5, 0), J - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, J - 1)
            fx = sx - x0
            top = m[y0, x0] * (1 - fx) + m[y0, x1] * fx
            bot = m[y1, x0] * (1 - fx) + m[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bot * fy
    return out


class TestUpsample:
    def test_constant(self):
        assert np.all(upsample(np.full((3, 2), 0.25), (9, 7)) == 0.25)

    def test_single_pixel(self):
        assert np.all(upsample(np.array([[0.7]]), (5, 4)) == 0.7)

    def test_center_example(self):
        assert upsample(np.array([[0.0, 1.0], [1.0, 0.0]]), (3, 3))[1, 1] == 0.5

    def test_matches_hand_oracle(self):
        m = np.random.default_rng(0).normal(size=(4, 5))
        np.testing.assert_allclose(upsample(m, (11, 13)), _hand_bilinear(m, 11, 13), atol=1e-12)

    def test_downscale_rejected(self):
        with pytest.raises(ParameterError):
            upsample(np.zeros((4, 4)), (3, 8))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)),
           st.integers(0, 10), st.integers(0, 10))
    def test_within_input_range(self, m, dh, dw):
        out = upsample(m, (m.shape[0] + dh, m.shape[1] + dw))
        assert out.min() >= m.min() and out.max() <= m.max()

    def test_fused_stays_exclusive(self):
        raw = np.random.default_rng(1).normal(size=(4, 4, 3))
        f = normalize_activate(fuse_filter([ClassSaliency(raw[:, :, k]) for k in range(3)]))
        big = upsample_fused(f, (17, 13))
        assert big.channels.shape == (17, 13, 3)
        assert np.all((big.channels != 0).sum(-1) <= 1)


class TestPalette:
    def test_default_first_four(self):
        assert default_palette(4).hues == BASE_HUES

    @pytest.mark.parametrize("K", [5, 8, 12, 20])
    def test_extension_distinct(self, K):
        hues = default_palette(K).hues
        assert len(hues) == K and len(set(hues)) == K

    def test_duplicate_hues_rejected(self):
        with pytest.raises(ParameterError):
            Palette(((255, 0, 0), (255, 0, 0)))

    def test_unknown_name(self):
        with pytest.raises(ParameterError):
            get_palette("jet", 4)


class TestColorize:
    def test_k1_red_grayscale(self):
        m = np.array([[[0.0], [0.5]], [[1.0], [0.25]]])
        rgb = colorize_fused(FusedSaliency(m, (0,), "normalized"), default_palette(1))
        np.testing.assert_array_equal(rgb[..., 0], m[..., 0])
        assert not rgb[..., 1:].any()

    def test_channel_two_is_green(self):
        ch = np.zeros((1, 1, 3))
        ch[0, 0, 1] = 1.0
        rgb = colorize_fused(FusedSaliency(ch, (0, 1, 2), "normalized"), default_palette(3))
        assert rgb[0, 0].tolist() == [0.0, 1.0, 0.0]

    def test_negative_winner_is_dim_not_black(self):
        ch = np.zeros((1, 3, 2))
        ch[0, 0, 0], ch[0, 1, 1], ch[0, 2, 0] = 1.0, -0.5, -1.0
        rgb = colorize_fused(FusedSaliency(ch, (0, 1), "normalized"), default_palette(2))
        # intensity runs linearly from the lowest value (-1) to the peak (1)
        np.testing.assert_allclose(rgb[0, 0], [1.0, 0, 0])
        np.testing.assert_allclose(rgb[0, 1], np.array(default_palette(2).hues[1]) / 255 * 0.25)
        assert not rgb[0, 2].any()

    def test_upsample_keeps_negative_owner(self):
        ch = np.zeros((2, 2, 2))
        ch[:, 0, 0] = -0.5
        ch[:, 1, 1] = 0.5
        big = upsample_fused(FusedSaliency(ch, (0, 1), "normalized"), (2, 4))
        assert np.all(big.channels[:, 0, 0] == -0.5)

    def test_palette_too_small(self):
        f = FusedSaliency(np.zeros((2, 2, 3)), (0, 1, 2), "normalized")
        with pytest.raises(ParameterError):
            colorize_fused(f, Palette(((255, 0, 0), (0, 255, 0))))

    def test_two_quadrant_hue_membership(self, pixel_sum):
        img = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=0)
        fused, ranked, _ = fm_g_cam(pixel_sum, img, K=2)
        pal = default_palette(2)
        rgb = _to_uint8(colorize_fused(upsample_fused(fused, (64, 64)), pal) * 255)
        masks = testbed.quadrant_masks(64, 64)
        for k, q in enumerate(ranked.class_ids):
            lit = rgb[masks[q]]
            lit = lit[lit.any(-1)]
            assert len(lit) > 0
            hue = np.array(pal.hues[k]) > 0
            assert not lit[:, ~hue].any()

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
                      elements=st.floats(-3, 3)))
    def test_hue_purity(self, raw):
        K = raw.shape[2]
        pal = default_palette(K)
        f = normalize_activate(fuse_filter([ClassSaliency(raw[:, :, k]) for k in range(K)]), "gelu")
        px = _to_uint8(colorize_fused(upsample_fused(f, (raw.shape[0] * 3, raw.shape[1] * 2)), pal) * 255)
        hues = np.array(pal.hues, dtype=np.float64)
        for p in px.reshape(-1, 3).astype(np.float64):
            if not p.any():
                continue
            # each pixel must be t * hue for a single hue, up to 8-bit rounding
            t = (hues @ p) / (hues * hues).sum(1)
            err = np.abs(p[None] - t[:, None] * hues).max(1)
            assert err.min() <= 1.0

    def test_map_uses_one_hue(self):
        rgb = colorize_map(np.array([[0.0, 2.0], [1.0, -1.0]]), (0, 0, 255))
        assert rgb[..., :2].max() == 0
        np.testing.assert_array_equal(rgb[..., 2], [[0, 1.0], [0.5, 0]])


class TestOverlay:
    def test_alpha_zero_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (5, 6, 3), dtype=np.uint8)
        heat = np.random.default_rng(1).random((5, 6, 3))
        assert np.array_equal(overlay(img, heat, 0.0).pixels, img)

    def test_alpha_one_saturated(self):
        img = np.random.default_rng(0).integers(0, 256, (2, 2, 3), dtype=np.uint8)
        heat = np.zeros((2, 2, 3))
        heat[..., 0] = 1.0
        heat[0, 0] = (1.0, 1.0, 0.0)
        out = overlay(img, heat, 1.0).pixels
        np.testing.assert_array_equal(out, _to_uint8(heat * 255))

    def test_blend_example(self):
        img = np.full((1, 1, 3), 128, dtype=np.uint8)
        heat = np.array([[[1.0, 0.0, 0.0]]])
        assert overlay(img, heat, 0.5).pixels[0, 0].tolist() == [191, 64, 64]

    def test_unsalient_pixels_untouched(self):
        img = np.random.default_rng(0).integers(0, 256, (4, 4, 3), dtype=np.uint8)
        heat = np.zeros((4, 4, 3))
        heat[1, 1] = (0.0, 1.0, 0.0)
        out = overlay(img, heat, 0.5).pixels
        mask = np.ones((4, 4), bool)
        mask[1, 1] = False
        assert np.array_equal(out[mask], img[mask])

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError):
            overlay(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 3)))

    def test_alpha_range(self):
        with pytest.raises(ParameterError):
            overlay(np.zeros((1, 1, 3), np.uint8), np.zeros((1, 1, 3)), 1.5)

    @pytest.mark.parametrize("shape", [(1, 1), (7, 3), (32, 48), (101, 64)])
    def test_resolution_fidelity(self, shape):
        img = np.zeros((*shape, 3), np.uint8)
        assert overlay(img, np.zeros((*shape, 3))).pixels.shape == (*shape, 3)


class TestPanel:
    def _parts(self, K, h=20, w=24):
        rng = np.random.default_rng(K)
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        pal = default_palette(K)
        legend = [(f"c{k}", list(pal.hues[k])) for k in range(K)]
        fused = overlay(img, rng.random((h, w, 3)), 0.5, legend)
        cams = [overlay(img, rng.random((h, w, 3))) for _ in range(K)]
        return img, fused, cams, [f"c{k}\np=0.1" for k in range(K)]

    @pytest.mark.parametrize("K,columns", [(4, 6), (1, 3), (5, 7)])
    def test_column_count(self, K, columns):
        img, fused, cams, labels = self._parts(K)
        out = panel(img, fused, cams, labels)
        assert out.shape[1] == columns * 24 + (columns - 1) * GAP
        bounds = column_bounds([24] * columns)
        (x0, x1), (f0, f1) = bounds[0], bounds[1]
        rows = slice(TITLE_HEIGHT, TITLE_HEIGHT + 20)
        assert np.array_equal(out[rows, x0:x1], img)
        assert np.array_equal(out[rows, f0:f1], fused.pixels)
        for k, (c0, c1) in enumerate(bounds[2:]):
            assert np.array_equal(out[rows, c0:c1], cams[k].pixels)

    def test_empty(self):
        img, fused, _, _ = self._parts(1)
        with pytest.raises(ParameterError):
            panel(img, fused, [], [])

    def test_deterministic_files(self, tmp_path):
        img, fused, cams, labels = self._parts(4)
        save_png(tmp_path / "a.png", panel(img, fused, cams, labels))
        save_png(tmp_path / "b.png", panel(img, fused, cams, labels))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
