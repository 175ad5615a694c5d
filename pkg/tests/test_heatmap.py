"""Attention overlays, score normalization, colormap, and rendering."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from conftest import random_bag, small_model
from milpath import milnet
from milpath.heatmap import (
    DEFAULT_ALPHA,
    PERCENTILE_CLAMP,
    Annotation,
    AttentionOverlay,
    HeatmapError,
    attention_scores,
    colormap_lookup,
    load_annotations,
    load_colormap,
    load_overlay,
    render,
    save_overlay,
    save_png,
    _normalize,
)


def overlay_from(normalized, patch_size=4, slide_index=None):
    normalized = np.asarray(normalized, dtype=np.float64)
    k = normalized.size
    cols = max(1, int(np.ceil(np.sqrt(k))))
    idx = np.arange(k)
    coords = np.stack(
        [(idx % cols) * patch_size, (idx // cols) * patch_size], axis=1
    ).astype(np.int32)
    if slide_index is None:
        slide_index = np.zeros(k, dtype=np.uint16)
    overlay = AttentionOverlay(
        case_id="case",
        patch_size=patch_size,
        normalization="minmax",
        slide_index=np.asarray(slide_index, dtype=np.uint16),
        coords=coords,
        raw=normalized.copy(),
        normalized=normalized.copy(),
    )
    overlay.validate()
    return overlay


class TestNormalize:
    def test_minmax_hand_values(self):
        out = _normalize(np.array([0.1, 0.2, 0.7]), "minmax")
        np.testing.assert_allclose(out, [0.0, 1 / 6, 1.0], atol=1e-12)

    def test_constant_maps_to_half(self):
        np.testing.assert_array_equal(_normalize(np.full(5, 3.3), "minmax"), 0.5)
        np.testing.assert_array_equal(_normalize(np.full(5, 3.3), "percentile"), 0.5)

    def test_percentile_clamps_tails(self):
        values = np.arange(101, dtype=np.float64)
        out = _normalize(values, "percentile")
        lo, hi = np.percentile(values, PERCENTILE_CLAMP)
        assert out[0] == 0.0 and out[-1] == 1.0
        assert out[50] == pytest.approx((50 - lo) / (hi - lo))
        # Everything at or beyond the clamp collapses to the endpoint.
        assert out[1] == 0.0 and out[99] == 1.0

    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=1,
            max_size=32,
        ),
        st.sampled_from(["minmax", "percentile"]),
    )
    def test_range_and_order_preserved(self, values, mode):
        raw = np.asarray(values)
        out = _normalize(raw, mode)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        order = np.argsort(raw, kind="stable")
        assert np.all(np.diff(out[order]) >= -1e-12)


class TestAttentionScores:
    def test_single_instance(self, rng):
        model = small_model(seed=1)
        bag = random_bag(rng, 1, 5)
        overlay = attention_scores(model, bag)
        np.testing.assert_array_equal(overlay.raw, [1.0])
        np.testing.assert_array_equal(overlay.normalized, [0.5])

    def test_matches_forward_attention(self, rng):
        model = small_model(seed=2)
        bag = random_bag(rng, 9, 5)
        overlay = attention_scores(model, bag)
        trace = milnet.forward(model, bag, training=False)
        np.testing.assert_allclose(overlay.raw, trace.attn, rtol=0, atol=0)
        assert overlay.n_instances == 9
        np.testing.assert_array_equal(overlay.coords, bag.coords)

    def test_slides_normalized_independently(self, rng):
        model = small_model(seed=3)
        bag = random_bag(rng, 8, 5)
        bag.slide_index = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.uint16)
        overlay = attention_scores(model, bag)
        for slide in (0, 1):
            sel = bag.slide_index == slide
            np.testing.assert_allclose(
                overlay.normalized[sel], _normalize(overlay.raw[sel], "minmax")
            )
            # Each slide spans the full unit interval on its own.
            assert overlay.normalized[sel].min() == 0.0
            assert overlay.normalized[sel].max() == 1.0

    def test_unknown_normalization_rejected(self, rng):
        model = small_model(seed=4)
        with pytest.raises(HeatmapError, match="normalization"):
            attention_scores(model, random_bag(rng, 3, 5), normalization="zscore")

    def test_overlay_file_round_trip(self, rng, tmp_path):
        model = small_model(seed=5)
        overlay = attention_scores(model, random_bag(rng, 6, 5), "percentile")
        path = tmp_path / "overlay.json"
        save_overlay(overlay, path)
        back = load_overlay(path)
        assert back.case_id == overlay.case_id
        assert back.normalization == "percentile"
        assert back.patch_size == overlay.patch_size
        np.testing.assert_allclose(back.raw, overlay.raw)
        np.testing.assert_allclose(back.normalized, overlay.normalized)
        np.testing.assert_array_equal(back.coords, overlay.coords)

    def test_validate_rejects_out_of_range_scores(self):
        overlay = overlay_from([0.2, 0.8])
        overlay.normalized = np.array([0.2, 1.4])
        with pytest.raises(HeatmapError):
            overlay.validate()


class TestColormap:
    def test_table_shape_and_endpoints(self):
        table = load_colormap()
        assert table.shape == (256, 3) and table.dtype == np.uint8
        np.testing.assert_array_equal(table[0], [59, 76, 192])
        np.testing.assert_array_equal(table[255], [180, 4, 38])
        # Cool-to-warm: red rises, blue falls end to end.
        assert table[255, 0] > table[0, 0]
        assert table[255, 2] < table[0, 2]

    def test_lookup_rounds_to_nearest_entry(self):
        table = load_colormap()
        scores = np.array([0.0, 1 / 3, 2 / 3, 1.0])
        got = colormap_lookup(table, scores)
        idx = np.rint(scores * 255).astype(int)
        np.testing.assert_array_equal(got, table[idx])

    def test_lookup_rejects_out_of_range(self):
        table = load_colormap()
        with pytest.raises(HeatmapError):
            colormap_lookup(table, np.array([-0.01]))
        with pytest.raises(HeatmapError):
            colormap_lookup(table, np.array([1.01]))


class TestRender:
    def test_opaque_fill_matches_table(self):
        overlay = overlay_from([0.0, 1 / 3, 2 / 3, 1.0], patch_size=4)
        table = load_colormap()
        img = render(overlay, alpha=1.0)
        assert img.shape == (8, 8, 3)
        for (x, y), score in zip(overlay.coords, overlay.normalized):
            block = img[y : y + 4, x : x + 4]
            expect = table[int(np.rint(score * 255))]
            assert np.all(block == expect)

    def test_alpha_zero_reproduces_base(self, rng):
        overlay = overlay_from([0.1, 0.9], patch_size=4)
        base = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
        out = render(overlay, base_image=base, alpha=0.0)
        np.testing.assert_array_equal(out, base)

    def test_blend_arithmetic(self):
        overlay = overlay_from([1.0], patch_size=2)
        base = np.full((2, 2, 3), 100, dtype=np.uint8)
        table = load_colormap()
        out = render(overlay, base_image=base, alpha=0.5)
        expect = np.rint(0.5 * 100 + 0.5 * table[255].astype(np.float64)).astype(np.uint8)
        assert np.all(out == expect)

    def test_default_alpha_and_determinism(self):
        overlay = overlay_from([0.0, 0.25, 0.5, 1.0], patch_size=3)
        a = render(overlay)
        b = render(overlay, alpha=DEFAULT_ALPHA)
        np.testing.assert_array_equal(a, b)

    def test_coordinates_must_fit_base(self):
        overlay = overlay_from([0.5, 0.5], patch_size=8)
        base = np.zeros((8, 8, 3), dtype=np.uint8)  # second patch lands at x=8
        with pytest.raises(HeatmapError, match="outside"):
            render(overlay, base_image=base)

    def test_base_must_be_rgb_u8(self):
        overlay = overlay_from([0.5], patch_size=2)
        with pytest.raises(HeatmapError, match="uint8"):
            render(overlay, base_image=np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(HeatmapError, match="uint8"):
            render(overlay, base_image=np.zeros((4, 4, 3), dtype=np.float32))

    def test_multi_slide_needs_selection(self):
        overlay = overlay_from([0.2, 0.8], slide_index=[0, 1], patch_size=4)
        with pytest.raises(HeatmapError, match="slide"):
            render(overlay)
        # Slide 1's sole patch sits at x=4, so the canvas spans to x=8.
        img = render(overlay, slide=1, alpha=1.0)
        assert img.shape == (4, 8, 3)

    def test_alpha_out_of_range(self):
        overlay = overlay_from([0.5], patch_size=2)
        with pytest.raises(HeatmapError, match="alpha"):
            render(overlay, alpha=1.5)

    def test_annotation_outline_drawn(self):
        overlay = overlay_from([0.5], patch_size=32)
        ann = Annotation("tumor", np.array([[4.0, 4.0], [28.0, 4.0], [16.0, 28.0]]))
        plain = render(overlay, alpha=0.0, base_image=np.full((32, 32, 3), 200, np.uint8))
        outlined = render(
            overlay,
            alpha=0.0,
            base_image=np.full((32, 32, 3), 200, np.uint8),
            annotations=[ann],
        )
        assert not np.any(np.all(plain == 0, axis=2))
        assert np.any(np.all(outlined == 0, axis=2))

    def test_save_png_round_trip(self, tmp_path):
        overlay = overlay_from([0.0, 0.5, 0.75, 1.0], patch_size=4)
        img = render(overlay, alpha=1.0)
        path = tmp_path / "overlay.png"
        save_png(img, path)
        back = np.asarray(Image.open(path).convert("RGB"))
        np.testing.assert_array_equal(back, img)


class TestAnnotations:
    def test_load_valid_file(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(
            json.dumps(
                [{"label": "tumor", "vertices": [[0, 0], [10, 0], [5, 8]]}]
            ),
            "utf-8",
        )
        anns = load_annotations(path)
        assert len(anns) == 1
        assert anns[0].label == "tumor"
        assert anns[0].vertices.shape == (3, 2)

    def test_too_few_vertices(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps([{"label": "x", "vertices": [[0, 0], [1, 1]]}]), "utf-8")
        with pytest.raises(HeatmapError, match="3 vertices"):
            load_annotations(path)

    def test_not_a_list(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({"label": "x"}), "utf-8")
        with pytest.raises(HeatmapError, match="list"):
            load_annotations(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps([{"vertices": [[0, 0], [1, 0], [0, 1]]}]), "utf-8")
        with pytest.raises(HeatmapError, match="bad annotation"):
            load_annotations(path)
