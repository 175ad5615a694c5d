import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from milpath.bagio import read_bag
from milpath.tiler import (
    DEFAULT_SITES,
    NoTissueError,
    SyntheticBagSpec,
    TilerError,
    extract_patches,
    load_grid,
    n_signal_instances,
    otsu_threshold,
    save_grid,
    segment_tissue,
    synth_cohort,
)


def _slide(h=512, w=512, tissue=((100, 100, 300, 300),)) -> np.ndarray:
    """Gray background (zero saturation) with saturated pink tissue boxes."""
    img = np.full((h, w, 3), 235, dtype=np.uint8)
    for (y0, x0, y1, x1) in tissue:
        img[y0:y1, x0:x1] = (200, 80, 140)
    return img


class TestOtsu:
    @given(
        st.lists(st.integers(0, 255), min_size=2, max_size=400).filter(
            lambda v: len(set(v)) >= 2
        )
    )
    def test_matches_brute_force(self, values):
        arr = np.asarray(values, dtype=np.uint8)
        assert otsu_threshold(arr) == oracles.otsu(values)

    def test_bimodal(self):
        arr = np.asarray([10] * 50 + [200] * 50, dtype=np.uint8)
        t = otsu_threshold(arr)
        assert 10 <= t < 200
        assert ((arr > t) == (arr == 200)).all()

    def test_constant_input_does_not_crash(self):
        assert otsu_threshold(np.full(100, 7, dtype=np.uint8)) == 0


class TestSegmentTissue:
    def test_finds_tissue_block(self):
        mask = segment_tissue(_slide(), downsample=4)
        assert mask.grid.shape == (128, 128)
        # box rows 100:300 -> grid rows 25:75
        assert mask.grid[30:70, 30:70].all()
        assert not mask.grid[:20, :20].any()

    def test_no_tissue_raises(self):
        img = np.full((128, 128, 3), 240, dtype=np.uint8)
        with pytest.raises(NoTissueError, match="no tissue found"):
            segment_tissue(img)

    def test_small_components_removed(self):
        img = _slide(256, 256, tissue=((16, 16, 48, 48), (200, 200, 206, 206)))
        mask = segment_tissue(img, downsample=1)  # 32x32=1024 kept, 6x6=36 dropped
        assert mask.grid[20:40, 20:40].all()
        assert not mask.grid[198:210, 198:210].any()

    def test_rejects_non_rgb(self):
        with pytest.raises(TilerError, match="RGB"):
            segment_tissue(np.zeros((10, 10), dtype=np.uint8))

    def test_downsample_pads_ragged_edges(self):
        img = _slide(515, 517)  # not multiples of 4
        mask = segment_tissue(img, downsample=4)
        assert mask.grid.shape == (129, 130)


class TestExtractPatches:
    def test_full_tissue_448_gives_four_patches_row_major(self):
        img = _slide(448, 448, tissue=((0, 0, 448, 448),))
        mask = segment_tissue(img, downsample=4)
        grid = extract_patches(img, mask, patch_size=224, min_tissue_fraction=0.5)
        assert grid.coords.tolist() == [[0, 0], [224, 0], [0, 224], [224, 224]]
        assert (grid.tissue_fraction == 1.0).all()

    def test_threshold_filters_background_patches(self):
        img = _slide(448, 448, tissue=((0, 0, 224, 224),))
        mask = segment_tissue(img, downsample=4)
        grid = extract_patches(img, mask, patch_size=224, min_tissue_fraction=0.5)
        assert grid.coords.tolist() == [[0, 0]]

    def test_patch_larger_than_image_warns_empty(self):
        img = _slide(100, 100, tissue=((0, 0, 100, 100),))
        mask = segment_tissue(img, downsample=4)
        with pytest.warns(UserWarning, match="patch"):
            grid = extract_patches(img, mask, patch_size=224)
        assert grid.coords.shape == (0, 2)

    def test_mask_shape_mismatch(self):
        img = _slide(448, 448)
        mask = segment_tissue(img, downsample=4)
        with pytest.raises(TilerError, match="mask"):
            extract_patches(_slide(512, 512), mask)

    def test_grid_json_round_trip(self, tmp_path):
        img = _slide()
        mask = segment_tissue(img, downsample=4)
        grid = extract_patches(img, mask)
        save_grid(grid, tmp_path / "g.json")
        back = load_grid(tmp_path / "g.json")
        assert np.array_equal(back.coords, grid.coords)
        assert np.allclose(back.tissue_fraction, grid.tissue_fraction)
        assert back.patch_size == grid.patch_size


class TestSynthCohort:
    def _spec(self, **kw):
        base = dict(
            n_classes=3,
            feature_dim=8,
            bag_size=(6, 10),
            signal_fraction=0.2,
            separation=6.0,
            noise_scale=1.0,
            seed=11,
        )
        base.update(kw)
        return SyntheticBagSpec(**base)

    def test_case_count_and_labels(self):
        manifest, bags = synth_cohort(self._spec(), 20)
        assert len(manifest.cases) == 60
        assert manifest.classes_at("category") == {
            "class_0": 20, "class_1": 20, "class_2": 20,
        }
        assert set(bags) == {c.case_id for c in manifest.cases}

    def test_sites_round_robin(self):
        manifest, _ = synth_cohort(self._spec(), 7, sites=("x", "y", "z"))
        per_class = [c.site for c in manifest.cases if c.label_category == "class_0"]
        assert per_class == ["x", "y", "z", "x", "y", "z", "x"]

    def test_signal_rows_come_first(self):
        manifest, bags = synth_cohort(self._spec(separation=50.0), 5)
        for case in manifest.cases:
            cls = int(case.label_category.split("_")[1])
            bag = bags[case.case_id]
            n_sig = n_signal_instances(bag.n_instances, 0.2)
            axis = bag.features[:, cls]
            assert (axis[:n_sig] > 25.0).all()
            assert (np.abs(axis[n_sig:]) < 25.0).all()

    def test_signal_count_formula(self):
        assert n_signal_instances(10, 0.2) == 2
        assert n_signal_instances(11, 0.2) == 3
        assert n_signal_instances(1, 0.2) == 1

    def test_separation_zero_all_background(self):
        _, bags = synth_cohort(self._spec(separation=0.0), 10)
        feats = np.concatenate([b.features for b in bags.values()])
        assert np.abs(feats.mean(axis=0)).max() < 0.2

    def test_byte_identical_per_seed(self, tmp_path):
        for sub in ("one", "two"):
            (tmp_path / sub).mkdir()
            synth_cohort(self._spec(), 4, out_dir=tmp_path / sub)
        for f in sorted((tmp_path / "one").glob("*.fbag")):
            assert f.read_bytes() == (tmp_path / "two" / f.name).read_bytes()

    def test_written_bags_read_back(self, tmp_path):
        manifest, bags = synth_cohort(self._spec(), 3, out_dir=tmp_path)
        for case in manifest.cases:
            assert read_bag(tmp_path / case.bag_path) == bags[case.case_id]
            assert case.n_instances == bags[case.case_id].n_instances

    def test_dim_must_cover_classes(self):
        with pytest.raises(ValueError, match="feature_dim"):
            self._spec(n_classes=9, feature_dim=8).validate()

    def test_default_sites_cover_six(self):
        assert len(DEFAULT_SITES) == 6
