import hashlib
import subprocess
import sys

import numpy as np
import pytest
from milpath.bagio import read_bag
from milpath.tiler import PatchGrid, save_grid
from PIL import Image

from fbag_exporter import (
    EncoderLoadError,
    EncoderSpec,
    ExporterError,
    NullEncoder,
    export_bag,
    extract_patches,
    load_encoder,
    resolve_spec,
)


def write_fixture(tmp_path, n_patches=4, patch_size=32, side=None, seed=11):
    """A small RGB image plus a one-row grid of n_patches patches."""
    side = side or patch_size * n_patches
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (patch_size, side, 3)).astype(np.uint8)
    image_path = tmp_path / "slide.png"
    Image.fromarray(pixels).save(image_path)
    coords = np.array([[i * patch_size, 0] for i in range(n_patches)], dtype=np.int32)
    grid = PatchGrid(
        patch_size=patch_size,
        coords=coords,
        tissue_fraction=np.ones(n_patches),
    )
    grid_path = tmp_path / "slide.grid.json"
    save_grid(grid, grid_path)
    return image_path, grid_path, coords


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestEncoderSpec:
    def test_known_encoders_pin_published_widths(self):
        assert resolve_spec("resnet50").dim == 1024
        assert resolve_spec("uni").dim == 1024
        assert resolve_spec("conch").dim == 512

    def test_matching_dim_is_accepted(self):
        assert resolve_spec("conch", dim=512).dim == 512

    def test_dim_mismatch_is_an_error(self):
        with pytest.raises(ExporterError, match="512-wide"):
            resolve_spec("conch", dim=1024)

    def test_unknown_encoder_name(self):
        with pytest.raises(EncoderLoadError, match="unknown encoder"):
            resolve_spec("clip-vit")

    def test_null_takes_any_positive_dim(self):
        assert resolve_spec("null", dim=7).dim == 7
        with pytest.raises(ExporterError, match="positive"):
            resolve_spec("null", dim=0)

    def test_pretrained_encoders_are_registered_but_not_loadable(self):
        # Their weights are user-supplied; asking for one must fail loudly.
        for name in ("resnet50", "uni", "conch"):
            with pytest.raises(EncoderLoadError, match="weights"):
                load_encoder(resolve_spec(name))


class TestNullEncoder:
    def patches(self, n=5, ps=48, seed=0):
        rng = np.random.default_rng(seed)
        return rng.integers(0, 256, (n, ps, ps, 3)).astype(np.uint8)

    def test_output_shape_and_dtype(self):
        enc = load_encoder(resolve_spec("null", dim=96), seed=3)
        out = enc(self.patches())
        assert out.shape == (5, 96)
        assert out.dtype == np.float32

    def test_same_seed_same_features(self):
        spec = resolve_spec("null", dim=64)
        a = load_encoder(spec, seed=5)(self.patches())
        b = load_encoder(spec, seed=5)(self.patches())
        np.testing.assert_array_equal(a, b)

    def test_different_seed_different_features(self):
        spec = resolve_spec("null", dim=64)
        a = load_encoder(spec, seed=5)(self.patches())
        b = load_encoder(spec, seed=6)(self.patches())
        assert not np.array_equal(a, b)

    def test_batch_size_does_not_change_features(self):
        enc = load_encoder(resolve_spec("null", dim=64), seed=1)
        p = self.patches(n=7)
        whole = enc(p)
        split = np.concatenate([enc(p[:3]), enc(p[3:5]), enc(p[5:])])
        np.testing.assert_array_equal(whole, split)

    def test_patch_size_independence(self):
        # Pooling first means any square patch >= 16px is accepted.
        enc = load_encoder(resolve_spec("null", dim=32), seed=0)
        assert enc(self.patches(ps=16)).shape == (5, 32)
        assert enc(self.patches(ps=100)).shape == (5, 32)

    def test_rejects_tiny_and_malformed_input(self):
        enc = load_encoder(resolve_spec("null", dim=32), seed=0)
        with pytest.raises(ExporterError, match="at least 16"):
            enc(self.patches(ps=8))
        with pytest.raises(ExporterError, match="batch"):
            enc(np.zeros((4, 32, 32), dtype=np.uint8))

    def test_direct_construction_validates_spec(self):
        with pytest.raises(ExporterError, match="positive"):
            NullEncoder(EncoderSpec("null", dim=-1))


class TestExtractPatches:
    def test_cuts_expected_pixels(self):
        image = np.arange(8 * 8 * 3, dtype=np.uint8).reshape(8, 8, 3)
        got = extract_patches(image, np.array([[4, 2]]), patch_size=4)
        np.testing.assert_array_equal(got[0], image[2:6, 4:8])

    def test_out_of_bounds_coord_is_an_error(self):
        image = np.zeros((64, 64, 3), dtype=np.uint8)
        with pytest.raises(ExporterError, match="extends past"):
            extract_patches(image, np.array([[40, 0]]), patch_size=32)
        with pytest.raises(ExporterError, match="extends past"):
            extract_patches(image, np.array([[-1, 0]]), patch_size=32)

    def test_bad_coords_shape(self):
        image = np.zeros((64, 64, 3), dtype=np.uint8)
        with pytest.raises(ExporterError, match=r"\(N, 2\)"):
            extract_patches(image, np.array([1, 2, 3]), patch_size=8)


class TestExportBag:
    def test_four_patches_at_width_1024(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path, n_patches=4)
        out = export_bag(
            image_path, grid_path, tmp_path / "case.fbag",
            resolve_spec("null", dim=1024),
        )
        bag = read_bag(out)
        assert bag.features.shape == (4, 1024)

    def test_interop_round_trip_preserves_grid(self, tmp_path):
        # Cross-package contract: the consumer's reader must accept the file
        # and see the grid coordinates verbatim, in grid order.
        image_path, grid_path, coords = write_fixture(tmp_path, n_patches=6)
        out = export_bag(
            image_path, grid_path, tmp_path / "case_06.fbag",
            resolve_spec("null"), seed=2,
        )
        bag = read_bag(out)
        assert bag.case_id == "case_06"
        np.testing.assert_array_equal(bag.coords, coords)
        assert np.isfinite(bag.features).all()
        print(
            "\n[interop] PASS: exported bag read back cleanly, "
            f"{len(coords)} coords equal the grid"
        )

    def test_two_runs_are_byte_identical(self, tmp_path):
        # case_id comes from the file stem, so reruns use the same stem.
        image_path, grid_path, _ = write_fixture(tmp_path)
        spec = resolve_spec("null", dim=256)
        a = export_bag(image_path, grid_path, tmp_path / "r1" / "case.fbag", spec, seed=9)
        b = export_bag(image_path, grid_path, tmp_path / "r2" / "case.fbag", spec, seed=9)
        assert a.read_bytes() == b.read_bytes()

    def test_batch_size_does_not_change_the_file(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path, n_patches=5)
        spec = resolve_spec("null", dim=128)
        a = export_bag(image_path, grid_path, tmp_path / "r1" / "case.fbag", spec, batch_size=2)
        b = export_bag(image_path, grid_path, tmp_path / "r2" / "case.fbag", spec, batch_size=64)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_grid_errors_before_writing(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path)
        save_grid(
            PatchGrid(32, np.zeros((0, 2), dtype=np.int32), np.zeros(0)),
            grid_path,
        )
        out = tmp_path / "never.fbag"
        with pytest.raises(ExporterError, match="no patches"):
            export_bag(image_path, grid_path, out, resolve_spec("null"))
        assert not out.exists()

    def test_grid_outside_image_errors_before_writing(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path, n_patches=4)
        bigger = PatchGrid(
            32, np.array([[0, 0], [128, 0]], dtype=np.int32), np.ones(2)
        )
        save_grid(bigger, grid_path)
        out = tmp_path / "never.fbag"
        with pytest.raises(ExporterError, match="extends past"):
            export_bag(image_path, grid_path, out, resolve_spec("null"))
        assert not out.exists()

    def test_bad_batch_size(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path)
        with pytest.raises(ExporterError, match="batch size"):
            export_bag(
                image_path, grid_path, tmp_path / "z.fbag",
                resolve_spec("null"), batch_size=0,
            )

    def test_missing_image_raises_file_not_found(self, tmp_path):
        _, grid_path, _ = write_fixture(tmp_path)
        with pytest.raises(FileNotFoundError):
            export_bag(
                tmp_path / "gone.png", grid_path, tmp_path / "z.fbag",
                resolve_spec("null"),
            )


class TestCli:
    def run_cli(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "fbag_exporter.cli", *map(str, args)],
            capture_output=True,
            text=True,
        )

    def test_end_to_end_and_rerun_identity(self, tmp_path):
        image_path, grid_path, coords = write_fixture(tmp_path, n_patches=4)
        out1 = tmp_path / "r1" / "case.fbag"
        out2 = tmp_path / "r2" / "case.fbag"
        for out in (out1, out2):
            res = self.run_cli(
                "--image", image_path, "--grid", grid_path, "--out", out,
                "--encoder", "null", "--dim", "1024", "--seed", "4",
            )
            assert res.returncode == 0, res.stderr
            assert str(out) in res.stdout
        assert out1.read_bytes() == out2.read_bytes()
        bag = read_bag(out1)
        assert bag.features.shape == (4, 1024)
        np.testing.assert_array_equal(bag.coords, coords)

    def test_usage_errors_exit_1(self, tmp_path):
        res = self.run_cli("--image", "x.png")  # --grid/--out missing
        assert res.returncode == 1
        assert "error" in res.stderr
        res = self.run_cli(
            "--image", "x.png", "--grid", "g.json", "--out", "o.fbag",
            "--encoder", "madeup",
        )
        assert res.returncode == 1

    def test_missing_input_exits_2(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path)
        res = self.run_cli(
            "--image", tmp_path / "gone.png", "--grid", grid_path,
            "--out", tmp_path / "o.fbag",
        )
        assert res.returncode == 2
        assert "gone.png" in res.stderr

    def test_dim_mismatch_exits_2(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path)
        res = self.run_cli(
            "--image", image_path, "--grid", grid_path,
            "--out", tmp_path / "o.fbag", "--encoder", "uni", "--dim", "512",
        )
        assert res.returncode == 2
        assert "1024-wide" in res.stderr
        assert not (tmp_path / "o.fbag").exists()

    def test_unloadable_encoder_exits_2(self, tmp_path):
        image_path, grid_path, _ = write_fixture(tmp_path)
        res = self.run_cli(
            "--image", image_path, "--grid", grid_path,
            "--out", tmp_path / "o.fbag", "--encoder", "uni",
        )
        assert res.returncode == 2
        assert "weights" in res.stderr
