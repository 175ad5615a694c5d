"""Tissue segmentation, patch-grid extraction, and synthetic cohort generation.

Segmentation follows the usual saturation-threshold recipe: downsample,
convert to HSV, median-filter the saturation channel, binarize with Otsu,
and drop small connected components. Patches are non-overlapping squares on
a grid aligned to (0, 0), kept when enough of their footprint is tissue.

The synthetic generator produces feature bags with a known per-class signal
so the whole training and evaluation stack can run without any image encoder.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .bagio import CaseRecord, CohortManifest, FeatureBag, write_bag

logger = logging.getLogger(__name__)

MIN_COMPONENT_CELLS = 64
MEDIAN_WINDOW = 7
DEFAULT_PATCH_SIZE = 224
DEFAULT_MIN_TISSUE_FRACTION = 0.5
DEFAULT_SITES = ("site0", "site1", "site2", "site3", "site4", "site5")


class TilerError(Exception):
    """Segmentation or patch extraction failure."""


class NoTissueError(TilerError):
    """Segmentation found no tissue."""


@dataclass
class TissueMask:
    downsample: int
    grid: np.ndarray  # (H', W') bool
    threshold: int  # chosen Otsu threshold, 0-255

    def validate(self) -> None:
        if self.downsample < 1:
            raise TilerError("downsample factor must be >= 1")
        if self.grid.ndim != 2:
            raise TilerError("mask grid must be 2-D")


@dataclass
class PatchGrid:
    patch_size: int
    coords: np.ndarray  # (M, 2) int32, top-left (x, y) at level 0
    tissue_fraction: np.ndarray  # (M,) float64

    @property
    def n_patches(self) -> int:
        return int(self.coords.shape[0])

    def to_json_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "coords": [[int(x), int(y)] for x, y in self.coords],
            "tissue_fraction": [float(f) for f in self.tissue_fraction],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PatchGrid":
        coords = np.asarray(doc["coords"], dtype=np.int32).reshape(-1, 2)
        return cls(
            patch_size=int(doc["patch_size"]),
            coords=coords,
            tissue_fraction=np.asarray(doc["tissue_fraction"], dtype=np.float64),
        )


def save_grid(grid: PatchGrid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_json_dict(), indent=2) + "\n", "utf-8")


def load_grid(path: str | Path) -> PatchGrid:
    return PatchGrid.from_json_dict(json.loads(Path(path).read_text("utf-8")))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_mask_png(mask: TissueMask, path: str | Path) -> None:
    Image.fromarray(mask.grid.astype(np.uint8) * 255, mode="L").save(path)


def _block_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsample with edge replication to a multiple of factor."""
    if factor == 1:
        return image.astype(np.float64)
    h, w = image.shape[:2]
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    hh, ww = padded.shape[0] // factor, padded.shape[1] // factor
    blocks = padded.reshape(hh, factor, ww, factor, 3).astype(np.float64)
    return blocks.mean(axis=(1, 3))


def _saturation_u8(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation (max-min)/max scaled to 0..255."""
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    sat = np.zeros(mx.shape, dtype=np.float64)
    nonzero = mx > 0
    sat[nonzero] = (mx[nonzero] - mn[nonzero]) / mx[nonzero]
    return np.clip(np.rint(sat * 255.0), 0, 255).astype(np.uint8)


def otsu_threshold(values: np.ndarray) -> int:
    """Otsu's threshold over a 0..255 histogram; lowest maximizer on ties.

    Returns t such that foreground = values > t.
    """
    hist = np.bincount(values.reshape(-1), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise TilerError("empty image")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * levels)
    w1 = total - w0
    mu0 = np.divide(sum0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(sum0[-1] - sum0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between))


def segment_tissue(image: np.ndarray, downsample: int = 1) -> TissueMask:
    """Binary tissue mask from an RGB raster."""
    image = np.asarray(image)
    if image.size == 0:
        raise TilerError("empty image")
    if image.ndim != 3 or image.shape[2] != 3:
        raise TilerError(f"expected an RGB image, got shape {image.shape}")
    if downsample < 1:
        raise TilerError("downsample factor must be >= 1")
    small = _block_downsample(image, downsample)
    sat = _saturation_u8(small)
    sat = ndimage.median_filter(sat, size=MEDIAN_WINDOW)
    threshold = otsu_threshold(sat)
    mask = sat > threshold
    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n_comp > 0:
        sizes = np.bincount(labels.reshape(-1))
        small_ids = np.flatnonzero(sizes < MIN_COMPONENT_CELLS)
        mask &= ~np.isin(labels, small_ids[small_ids > 0])
    if not mask.any():
        raise NoTissueError("no tissue found")
    return TissueMask(downsample=downsample, grid=mask, threshold=threshold)


def extract_patches(
    image: np.ndarray,
    mask: TissueMask,
    patch_size: int = DEFAULT_PATCH_SIZE,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
) -> PatchGrid:
    """Keep grid-aligned patches whose tissue fraction meets the threshold."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    f = mask.downsample
    expect = (math.ceil(h / f), math.ceil(w / f))
    if mask.grid.shape != expect:
        raise TilerError(
            f"mask shape {mask.grid.shape} does not match image {(h, w)} "
            f"at downsample {f} (expected {expect})"
        )
    if patch_size > h or patch_size > w:
        warnings.warn(
            f"patch_size {patch_size} exceeds image extent {(h, w)}; empty grid",
            stacklevel=2,
        )
        return PatchGrid(
            patch_size=patch_size,
            coords=np.zeros((0, 2), dtype=np.int32),
            tissue_fraction=np.zeros(0),
        )
    grid = mask.grid.astype(np.float64)
    coords = []
    fractions = []
    for row in range(h // patch_size):
        for col in range(w // patch_size):
            y = row * patch_size
            x = col * patch_size
            cells = grid[
                y // f : math.ceil((y + patch_size) / f),
                x // f : math.ceil((x + patch_size) / f),
            ]
            frac = float(cells.mean())
            if frac >= min_tissue_fraction:
                coords.append((x, y))
                fractions.append(frac)
    return PatchGrid(
        patch_size=patch_size,
        coords=np.asarray(coords, dtype=np.int32).reshape(-1, 2),
        tissue_fraction=np.asarray(fractions, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------


@dataclass
class SyntheticBagSpec:
    """Controls the synthetic feature generator.

    Class c's signal instances are Gaussian around ``separation * noise_scale``
    on feature axis c; all other instances come from the shared zero-mean
    background Gaussian. Signal rows always come first in each bag, so ground
    truth is recoverable from the bag size alone.
    """

    n_classes: int
    feature_dim: int
    bag_size: tuple[int, int]  # inclusive (min, max)
    signal_fraction: float
    separation: float
    noise_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.feature_dim < self.n_classes:
            raise ValueError("feature_dim must be >= n_classes (one signal axis each)")
        lo, hi = self.bag_size
        if lo < 1 or hi < lo:
            raise ValueError(f"bad bag_size range {self.bag_size}")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must be in (0, 1]")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")


def n_signal_instances(bag_size: int, signal_fraction: float) -> int:
    """Signal rows in a synthetic bag of the given size (they come first)."""
    return math.ceil(bag_size * signal_fraction)


def synth_cohort(
    spec: SyntheticBagSpec,
    n_cases_per_class: int,
    sites: Sequence[str] = DEFAULT_SITES,
    out_dir: str | Path | None = None,
) -> tuple[CohortManifest, dict[str, FeatureBag]]:
    """Deterministic synthetic cohort; optionally writes FBAG files to out_dir."""
    spec.validate()
    if n_cases_per_class < 1:
        raise ValueError("n_cases_per_class must be >= 1")
    if not sites:
        raise ValueError("site list must be non-empty")
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed) & 0xFFFFFFFFFFFFFFFF))
    lo, hi = spec.bag_size
    cases: list[CaseRecord] = []
    bags: dict[str, FeatureBag] = {}
    taxonomy: dict[str, dict[str, list[str]]] = {}
    case_no = 0
    for c in range(spec.n_classes):
        cls = f"class_{c}"
        taxonomy[cls] = {cls: [cls]}
        mean = np.zeros(spec.feature_dim)
        mean[c] = spec.separation * spec.noise_scale
        for _ in range(n_cases_per_class):
            case_id = f"case_{c}_{case_no:04d}"
            k = int(rng.integers(lo, hi + 1))
            n_sig = n_signal_instances(k, spec.signal_fraction)
            feats = rng.standard_normal((k, spec.feature_dim)) * spec.noise_scale
            feats[:n_sig] += mean
            feats = feats.astype(np.float32)
            cols = max(1, math.ceil(math.sqrt(k)))
            idx = np.arange(k)
            coords = np.stack(
                [(idx % cols) * DEFAULT_PATCH_SIZE, (idx // cols) * DEFAULT_PATCH_SIZE],
                axis=1,
            ).astype(np.int32)
            bag = FeatureBag(
                case_id=case_id,
                slide_index=np.zeros(k, dtype=np.uint16),
                coords=coords,
                features=feats,
            )
            bags[case_id] = bag
            cases.append(
                CaseRecord(
                    case_id=case_id,
                    site=sites[case_no % len(sites)],
                    label_category=cls,
                    label_family=cls,
                    label_type=cls,
                    bag_path=f"{case_id}.fbag",
                    n_instances=k,
                )
            )
            case_no += 1
    manifest = CohortManifest(cases=cases, label_taxonomy=taxonomy)
    manifest.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for case in cases:
            write_bag(bags[case.case_id], out_dir / case.bag_path)
        logger.info("wrote %d synthetic bags to %s", len(cases), out_dir)
    return manifest, bags
