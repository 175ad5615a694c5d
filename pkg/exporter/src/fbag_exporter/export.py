"""Drive an encoder over a tile grid and write the resulting feature bag."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from milpath.bagio import make_bag, write_bag
from milpath.tiler import load_grid, load_image

from .encoders import EncoderSpec, ExporterError, load_encoder

logger = logging.getLogger(__name__)

DEFAULT_BATCH = 64


def extract_patches(image: np.ndarray, coords: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut (N, ps, ps, 3) patches at the given top-left corners."""
    h, w = image.shape[:2]
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ExporterError(f"coords must be (N, 2), got shape {coords.shape}")
    out_of_bounds = (
        (coords[:, 0] < 0)
        | (coords[:, 1] < 0)
        | (coords[:, 0] + patch_size > w)
        | (coords[:, 1] + patch_size > h)
    )
    if out_of_bounds.any():
        bad = coords[out_of_bounds][0]
        raise ExporterError(
            f"patch at ({bad[0]}, {bad[1]}) extends past the {w}x{h} image"
        )
    patches = np.empty((len(coords), patch_size, patch_size, 3), dtype=image.dtype)
    for i, (x, y) in enumerate(coords):
        patches[i] = image[y : y + patch_size, x : x + patch_size, :3]
    return patches


def export_bag(
    image_path: str | Path,
    grid_path: str | Path,
    out_path: str | Path,
    spec: EncoderSpec,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
) -> Path:
    """Encode every grid patch and write one .fbag; returns the written path.

    All validation (grid non-empty, coords in bounds, encoder loadable)
    happens before anything touches the output path.
    """
    if batch_size < 1:
        raise ExporterError(f"batch size must be positive, got {batch_size}")
    out_path = Path(out_path)
    grid = load_grid(grid_path)
    coords = np.asarray(grid.coords, dtype=np.int32)
    if len(coords) == 0:
        raise ExporterError(f"grid {grid_path} has no patches; nothing to export")

    image = load_image(image_path)
    patches = extract_patches(image, coords, grid.patch_size)
    encoder = load_encoder(spec, seed=seed)

    chunks = []
    for start in range(0, len(patches), batch_size):
        chunks.append(encoder(patches[start : start + batch_size]))
    features = np.concatenate(chunks, axis=0)
    if features.shape != (len(coords), spec.dim):
        raise ExporterError(
            f"encoder produced shape {features.shape}, "
            f"expected ({len(coords)}, {spec.dim})"
        )

    bag = make_bag(out_path.stem, features, coords=coords)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_bag(bag, out_path)
    logger.info(
        "exported %d patches x %d dims to %s", len(coords), spec.dim, out_path
    )
    return out_path
