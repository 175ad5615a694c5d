"""Patch encoders and their declared output contracts.

Only the seeded random-projection encoder ships with weights; the named
pretrained encoders are registered for dimension checking and fail at load
time with instructions, since their weights are user-supplied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

POOL_BINS = 16  # null encoder pools each patch to a 16x16x3 summary


class ExporterError(Exception):
    """Base for everything this package raises on purpose."""


class EncoderLoadError(ExporterError):
    """The requested encoder cannot be instantiated."""


@dataclass(frozen=True)
class EncoderSpec:
    """What an encoder promises: name, output width, and input recipe."""

    name: str
    dim: int
    patch_size: int | None = None  # None: accepts any square patch
    resize: int | None = None
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def validate(self) -> None:
        if self.dim < 1:
            raise ExporterError(f"encoder dim must be positive, got {self.dim}")
        if self.patch_size is not None and self.patch_size < 1:
            raise ExporterError("patch size must be positive")


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Fixed output widths for the mainstream pathology/imagenet encoders; asking
# for a different --dim with these names is a configuration mistake.
KNOWN_ENCODERS: dict[str, EncoderSpec] = {
    "resnet50": EncoderSpec(
        "resnet50", dim=1024, patch_size=224, resize=224,
        mean=IMAGENET_MEAN, std=IMAGENET_STD,
    ),
    "uni": EncoderSpec(
        "uni", dim=1024, patch_size=224, resize=224,
        mean=IMAGENET_MEAN, std=IMAGENET_STD,
    ),
    "conch": EncoderSpec(
        "conch", dim=512, patch_size=224, resize=224,
        mean=IMAGENET_MEAN, std=IMAGENET_STD,
    ),
    "null": EncoderSpec("null", dim=64),
}


def resolve_spec(name: str, dim: int | None = None) -> EncoderSpec:
    """Look the name up and reconcile it with a requested output width."""
    known = KNOWN_ENCODERS.get(name)
    if known is None:
        raise EncoderLoadError(
            f"unknown encoder {name!r}; choose from {sorted(KNOWN_ENCODERS)}"
        )
    if dim is None:
        spec = known
    elif name == "null":
        spec = EncoderSpec("null", dim=dim)
    elif dim != known.dim:
        raise ExporterError(
            f"encoder {name!r} emits {known.dim}-wide features, not {dim}"
        )
    else:
        spec = known
    spec.validate()
    return spec


class NullEncoder:
    """Seeded random projection of pooled patch pixels.

    Each patch is block-averaged to a 16x16x3 summary, scaled to [0, 1], and
    multiplied by a fixed Gaussian matrix drawn once from a counter-based
    generator. Output depends only on (seed, dim, patch pixels), so exports
    are byte-stable across runs and batch sizes.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        rng = np.random.Generator(np.random.Philox(key=self.seed & 0xFFFFFFFFFFFFFFFF))
        n_in = POOL_BINS * POOL_BINS * 3
        self.projection = (
            rng.standard_normal((n_in, spec.dim)) / np.sqrt(n_in)
        ).astype(np.float64)

    def _pool(self, patches: np.ndarray) -> np.ndarray:
        b, h, w, _ = patches.shape
        values = patches.astype(np.float64) / 255.0
        rows = np.linspace(0, h, POOL_BINS + 1).astype(np.int64)[:-1]
        cols = np.linspace(0, w, POOL_BINS + 1).astype(np.int64)[:-1]
        pooled = np.add.reduceat(values, rows, axis=1)
        pooled = np.add.reduceat(pooled, cols, axis=2)
        row_n = np.diff(np.append(rows, h)).reshape(1, -1, 1, 1)
        col_n = np.diff(np.append(cols, w)).reshape(1, 1, -1, 1)
        pooled /= row_n * col_n
        return pooled.reshape(b, -1)

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        if patches.ndim != 4 or patches.shape[3] != 3:
            raise ExporterError(
                f"expected a (B, H, W, 3) patch batch, got shape {patches.shape}"
            )
        if patches.shape[1] < POOL_BINS or patches.shape[2] < POOL_BINS:
            raise ExporterError(
                f"patches must be at least {POOL_BINS}px on each side"
            )
        return (self._pool(patches) @ self.projection).astype(np.float32)


def load_encoder(spec: EncoderSpec, seed: int = 0) -> NullEncoder:
    """Instantiate the encoder behind a spec; only 'null' is self-contained."""
    if spec.name == "null":
        return NullEncoder(spec, seed=seed)
    raise EncoderLoadError(
        f"encoder {spec.name!r} needs user-supplied weights; this package only "
        "bundles the seeded 'null' projection encoder"
    )
