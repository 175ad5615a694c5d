"""Project per-instance attention back onto slide coordinates and render it.

An overlay keeps one entry per bag instance: (slide, x, y, raw attention,
normalized attention). Normalization happens independently per slide so a
case spanning several slides gets a full-range map on each. Rendering fills
each patch with a 256-entry diverging colormap (cool = low attention,
warm = high) alpha-blended over the base image or a white canvas.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import milnet
from .bagio import FeatureBag

NORMALIZATION_MODES = ("minmax", "percentile")
PERCENTILE_CLAMP = (1.0, 99.0)
DEFAULT_ALPHA = 0.5
COLORMAP_RESOURCE = "coolwarm_256.json"


class HeatmapError(Exception):
    """Overlay construction or rendering failure."""


@dataclass(eq=False)
class AttentionOverlay:
    case_id: str
    patch_size: int
    normalization: str
    slide_index: np.ndarray  # (M,) uint16
    coords: np.ndarray  # (M, 2) int32, level-0 (x, y)
    raw: np.ndarray  # (M,) float64 attention weights
    normalized: np.ndarray  # (M,) float64 in [0, 1]

    @property
    def n_instances(self) -> int:
        return int(self.raw.shape[0])

    def validate(self) -> None:
        m = self.raw.shape[0]
        if self.slide_index.shape != (m,) or self.coords.shape != (m, 2):
            raise HeatmapError("overlay arrays misaligned")
        if self.normalized.shape != (m,):
            raise HeatmapError("overlay arrays misaligned")
        if self.normalization not in NORMALIZATION_MODES:
            raise HeatmapError(f"unknown normalization {self.normalization!r}")
        if self.patch_size < 1:
            raise HeatmapError("patch_size must be >= 1")
        if m and (self.normalized.min() < 0.0 or self.normalized.max() > 1.0):
            raise HeatmapError("normalized scores must lie in [0, 1]")

    def slides(self) -> list[int]:
        return [int(s) for s in np.unique(self.slide_index)]

    def for_slide(self, slide: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(coords, raw, normalized) restricted to one slide."""
        sel = self.slide_index == slide
        if not sel.any():
            raise HeatmapError(f"overlay has no instances on slide {slide}")
        return self.coords[sel], self.raw[sel], self.normalized[sel]

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "patch_size": self.patch_size,
            "normalization": self.normalization,
            "slide_index": [int(s) for s in self.slide_index],
            "coords": [[int(x), int(y)] for x, y in self.coords],
            "raw": [float(x) for x in self.raw],
            "normalized": [float(x) for x in self.normalized],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AttentionOverlay":
        overlay = cls(
            case_id=str(doc["case_id"]),
            patch_size=int(doc["patch_size"]),
            normalization=str(doc["normalization"]),
            slide_index=np.asarray(doc["slide_index"], dtype=np.uint16),
            coords=np.asarray(doc["coords"], dtype=np.int32).reshape(-1, 2),
            raw=np.asarray(doc["raw"], dtype=np.float64),
            normalized=np.asarray(doc["normalized"], dtype=np.float64),
        )
        overlay.validate()
        return overlay


def save_overlay(overlay: AttentionOverlay, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(overlay.to_json_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
    )


def load_overlay(path: str | Path) -> AttentionOverlay:
    return AttentionOverlay.from_json_dict(json.loads(Path(path).read_text("utf-8")))


def _normalize(raw: np.ndarray, mode: str) -> np.ndarray:
    """Map raw scores to [0, 1]; a constant block maps to 0.5 everywhere."""
    values = np.asarray(raw, dtype=np.float64)
    if mode == "percentile":
        lo, hi = np.percentile(values, PERCENTILE_CLAMP)
        values = np.clip(values, lo, hi)
    else:
        lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full(values.shape, 0.5)
    return (np.clip(values, lo, hi) - lo) / (hi - lo)


def attention_scores(
    model: milnet.MilModel,
    bag: FeatureBag,
    normalization: str = "minmax",
    patch_size: int = 224,
) -> AttentionOverlay:
    """Evaluation-mode attention weights mapped onto the bag's coordinates."""
    if normalization not in NORMALIZATION_MODES:
        raise HeatmapError(
            f"unknown normalization {normalization!r}; choose from {NORMALIZATION_MODES}"
        )
    trace = milnet.forward(model, bag, training=False)
    raw = trace.attn.copy()
    normalized = np.empty_like(raw)
    for slide in np.unique(bag.slide_index):
        sel = bag.slide_index == slide
        normalized[sel] = _normalize(raw[sel], normalization)
    overlay = AttentionOverlay(
        case_id=bag.case_id,
        patch_size=patch_size,
        normalization=normalization,
        slide_index=bag.slide_index.copy(),
        coords=bag.coords.copy(),
        raw=raw,
        normalized=normalized,
    )
    overlay.validate()
    return overlay


def load_colormap() -> np.ndarray:
    """Shipped 256-entry RGB table; index 0 coolest, 255 warmest."""
    text = resources.files("milpath.data").joinpath(COLORMAP_RESOURCE).read_text("utf-8")
    table = np.asarray(json.loads(text), dtype=np.uint8)
    if table.shape != (256, 3):
        raise HeatmapError(f"colormap table must be 256x3, got {table.shape}")
    return table


def colormap_lookup(table: np.ndarray, normalized: np.ndarray) -> np.ndarray:
    """Nearest-entry lookup: score s -> table[round(s * 255)]."""
    idx = np.rint(np.asarray(normalized, dtype=np.float64) * 255.0).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() > 255):
        raise HeatmapError("normalized scores must lie in [0, 1]")
    return table[idx]


@dataclass
class Annotation:
    label: str
    vertices: np.ndarray  # (V, 2) level-0 (x, y)


def load_annotations(path: str | Path) -> list[Annotation]:
    """Polygon layer: JSON list of {label, vertices: [[x, y], ...]}."""
    doc = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(doc, list):
        raise HeatmapError("annotation file must hold a JSON list")
    out = []
    for i, entry in enumerate(doc):
        try:
            vertices = np.asarray(entry["vertices"], dtype=np.float64).reshape(-1, 2)
            out.append(Annotation(label=str(entry["label"]), vertices=vertices))
        except (KeyError, TypeError, ValueError) as exc:
            raise HeatmapError(f"bad annotation entry {i}: {exc}") from exc
        if len(vertices) < 3:
            raise HeatmapError(f"annotation {i} needs at least 3 vertices")
    return out


def render(
    overlay: AttentionOverlay,
    base_image: np.ndarray | None = None,
    colormap: np.ndarray | None = None,
    alpha: float = DEFAULT_ALPHA,
    slide: int | None = None,
    annotations: list[Annotation] | None = None,
) -> np.ndarray:
    """Flat per-patch fill of colormap(normalized score) blended over the base.

    One slide per call. Without a base image, patches are drawn on a white
    canvas just large enough to hold them. alpha=0 reproduces the base
    byte-for-byte. Annotations are drawn as 3px outlines on top.
    """
    overlay.validate()
    if not 0.0 <= alpha <= 1.0:
        raise HeatmapError("alpha must lie in [0, 1]")
    if slide is None:
        slides = overlay.slides()
        if len(slides) != 1:
            raise HeatmapError(
                f"overlay spans slides {slides}; pass slide= to pick one"
            )
        slide = slides[0]
    coords, _, normalized = overlay.for_slide(slide)
    ps = overlay.patch_size
    if base_image is not None:
        canvas = np.asarray(base_image)
        if canvas.ndim != 3 or canvas.shape[2] != 3 or canvas.dtype != np.uint8:
            raise HeatmapError("base image must be (H, W, 3) uint8")
        h, w = canvas.shape[:2]
        if coords.size:
            if coords.min() < 0 or (coords[:, 0] + ps).max() > w or (coords[:, 1] + ps).max() > h:
                raise HeatmapError("patch coordinates extend outside the base image")
        canvas = canvas.astype(np.float64)
    else:
        if coords.min(initial=0) < 0:
            raise HeatmapError("negative patch coordinates need a base image")
        w = int(coords[:, 0].max()) + ps if coords.size else ps
        h = int(coords[:, 1].max()) + ps if coords.size else ps
        canvas = np.full((h, w, 3), 255.0)
    table = load_colormap() if colormap is None else np.asarray(colormap, dtype=np.uint8)
    colors = colormap_lookup(table, normalized).astype(np.float64)
    for (x, y), color in zip(coords, colors):
        block = canvas[y : y + ps, x : x + ps]
        canvas[y : y + ps, x : x + ps] = (1.0 - alpha) * block + alpha * color
    out = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    if annotations:
        img = Image.fromarray(out)
        draw = ImageDraw.Draw(img)
        for ann in annotations:
            pts = [(float(x), float(y)) for x, y in ann.vertices]
            draw.polygon(pts, outline=(0, 0, 0), width=3)
        out = np.asarray(img)
    return out


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(Path(path), format="PNG")
