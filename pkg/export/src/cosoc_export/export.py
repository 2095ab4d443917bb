"""Turn images + a crop plan into a feature store the primary tooling consumes.

Pixel mapping contract: a relative rect (x, y, w, h) on a WxH image becomes
the pixel box ``(round(x*W), round(y*H), round(w*W), round(h*H))`` with
half-up rounding (0.5 always rounds up, unlike banker's rounding), then the
box is clamped to at least 1x1 and shifted to stay inside the image. Crops
are resized to the model's input size, embedded, L2-normalized, and written
as little-endian float32 rows in manifest depth-first order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from cosoc.crops import CropPlan, CropRect
from cosoc.errors import CosocError, SchemaError
from cosoc.features import FeatureStore, StoreClass, StoreImage, load_store, save_store

from .errors import MissingImage, ShapeMismatch
from .plugins import ModelPlugin, model_input_size, resolve_model

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp")


def half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def pixel_box(rect: CropRect, width: int, height: int) -> tuple[int, int, int, int]:
    """(left, top, box_width, box_height) in pixels for a relative rect."""
    left = half_up(rect.x * width)
    top = half_up(rect.y * height)
    box_w = max(1, half_up(rect.w * width))
    box_h = max(1, half_up(rect.h * height))
    left = min(left, width - box_w)
    top = min(top, height - box_h)
    return max(left, 0), max(top, 0), box_w, box_h


@dataclass
class ExportManifest:
    """Everything one export run needs; image ids resolve under ``images_dir``."""

    images_dir: str
    classes: dict[str, list[str]]  # class name -> image ids, in output order
    plan: CropPlan
    model: str
    out: str
    batch_size: int = 32

    def validate(self) -> None:
        if not self.classes:
            raise SchemaError("classes mapping is empty")
        if self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")
        seen: set[str] = set()
        for cls, ids in self.classes.items():
            if not isinstance(ids, list) or not ids:
                raise SchemaError(f"class {cls!r} must list at least one image id")
            for image_id in ids:
                if image_id in seen:
                    raise SchemaError(f"image id {image_id!r} listed twice")
                seen.add(image_id)
                if image_id not in self.plan.images:
                    raise SchemaError(f"image id {image_id!r} missing from the crop plan")


def resolve_image_path(images_dir: str | Path, image_id: str) -> Path:
    """Map an image id to exactly one file: exact name first, then id.<ext>."""
    root = Path(images_dir)
    exact = root / image_id
    if exact.is_file():
        return exact
    matches = [root / f"{image_id}{ext}" for ext in _IMAGE_SUFFIXES]
    found = [p for p in matches if p.is_file()]
    if not found:
        raise MissingImage(f"image id {image_id!r} not found under {root}")
    if len(found) > 1:
        raise MissingImage(f"image id {image_id!r} is ambiguous: {[p.name for p in found]}")
    return found[0]


@dataclass
class _Batcher:
    """Order-preserving batched embedding with output-shape policing."""

    model: ModelPlugin
    batch_size: int
    pending: list[np.ndarray] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)
    dim: int | None = None

    def add(self, crop: np.ndarray) -> None:
        self.pending.append(crop)
        if len(self.pending) >= self.batch_size:
            self.flush()

    def flush(self) -> None:
        if not self.pending:
            return
        batch = np.stack(self.pending)
        out = np.asarray(self.model(batch), dtype=np.float64)
        if out.ndim != 2 or out.shape[0] != batch.shape[0]:
            raise ShapeMismatch(
                f"model returned shape {out.shape} for a batch of {batch.shape[0]} crops"
            )
        if self.dim is None:
            self.dim = int(out.shape[1])
        elif out.shape[1] != self.dim:
            raise ShapeMismatch(
                f"model output dim changed from {self.dim} to {out.shape[1]} across batches"
            )
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ShapeMismatch("model produced a zero embedding; cannot normalize")
        self.rows.extend(out / norms)
        self.pending.clear()


def export_features(manifest: ExportManifest) -> FeatureStore:
    """Embed every planned crop and write the store to ``manifest.out``.

    Returns the in-memory store after writing; crop order per image follows
    the plan, image order follows ``manifest.classes``.
    """
    manifest.validate()
    model = resolve_model(manifest.model)
    size = model_input_size(model)
    batcher = _Batcher(model=model, batch_size=manifest.batch_size)

    layout: list[tuple[str, str, list[CropRect]]] = []
    for cls, image_ids in manifest.classes.items():
        for image_id in image_ids:
            path = resolve_image_path(manifest.images_dir, image_id)
            rects = manifest.plan.images[image_id]
            with Image.open(path) as img:
                rgb = img.convert("RGB")
                width, height = rgb.size
                for rect in rects:
                    left, top, bw, bh = pixel_box(rect, width, height)
                    crop = rgb.crop((left, top, left + bw, top + bh))
                    resized = crop.resize((size, size), Image.BILINEAR)
                    batcher.add(np.asarray(resized, dtype=np.uint8))
            layout.append((cls, image_id, rects))
    batcher.flush()
    assert batcher.dim is not None

    rows = np.asarray(batcher.rows, dtype=np.float32)  # float32 truncation at write time
    classes: list[StoreClass] = []
    cursor = 0
    current: StoreClass | None = None
    for cls, image_id, rects in layout:
        if current is None or current.name != cls:
            current = StoreClass(name=cls, images=[])
            classes.append(current)
        block = rows[cursor : cursor + len(rects)]
        cursor += len(rects)
        current.images.append(
            StoreImage(
                id=image_id,
                crop_ids=[f"c{i}" for i in range(len(rects))],
                features=block,
                rects=list(rects),
            )
        )
    store = FeatureStore(dim=int(batcher.dim), classes=classes)
    save_store(store, manifest.out)
    return store


def verify_roundtrip(store_dir: str | Path) -> tuple[bool, str | None]:
    """Reload a store with the primary loader and recheck every invariant.

    Returns ``(True, None)`` or ``(False, "<ErrorType>: <first violation>")``.
    """
    try:
        store = load_store(store_dir)
        store.validate()
    except CosocError as exc:
        return False, f"{type(exc).__name__}: {exc}"
    return True, None
