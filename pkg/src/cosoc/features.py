"""Vector primitives and the on-disk feature store.

A store is a directory holding ``manifest.json`` (format_version, dim, and the
class/image/crop tree) next to ``features.f32le``, a row-major little-endian
float32 payload whose rows follow the manifest depth-first order. Vectors may
be stored unnormalized; algorithmic entry points normalize on the way in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .crops import CropRect
from .errors import CorruptPayload, DimMismatch, NonFinite, SchemaError, ZeroVector

NORM_TOL = 1e-6
_ZERO_NORM = 1e-12

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "features.f32le"


def l2_normalize(v: np.ndarray | Sequence[float]) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises:
        NonFinite: any entry is NaN or infinite.
        ZeroVector: the norm is below 1e-12.
    """
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("vector contains NaN or Inf")
    norm = float(np.linalg.norm(arr))
    if norm < _ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return arr / norm


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """L2-normalize each row of a 2-d array."""
    arr = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix contains NaN or Inf")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms < _ZERO_NORM):
        raise ZeroVector("cannot normalize a zero row")
    return arr / norms


def cosine_sim(a: np.ndarray | Sequence[float], b: np.ndarray | Sequence[float]) -> float:
    """Cosine similarity of two vectors, clipped into [-1, 1]."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise DimMismatch(f"shapes {av.shape} and {bv.shape} differ")
    return float(np.clip(np.dot(l2_normalize(av), l2_normalize(bv)), -1.0, 1.0))


def pairwise_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of cosine similarities: entry (i, j) = cos(a[i], b[j])."""
    am = np.atleast_2d(np.asarray(a, dtype=np.float64))
    bm = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if am.shape[1] != bm.shape[1]:
        raise DimMismatch(f"row dims {am.shape[1]} and {bm.shape[1]} differ")
    return np.clip(normalize_rows(am) @ normalize_rows(bm).T, -1.0, 1.0)


@dataclass
class StoreImage:
    """One image: crop ids, optional crop rects, and a (n_crops, dim) block."""

    id: str
    crop_ids: list[str]
    features: np.ndarray
    rects: list[CropRect | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.rects:
            self.rects = [None] * len(self.crop_ids)


@dataclass
class StoreClass:
    name: str
    images: list[StoreImage]


@dataclass
class FeatureStore:
    """In-memory feature store; treated as immutable after construction."""

    dim: int
    classes: list[StoreClass]

    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def get_class(self, name: str) -> StoreClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def get_image(self, class_name: str, image_id: str) -> StoreImage:
        for img in self.get_class(class_name).images:
            if img.id == image_id:
                return img
        raise KeyError((class_name, image_id))

    def iter_images(self) -> Iterator[tuple[str, StoreImage]]:
        for cls in self.classes:
            for img in cls.images:
                yield cls.name, img

    def total_crops(self) -> int:
        return sum(len(img.crop_ids) for _, img in self.iter_images())

    def validate(self) -> None:
        """Check every store invariant; raises SchemaError/DimMismatch/CorruptPayload."""
        if self.dim <= 0:
            raise SchemaError("dim must be positive")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate class name")
        for cls in self.classes:
            ids = [img.id for img in cls.images]
            if len(set(ids)) != len(ids):
                raise SchemaError(f"duplicate image id in class {cls.name!r}")
            for img in cls.images:
                if len(set(img.crop_ids)) != len(img.crop_ids):
                    raise SchemaError(f"duplicate crop id in image {img.id!r}")
                if img.features.shape != (len(img.crop_ids), self.dim):
                    raise DimMismatch(
                        f"image {img.id!r}: feature block {img.features.shape} "
                        f"!= ({len(img.crop_ids)}, {self.dim})"
                    )
                if len(img.rects) != len(img.crop_ids):
                    raise SchemaError(f"image {img.id!r}: rects/crops length mismatch")
                if not np.all(np.isfinite(img.features)):
                    raise CorruptPayload(f"image {img.id!r}: non-finite feature values")


def save_store(store: FeatureStore, path: str | Path) -> None:
    """Write ``manifest.json`` + ``features.f32le`` (float32, little-endian)."""
    store.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "dim": store.dim,
        "classes": [
            {
                "name": cls.name,
                "images": [
                    {
                        "id": img.id,
                        "crops": [
                            {"id": cid} if rect is None else {"id": cid, "rect": rect.to_json()}
                            for cid, rect in zip(img.crop_ids, img.rects)
                        ],
                    }
                    for img in cls.images
                ],
            }
            for cls in store.classes
        ],
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    blocks = [img.features for _, img in store.iter_images()]
    payload = (
        np.concatenate(blocks, axis=0) if blocks else np.empty((0, store.dim), dtype=np.float32)
    )
    with open(root / PAYLOAD_NAME, "wb") as fh:
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_store(path: str | Path) -> FeatureStore:
    """Load and validate a store directory.

    Raises:
        SchemaError: malformed manifest or duplicate ids.
        CorruptPayload: payload byte count != dim * crop count * 4, or NaN/Inf rows.
    """
    root = Path(path)
    try:
        with open(root / MANIFEST_NAME, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format_version") != 1:
        raise SchemaError("manifest missing format_version=1")
    dim = manifest.get("dim")
    if not isinstance(dim, int) or dim <= 0:
        raise SchemaError("manifest dim must be a positive integer")
    classes_spec = manifest.get("classes")
    if not isinstance(classes_spec, list):
        raise SchemaError("manifest classes must be a list")

    raw = (root / PAYLOAD_NAME).read_bytes()
    total_crops = sum(
        len(img.get("crops", [])) for cls in classes_spec for img in cls.get("images", [])
    )
    expected = total_crops * dim * 4
    if len(raw) != expected:
        raise CorruptPayload(f"payload has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4").reshape(total_crops, dim) if total_crops else np.empty(
        (0, dim), dtype=np.float32
    )

    classes: list[StoreClass] = []
    cursor = 0
    for cls in classes_spec:
        name = cls.get("name")
        if not isinstance(name, str):
            raise SchemaError("class name must be a string")
        images: list[StoreImage] = []
        for img in cls.get("images", []):
            image_id = img.get("id")
            if not isinstance(image_id, str):
                raise SchemaError(f"image id must be a string (class {name!r})")
            crop_ids: list[str] = []
            rects: list[CropRect | None] = []
            for crop in img.get("crops", []):
                cid = crop.get("id")
                if not isinstance(cid, str):
                    raise SchemaError(f"crop id must be a string (image {image_id!r})")
                crop_ids.append(cid)
                rect_spec = crop.get("rect")
                rects.append(None if rect_spec is None else CropRect.from_json(rect_spec))
            block = flat[cursor : cursor + len(crop_ids)].copy()
            cursor += len(crop_ids)
            images.append(StoreImage(id=image_id, crop_ids=crop_ids, features=block, rects=rects))
        classes.append(StoreClass(name=name, images=images))

    store = FeatureStore(dim=dim, classes=classes)
    store.validate()
    return store
