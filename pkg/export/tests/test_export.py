import json

import numpy as np
import pytest
from PIL import Image

from cosoc.crops import CropPlan, CropRect
from cosoc.errors import SchemaError
from cosoc.features import load_store

from cosoc_export.errors import MissingImage, ShapeMismatch
from cosoc_export.export import (
    ExportManifest,
    export_features,
    pixel_box,
    resolve_image_path,
    verify_roundtrip,
)
from cosoc_export import plugins

COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}


def _write_solid(path, color, size=(40, 30)):
    Image.new("RGB", size, color).save(path)


@pytest.fixture()
def image_world(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    ids = []
    for name, color in COLORS.items():
        _write_solid(images / f"{name}.png", color)
        ids.append(name)
    plan = CropPlan.generate(ids, count=3, seed=5)
    classes = {"warm": ["red", "yellow"], "cool": ["green", "blue"]}
    return images, classes, plan


class TestPixelBox:
    def test_half_up_rounding_beats_bankers(self):
        # 0.5 * 10 = 0.5 -> 1 and 0.25 * 10 = 2.5 -> 3 under half-up
        # (banker's rounding would give 0 and 2)
        assert pixel_box(CropRect(0.05, 0.05, 0.25, 0.25), 10, 10) == (1, 1, 3, 3)

    def test_full_image(self):
        assert pixel_box(CropRect(0.0, 0.0, 1.0, 1.0), 50, 40) == (0, 0, 50, 40)

    def test_clamped_to_image(self):
        assert pixel_box(CropRect(0.5, 0.5, 0.5, 0.5), 3, 3) == (1, 1, 2, 2)

    def test_minimum_one_pixel(self):
        assert pixel_box(CropRect(0.01, 0.01, 0.02, 0.02), 30, 30) == (0, 0, 1, 1)


class TestResolveImagePath:
    def test_exact_and_extension(self, tmp_path):
        _write_solid(tmp_path / "a.png", (1, 2, 3))
        assert resolve_image_path(tmp_path, "a.png").name == "a.png"
        assert resolve_image_path(tmp_path, "a").name == "a.png"

    def test_missing(self, tmp_path):
        with pytest.raises(MissingImage, match="ghost"):
            resolve_image_path(tmp_path, "ghost")

    def test_ambiguous(self, tmp_path):
        _write_solid(tmp_path / "a.png", (1, 2, 3))
        _write_solid(tmp_path / "a.jpg", (1, 2, 3))
        with pytest.raises(MissingImage, match="ambiguous"):
            resolve_image_path(tmp_path, "a")


class TestExportFeatures:
    def test_constant_stub_identical_features(self, tmp_path, image_world):
        images, classes, plan = image_world
        out = tmp_path / "store"
        manifest = ExportManifest(
            images_dir=str(images), classes=classes, plan=plan, model="constant",
            out=str(out),
        )
        store = export_features(manifest)
        assert store.dim == 4
        rows = np.concatenate([img.features for _, img in store.iter_images()])
        assert np.all(rows == rows[0])
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-6)
        ok, error = verify_roundtrip(out)
        assert ok and error is None

    def test_mean_pixel_stub_distinguishes_colors(self, tmp_path, image_world):
        images, classes, plan = image_world
        out = tmp_path / "store"
        export_features(
            ExportManifest(
                images_dir=str(images), classes=classes, plan=plan, model="mean-rgb",
                out=str(out),
            )
        )
        store = load_store(out)
        red = store.get_image("warm", "red").features[0]
        blue = store.get_image("cool", "blue").features[0]
        np.testing.assert_allclose(red, [1.0, 0.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(blue, [0.0, 0.0, 1.0], atol=1e-6)
        assert float(red @ blue) == pytest.approx(0.0, abs=1e-6)

    def test_rects_written_to_manifest(self, tmp_path, image_world):
        images, classes, plan = image_world
        out = tmp_path / "store"
        export_features(
            ExportManifest(
                images_dir=str(images), classes=classes, plan=plan, model="constant",
                out=str(out),
            )
        )
        store = load_store(out)
        for _, img in store.iter_images():
            assert img.rects == plan.images[img.id]

    def test_missing_image_names_id(self, tmp_path, image_world):
        images, classes, plan = image_world
        classes = {"warm": ["red", "missing-one"]}
        plan.images["missing-one"] = plan.images["red"]
        with pytest.raises(MissingImage, match="missing-one"):
            export_features(
                ExportManifest(
                    images_dir=str(images), classes=classes, plan=plan,
                    model="constant", out=str(tmp_path / "store"),
                )
            )

    def test_image_absent_from_plan(self, tmp_path, image_world):
        images, _, plan = image_world
        with pytest.raises(SchemaError, match="unplanned"):
            export_features(
                ExportManifest(
                    images_dir=str(images), classes={"c": ["unplanned"]}, plan=plan,
                    model="constant", out=str(tmp_path / "store"),
                )
            )

    def test_duplicate_image_id_rejected(self, tmp_path, image_world):
        images, _, plan = image_world
        with pytest.raises(SchemaError, match="twice"):
            export_features(
                ExportManifest(
                    images_dir=str(images),
                    classes={"a": ["red"], "b": ["red"]},
                    plan=plan,
                    model="constant",
                    out=str(tmp_path / "store"),
                )
            )

    def test_varying_output_dim_raises(self, tmp_path, image_world, monkeypatch):
        images, classes, plan = image_world
        calls = {"n": 0}

        def drifting(batch):
            calls["n"] += 1
            return np.ones((batch.shape[0], 3 if calls["n"] == 1 else 5))

        monkeypatch.setitem(plugins.BUILTIN_MODELS, "drifting", drifting)
        with pytest.raises(ShapeMismatch, match="changed"):
            export_features(
                ExportManifest(
                    images_dir=str(images), classes=classes, plan=plan,
                    model="drifting", out=str(tmp_path / "store"), batch_size=2,
                )
            )

    def test_batching_preserves_order(self, tmp_path, image_world):
        images, classes, plan = image_world
        stores = []
        for i, batch_size in enumerate((1, 7, 100)):
            out = tmp_path / f"store{i}"
            export_features(
                ExportManifest(
                    images_dir=str(images), classes=classes, plan=plan,
                    model="mean-rgb", out=str(out), batch_size=batch_size,
                )
            )
            stores.append((out / "features.f32le").read_bytes())
        assert stores[0] == stores[1] == stores[2]


class TestVerifyRoundtrip:
    def _export(self, tmp_path, image_world):
        images, classes, plan = image_world
        out = tmp_path / "store"
        export_features(
            ExportManifest(
                images_dir=str(images), classes=classes, plan=plan, model="constant",
                out=str(out),
            )
        )
        return out

    def test_fresh_export_true(self, tmp_path, image_world):
        out = self._export(tmp_path, image_world)
        assert verify_roundtrip(out) == (True, None)

    def test_truncated_payload(self, tmp_path, image_world):
        out = self._export(tmp_path, image_world)
        payload = out / "features.f32le"
        payload.write_bytes(payload.read_bytes()[:-8])
        ok, error = verify_roundtrip(out)
        assert not ok and error.startswith("CorruptPayload")

    def test_duplicate_crop_id(self, tmp_path, image_world):
        out = self._export(tmp_path, image_world)
        manifest_path = out / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        crops = manifest["classes"][0]["images"][0]["crops"]
        crops[1]["id"] = crops[0]["id"]
        manifest_path.write_text(json.dumps(manifest))
        ok, error = verify_roundtrip(out)
        assert not ok and error.startswith("SchemaError")
