"""Exporter acceptance: stub-model export validated by the primary loader,
depth-first ordering, and hand-computed pixel boxes."""

import numpy as np
from PIL import Image

from cosoc.crops import CropPlan, CropRect
from cosoc.features import load_store

from cosoc_export.export import ExportManifest, export_features, pixel_box, verify_roundtrip


def _report(name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    assert passed, f"{name}: {detail}"


# (rect, image width, image height) -> (left, top, box w, box h), half-up
HAND_BOXES = [
    (CropRect(0.1, 0.2, 0.5, 0.25), 84, 84, (8, 17, 42, 21)),
    (CropRect(0.05, 0.05, 0.25, 0.25), 10, 10, (1, 1, 3, 3)),  # 0.5 -> 1, 2.5 -> 3
    (CropRect(0.0, 0.0, 1.0, 1.0), 50, 40, (0, 0, 50, 40)),
    (CropRect(0.5, 0.5, 0.5, 0.5), 3, 3, (1, 1, 2, 2)),  # clamped into the image
    (CropRect(0.9, 0.0, 0.1, 0.1), 7, 7, (6, 0, 1, 1)),
    (CropRect(0.2, 0.4, 0.6, 0.2), 25, 15, (5, 6, 15, 3)),
    (CropRect(0.01, 0.01, 0.02, 0.02), 30, 30, (0, 0, 1, 1)),  # floor to >= 1 px
    (CropRect(0.12, 0.34, 0.56, 0.33), 84, 84, (10, 29, 47, 28)),
    (CropRect(0.25, 0.25, 0.5, 0.5), 6, 6, (2, 2, 3, 3)),
    (CropRect(0.375, 0.125, 0.25, 0.75), 20, 8, (8, 1, 5, 6)),
]


class TestExporterAcceptance:
    def test_pixel_rounding_against_hand_boxes(self):
        mismatches = [
            (rect, got, want)
            for rect, w, h, want in HAND_BOXES
            if (got := pixel_box(rect, w, h)) != want
        ]
        _report(
            "Exporter: crop-pixel rounding matches 10 hand-computed boxes",
            not mismatches,
            f"{len(HAND_BOXES) - len(mismatches)}/{len(HAND_BOXES)} agree",
        )

    def test_grid_export_validates_and_preserves_order(self, tmp_path):
        # image grid: 2 classes x 3 images, one solid color per image
        images_dir = tmp_path / "images"
        images_dir.mkdir()
        colors = {
            "c0_i0": (250, 10, 10),
            "c0_i1": (10, 250, 10),
            "c0_i2": (10, 10, 250),
            "c1_i0": (250, 250, 10),
            "c1_i1": (250, 10, 250),
            "c1_i2": (10, 250, 250),
        }
        for name, color in colors.items():
            Image.new("RGB", (48, 36), color).save(images_dir / f"{name}.png")
        classes = {
            "class0": ["c0_i0", "c0_i1", "c0_i2"],
            "class1": ["c1_i0", "c1_i1", "c1_i2"],
        }
        plan = CropPlan.generate(colors.keys(), count=4, seed=11)
        out = tmp_path / "store"
        export_features(
            ExportManifest(
                images_dir=str(images_dir), classes=classes, plan=plan,
                model="mean-rgb", out=str(out), batch_size=5,
            )
        )

        store = load_store(out)  # primary loader validates all invariants
        ok, error = verify_roundtrip(out)
        _report("Exporter: stub-model store passes primary-loader validation", ok, str(error))

        # depth-first order: payload rows must follow classes.json traversal
        payload = np.frombuffer((out / "features.f32le").read_bytes(), dtype="<f4")
        payload = payload.reshape(-1, store.dim)
        expected_order = [
            name for cls in ("class0", "class1") for name in classes[cls] for _ in range(4)
        ]
        ordered_ok = True
        for row, name in zip(payload, expected_order):
            color = np.array(colors[name], dtype=np.float64)
            expected = color / np.linalg.norm(color)
            if not np.allclose(row, expected, atol=1e-4):
                ordered_ok = False
        _report(
            "Exporter: payload rows follow manifest depth-first order",
            ordered_ok and len(payload) == len(expected_order),
            f"{len(payload)} rows",
        )
