import json

from PIL import Image

from cosoc.cli import main as cosoc_main
from cosoc.features import load_store

from cosoc_export.cli import EXIT_DATA, EXIT_OK, main


def _setup_inputs(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    ids = []
    for i, color in enumerate([(255, 0, 0), (0, 255, 0), (0, 0, 255)]):
        name = f"img{i}"
        Image.new("RGB", (32, 24), color).save(images / f"{name}.png")
        ids.append(name)
    manifest = tmp_path / "images.json"
    manifest.write_text(json.dumps({"images": ids}))
    plan = tmp_path / "plan.json"
    assert cosoc_main(["crop-plan", "--images", str(manifest), "--l", "4",
                       "--seed", "3", "--out", str(plan)]) == EXIT_OK
    classes = tmp_path / "classes.json"
    classes.write_text(json.dumps({"a": ["img0", "img1"], "b": ["img2"]}))
    return images, classes, plan


class TestExportCli:
    def test_end_to_end(self, tmp_path, capsys):
        images, classes, plan = _setup_inputs(tmp_path)
        out = tmp_path / "store"
        code = main(["--images", str(images), "--classes", str(classes),
                     "--plan", str(plan), "--model", "mean-rgb", "--out", str(out)])
        assert code == EXIT_OK
        assert "wrote 12 crop features" in capsys.readouterr().out
        store = load_store(out)
        assert store.class_names() == ["a", "b"]
        assert store.dim == 3

    def test_exported_store_feeds_primary_pipeline(self, tmp_path):
        images, classes, plan = _setup_inputs(tmp_path)
        out = tmp_path / "store"
        assert main(["--images", str(images), "--classes", str(classes),
                     "--plan", str(plan), "--model", "grid-mean",
                     "--out", str(out)]) == EXIT_OK
        fg = tmp_path / "foreground.json"
        assert cosoc_main(["cos", "--store", str(out), "--clusters", "2",
                           "--topk", "2", "--out", str(fg)]) == EXIT_OK
        table = json.loads(fg.read_text())
        assert set(table["classes"]) == {"a", "b"}

    def test_missing_image_exits_2(self, tmp_path, capsys):
        images, classes, plan = _setup_inputs(tmp_path)
        (images / "img1.png").unlink()
        code = main(["--images", str(images), "--classes", str(classes),
                     "--plan", str(plan), "--out", str(tmp_path / "store")])
        assert code == EXIT_DATA
        assert "img1" in capsys.readouterr().err

    def test_unknown_model_exits_2(self, tmp_path):
        images, classes, plan = _setup_inputs(tmp_path)
        assert main(["--images", str(images), "--classes", str(classes),
                     "--plan", str(plan), "--model", "nope",
                     "--out", str(tmp_path / "store")]) == EXIT_DATA
