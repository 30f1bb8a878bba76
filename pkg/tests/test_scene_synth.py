import numpy as np
import pytest

from dronekd.boxes import BBox
from dronekd.cocoio import CocoFormatError, export_coco, load_coco_annotations
from dronekd.synth import Dataset, SceneSpec, generate_dataset, generate_scene, write_ppm


class TestGeneration:
    def test_deterministic_in_seed_and_index(self):
        spec = SceneSpec(image_size=96, num_objects=(5, 5), size_range=(4, 12), seed=7)
        img1, anns1 = generate_scene(spec, 0)
        img2, anns2 = generate_scene(spec, 0)
        np.testing.assert_array_equal(img1, img2)
        assert anns1 == anns2
        img3, _ = generate_scene(spec, 1)
        assert not np.array_equal(img1, img3)

    def test_foreground_budget_respected(self):
        spec = SceneSpec(image_size=96, num_objects=(8, 12), size_range=(6, 14),
                         max_foreground_frac=0.05, seed=3)
        for i in range(10):
            _, anns = generate_scene(spec, i)
            total = sum(b.area for b, _ in anns)
            assert total <= 0.05 * 96 * 96

    def test_fixed_size_range_yields_fixed_boxes(self):
        spec = SceneSpec(num_objects=(3, 3), size_range=(4, 4), seed=1)
        _, anns = generate_scene(spec, 0)
        for box, _ in anns:
            assert box.width == 4.0 and box.height == 4.0

    def test_images_are_unit_range_float(self):
        spec = SceneSpec(seed=2)
        img, _ = generate_scene(spec, 0)
        assert img.dtype == np.float32
        assert img.shape == (3, 96, 96)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_dataset_counts_and_validation(self):
        spec = SceneSpec(seed=5)
        ds = generate_dataset(spec, 12, split="train")
        assert len(ds) == 12
        assert ds.foreground_fraction() <= spec.max_foreground_frac
        ds.validate()  # no exception

    def test_small_instance_regime_median_area(self):
        spec = SceneSpec(size_range=(4, 12), seed=6)
        ds = generate_dataset(spec, 30)
        areas = [b.area for anns in ds.annotations for b, _ in anns]
        assert np.median(areas) < 32 * 32

    def test_parallel_order_independence(self):
        spec = SceneSpec(seed=9)
        forward = [generate_scene(spec, i) for i in range(4)]
        backward = [generate_scene(spec, i) for i in reversed(range(4))][::-1]
        for (ia, aa), (ib, ab) in zip(forward, backward):
            np.testing.assert_array_equal(ia, ib)
            assert aa == ab

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="minimum object size"):
            SceneSpec(size_range=(1, 4))
        with pytest.raises(ValueError, match="foreground fraction"):
            SceneSpec(max_foreground_frac=0.0)

    def test_dataset_rejects_out_of_bounds_boxes(self):
        with pytest.raises(ValueError, match="outside"):
            Dataset(
                annotations=[[(BBox(90, 90, 100, 100), 0)]],
                num_classes=1,
                image_sizes=[(96, 96)],
            )

    def test_dataset_rejects_subpixel_boxes(self):
        with pytest.raises(ValueError, match="smaller than 1 px"):
            Dataset(
                annotations=[[(BBox(10, 10, 10.5, 12), 0)]],
                num_classes=1,
                image_sizes=[(96, 96)],
            )


class TestPPM:
    def test_binary_p6_layout(self, tmp_path):
        img = np.zeros((3, 2, 3), dtype=np.float32)
        img[0, 0, 0] = 1.0  # red pixel top-left
        path = tmp_path / "img.ppm"
        write_ppm(img, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n3 2\n255\n")
        pixels = raw.split(b"255\n", 1)[1]
        assert len(pixels) == 2 * 3 * 3
        assert pixels[0:3] == bytes([255, 0, 0])

    def test_deterministic_bytes(self, tmp_path):
        spec = SceneSpec(seed=4)
        img, _ = generate_scene(spec, 0)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(img, p1)
        write_ppm(img, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestCocoIO:
    def _dataset(self):
        spec = SceneSpec(seed=8, num_objects=(2, 4))
        return generate_dataset(spec, 5, split="train")

    def test_roundtrip_preserves_boxes(self):
        ds = self._dataset()
        text = export_coco(ds)
        loaded, dropped = load_coco_annotations(text)
        assert dropped == 0
        assert len(loaded) == len(ds)
        assert loaded.num_classes == ds.num_classes
        for anns_a, anns_b in zip(ds.annotations, loaded.annotations):
            assert len(anns_a) == len(anns_b)
            for (ba, ca), (bb, cb) in zip(anns_a, anns_b):
                assert ca == cb
                for u, v in zip(ba.as_array(), bb.as_array()):
                    assert u == pytest.approx(v, abs=1e-6)

    def test_simple_document_parses(self):
        text = """
        {"images": [{"id": 10, "width": 64, "height": 48}],
         "annotations": [
            {"id": 1, "image_id": 10, "category_id": 7, "bbox": [4, 5, 10, 8]},
            {"id": 2, "image_id": 10, "category_id": 9, "bbox": [20, 20, 6, 6]}],
         "categories": [{"id": 7, "name": "car"}, {"id": 9, "name": "van"}]}
        """
        ds, dropped = load_coco_annotations(text)
        assert dropped == 0
        assert ds.category_names == ["car", "van"]
        box, cls = ds.annotations[0][0]
        assert (box.x1, box.y1, box.x2, box.y2) == (4, 5, 14, 13)
        assert cls == 0  # remapped from original id 7
        assert ds.annotations[0][1][1] == 1  # original id 9 -> 1

    def test_degenerate_box_dropped_with_count(self):
        text = """
        {"images": [{"id": 0, "width": 32, "height": 32}],
         "annotations": [
            {"id": 0, "image_id": 0, "category_id": 1, "bbox": [1, 1, 0, 5]},
            {"id": 1, "image_id": 0, "category_id": 1, "bbox": [2, 2, 4, 4]}],
         "categories": [{"id": 1, "name": "x"}]}
        """
        ds, dropped = load_coco_annotations(text)
        assert dropped == 1
        assert len(ds.annotations[0]) == 1

    @pytest.mark.parametrize(
        "text,location",
        [
            ("not json", "document"),
            ('{"images": [], "annotations": []}', "categories"),
            (
                '{"images": [{"id": 0, "width": 8, "height": 8}], '
                '"annotations": [{"id": 0, "image_id": 0}], '
                '"categories": [{"id": 0}]}',
                "annotations[0]",
            ),
            (
                '{"images": [{"id": 0, "width": 8, "height": 8}], '
                '"annotations": [{"id": 0, "image_id": 5, "category_id": 0, '
                '"bbox": [0, 0, 2, 2]}], "categories": [{"id": 0}]}',
                "annotations[0]: unknown image_id",
            ),
        ],
    )
    def test_malformed_documents_name_first_error(self, text, location):
        with pytest.raises(CocoFormatError, match=location.replace("[", r"\[")):
            load_coco_annotations(text)

    def test_empty_dataset_exports_valid_document(self):
        ds = Dataset(annotations=[], num_classes=3, image_sizes=[])
        text = export_coco(ds)
        loaded, dropped = load_coco_annotations(text)
        assert len(loaded) == 0 and dropped == 0
        assert loaded.num_classes == 3

    def test_categories_table_length(self):
        ds = Dataset(annotations=[], num_classes=3, image_sizes=[])
        text = export_coco(ds)
        import json

        assert len(json.loads(text)["categories"]) == 3

    def test_export_is_deterministic(self):
        ds = self._dataset()
        assert export_coco(ds) == export_coco(ds)
