import json

import numpy as np
import pytest

from ovps.embedstore import load_region_file, load_text_bank

from ovpe_extract.encoders import ColorSignatureEncoder
from ovpe_extract.jobs import (
    ExtractionConfigError,
    ExtractionJob,
    extract_regions,
    extract_text,
)

ENCODER = ColorSignatureEncoder(dim=32)


def tiny_coco(tmp_path, annotations):
    from PIL import Image

    image_dir = tmp_path / "imgs"
    image_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(3)
    Image.fromarray(rng.integers(0, 255, (48, 48, 3)).astype(np.uint8)).save(
        image_dir / "one.png"
    )
    doc = {
        "images": [{"id": 1, "width": 48, "height": 48, "file_name": "one.png"}],
        "annotations": annotations,
        "categories": [{"id": 1, "name": "thing_00"}],
    }
    path = tmp_path / "coco.json"
    path.write_text(json.dumps(doc))
    return path, image_dir


class TestExtractRegions:
    def test_round_trips_through_the_primary_loader(self, coco_world, tmp_path):
        out = tmp_path / "regions.ovpe"
        job = ExtractionJob(
            coco_json=str(coco_world["coco_json"]),
            image_dir=str(coco_world["image_dir"]),
            output_path=str(out),
        )
        manifest = extract_regions(job, ENCODER)
        regions = load_region_file(out)
        assert len(regions) == coco_world["n_annotations"] == manifest["records"]
        np.testing.assert_allclose(
            np.linalg.norm(regions.vectors.astype(np.float64), axis=1), 1.0, atol=1e-4
        )
        assert manifest["skipped_images"] == []

    def test_zero_boxes_gives_header_only_file(self, tmp_path):
        coco, imgs = tiny_coco(tmp_path, [])
        out = tmp_path / "empty.ovpe"
        extract_regions(ExtractionJob(str(coco), str(imgs), str(out)), ENCODER)
        assert len(load_region_file(out)) == 0

    def test_duplicate_box_gives_identical_vectors(self, tmp_path):
        anns = [
            {"id": 1, "image_id": 1, "bbox": [4, 4, 10, 10], "category_id": 1},
            {"id": 2, "image_id": 1, "bbox": [4, 4, 10, 10], "category_id": 1},
        ]
        coco, imgs = tiny_coco(tmp_path, anns)
        out = tmp_path / "dup.ovpe"
        extract_regions(ExtractionJob(str(coco), str(imgs), str(out)), ENCODER)
        regions = load_region_file(out)
        np.testing.assert_array_equal(regions.vectors[0], regions.vectors[1])

    def test_unreadable_image_skipped_and_recorded(self, tmp_path):
        anns = [{"id": 1, "image_id": 1, "bbox": [4, 4, 10, 10], "category_id": 1}]
        coco, imgs = tiny_coco(tmp_path, anns)
        (imgs / "one.png").write_bytes(b"not a png")
        out = tmp_path / "skip.ovpe"
        with pytest.warns(UserWarning, match="unreadable"):
            manifest = extract_regions(ExtractionJob(str(coco), str(imgs), str(out)), ENCODER)
        assert manifest["skipped_images"] == ["one.png"]
        assert len(load_region_file(out)) == 0

    def test_proposals_source_copies_scores(self, tmp_path):
        coco, imgs = tiny_coco(tmp_path, [])
        proposals = tmp_path / "props.json"
        proposals.write_text(
            json.dumps(
                [
                    {"image_id": 1, "bbox": [0, 0, 8, 8], "score": 0.75},
                    {"image_id": 1, "bbox": [8, 8, 20, 20], "score": 0.25},
                ]
            )
        )
        out = tmp_path / "props.ovpe"
        job = ExtractionJob(
            str(coco), str(imgs), str(out), boxes_source="proposals",
            proposals_path=str(proposals),
        )
        extract_regions(job, ENCODER)
        regions = load_region_file(out)
        np.testing.assert_allclose(regions.objectness, [0.75, 0.25])

    def test_boxes_clipped_to_image_bounds(self, tmp_path):
        anns = [{"id": 1, "image_id": 1, "bbox": [40, 40, 20, 20], "category_id": 1}]
        coco, imgs = tiny_coco(tmp_path, anns)
        out = tmp_path / "clip.ovpe"
        extract_regions(ExtractionJob(str(coco), str(imgs), str(out)), ENCODER)
        regions = load_region_file(out)
        np.testing.assert_allclose(regions.boxes[0], [40, 40, 48, 48])


class TestExtractText:
    def test_single_class_single_template(self, tmp_path):
        out = tmp_path / "bank.ovpe"
        extract_text(["thing_00"], ["a photo of {category}"], ENCODER, out)
        bank = load_text_bank(out)
        assert bank.class_names == ["thing_00"]
        assert bank.vectors.shape == (2, 32)
        np.testing.assert_allclose(
            np.linalg.norm(bank.vectors.astype(np.float64), axis=1), 1.0, atol=1e-4
        )

    def test_template_order_does_not_matter(self, tmp_path):
        templates = ["a photo of {category}", "an origami {category}", "a huge {category}"]
        a, b = tmp_path / "a.ovpe", tmp_path / "b.ovpe"
        extract_text(["x", "y"], templates, ENCODER, a)
        extract_text(["x", "y"], templates[::-1], ENCODER, b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_template_set_is_config_error(self, tmp_path):
        with pytest.raises(ExtractionConfigError):
            extract_text(["x"], [], ENCODER, tmp_path / "bank.ovpe")

    def test_empty_class_list_is_config_error(self, tmp_path):
        with pytest.raises(ExtractionConfigError):
            extract_text([], ["a photo of {category}"], ENCODER, tmp_path / "bank.ovpe")

    def test_duplicate_names_deduplicated_order_stably(self, tmp_path):
        out = tmp_path / "bank.ovpe"
        extract_text(["b", "a", "b"], ["a photo of {category}"], ENCODER, out)
        assert load_text_bank(out).class_names == ["b", "a"]

    def test_split_spec_respected(self, tmp_path, coco_world):
        split = json.loads(coco_world["split_spec"].read_text())
        out = tmp_path / "bank.ovpe"
        extract_text(sorted(split), ["a photo of {category}"], ENCODER, out, split)
        bank = load_text_bank(out)
        assert bank.class_split == [split[n] for n in bank.class_names]
