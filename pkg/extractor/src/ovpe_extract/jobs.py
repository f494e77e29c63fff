"""Extraction jobs: dump region and text embeddings into OVPE files.

Regions come either from ground-truth boxes of a COCO-style annotation file
(objectness 1.0) or from an external proposal file (objectness copied).
Unreadable images are skipped with a warning and recorded in the job
manifest. Text banks average one embedding per prompt template per class,
renormalize, and append a single background vector, writing the same
bank-plus-JSON-sidecar layout the downstream toolkit loads.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .writer import StreamingOvpeWriter

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES = ("a photo of {category}",)
BACKGROUND_NAME = "background"


class ExtractionConfigError(ValueError):
    """Invalid job configuration."""


@dataclass
class ExtractionJob:
    """One extraction run over a COCO-style dataset directory."""

    coco_json: str
    image_dir: str
    output_path: str
    boxes_source: str = "ground-truth"  # or "proposals"
    proposals_path: str | None = None
    batch_size: int = 64
    templates: Sequence[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))


def _clip_box(box, width, height):
    x, y, w, h = box
    x1 = min(max(x, 0.0), width)
    y1 = min(max(y, 0.0), height)
    x2 = min(max(x + w, 0.0), width)
    y2 = min(max(y + h, 0.0), height)
    return (x1, y1, x2, y2)


def _boxes_by_image(job: ExtractionJob, doc: dict) -> dict[int, list[tuple]]:
    """image_id -> [(corner box, objectness)], clipped to image bounds."""
    bounds = {im["id"]: (im["width"], im["height"]) for im in doc["images"]}
    out: dict[int, list[tuple]] = {}
    if job.boxes_source == "ground-truth":
        source = [(a["image_id"], a["bbox"], 1.0) for a in doc["annotations"]]
    elif job.boxes_source == "proposals":
        if not job.proposals_path:
            raise ExtractionConfigError("boxes_source='proposals' requires proposals_path")
        proposals = json.loads(Path(job.proposals_path).read_text())
        source = [(p["image_id"], p["bbox"], float(p.get("score", 1.0))) for p in proposals]
    else:
        raise ExtractionConfigError(f"unknown boxes_source {job.boxes_source!r}")
    for image_id, bbox, objectness in source:
        if image_id not in bounds:
            raise ExtractionConfigError(f"box references unknown image {image_id}")
        w, h = bounds[image_id]
        out.setdefault(image_id, []).append((_clip_box(bbox, w, h), objectness))
    return out


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def extract_regions(job: ExtractionJob, encoder) -> dict:
    """Encode one region embedding per box and stream them to an OVPE file.

    Returns the manifest (also written next to the output), which records
    the encoder identifier, record counts, skipped images, and the output
    checksum.
    """
    doc = json.loads(Path(job.coco_json).read_text())
    boxes_by_image = _boxes_by_image(job, doc)
    skipped: list[str] = []

    with StreamingOvpeWriter(job.output_path, encoder.dim) as writer:
        for image_info in doc["images"]:
            image_id = image_info["id"]
            entries = boxes_by_image.get(image_id, [])
            if not entries:
                continue
            path = Path(job.image_dir) / image_info["file_name"]
            try:
                with Image.open(path) as img:
                    pixels = np.asarray(img.convert("RGB"))
            except (OSError, FileNotFoundError) as exc:
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                skipped.append(image_info["file_name"])
                continue
            for start in range(0, len(entries), job.batch_size):
                chunk = entries[start : start + job.batch_size]
                boxes = np.array([c[0] for c in chunk], dtype=np.float64)
                vectors = encoder.encode_regions(pixels, boxes)
                writer.append_batch(
                    np.full(len(chunk), image_id, dtype=np.uint64),
                    boxes,
                    np.array([c[1] for c in chunk], dtype=np.float32),
                    vectors,
                )
        total = writer.count

    manifest = {
        "encoder": encoder.identifier,
        "boxes_source": job.boxes_source,
        "records": total,
        "skipped_images": skipped,
        "outputs": {Path(job.output_path).name: _sha256(job.output_path)},
    }
    manifest_path = Path(str(job.output_path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def extract_text(
    class_names: Sequence[str],
    templates: Sequence[str],
    encoder,
    output_path: str | Path,
    class_split: Mapping[str, str] | None = None,
) -> dict:
    """Write a text bank: per class, the renormalized mean over one embedding
    per template, plus a trailing background vector.

    class_split maps names to "base"/"novel"; unmapped names default to
    "base". Duplicate names are dropped order-stably.
    """
    if not class_names:
        raise ExtractionConfigError("class name list is empty")
    if not templates:
        raise ExtractionConfigError("template set is empty")
    names: list[str] = []
    for name in class_names:
        if name not in names:
            names.append(name)

    def mean_embedding(name: str) -> np.ndarray:
        stacked = np.stack([encoder.encode_text(name, t) for t in templates]).astype(np.float64)
        mean = stacked.mean(axis=0)
        return (mean / np.linalg.norm(mean)).astype(np.float32)

    vectors = np.stack([mean_embedding(n) for n in names] + [mean_embedding(BACKGROUND_NAME)])
    split = [(class_split or {}).get(n, "base") for n in names]

    n = len(names) + 1
    with StreamingOvpeWriter(output_path, encoder.dim) as writer:
        writer.append_batch(
            np.arange(n, dtype=np.uint64),
            np.zeros((n, 4), dtype=np.float32),
            np.zeros(n, dtype=np.float32),
            vectors,
        )
    sidecar = {"class_names": names, "class_split": split}
    Path(str(output_path) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n"
    )
    manifest = {
        "encoder": encoder.identifier,
        "templates": list(templates),
        "classes": len(names),
        "outputs": {
            Path(output_path).name: _sha256(output_path),
            Path(output_path).name + ".json": _sha256(str(output_path) + ".json"),
        },
    }
    manifest_path = Path(str(output_path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
