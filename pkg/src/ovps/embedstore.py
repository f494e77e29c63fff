"""Embedding containers, annotation model, and the synthetic world generator.

The OVPE binary container holds fixed-size records of
(image_id u64, corner box 4xf32, objectness f32, vector dim x f32),
little-endian, behind a 20-byte header (magic "OVPE", u32 version, u32 dim,
u64 record count). Region embedding files and text banks share the layout;
a text bank repurposes the image_id field as the class index and carries
its class names and base/novel split in a JSON sidecar.

All vectors are L2-normalized at load (not at write); rows already within
1e-5 of unit norm are left bit-identical so that save -> load -> save is
stable at the byte level.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, CorruptionError, DataError, FormatError
from .geometry import Box, Proposal, pairwise_iou
from .rng import WORLD_STREAM, rng_stream

MAGIC = b"OVPE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

PROVENANCE_GT = "ground_truth"
PROVENANCE_PSEUDO = "pseudo"
SPLIT_BASE = "base"
SPLIT_NOVEL = "novel"

NORM_TOLERANCE = 1e-5


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("image_id", "<u8"),
            ("box", "<f4", (4,)),
            ("objectness", "<f4"),
            ("vector", "<f4", (dim,)),
        ]
    )


def normalize_rows(vectors: np.ndarray, tol: float = NORM_TOLERANCE) -> np.ndarray:
    """L2-normalize rows, leaving rows already within tol of unit norm intact.

    The tolerance skip makes normalization idempotent on float32 storage:
    re-normalizing an already-normalized row would otherwise shift its low
    bits and break byte-level round-trips.
    """
    v = np.array(vectors, dtype=np.float32, copy=True)
    if v.size == 0:
        return v
    norms = np.linalg.norm(v.astype(np.float64), axis=1)
    off = (np.abs(norms - 1.0) > tol) & (norms > 0)
    if np.any(off):
        v[off] = (v[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return v


def write_ovpe(
    path: str | Path,
    image_ids: np.ndarray,
    boxes: np.ndarray,
    objectness: np.ndarray,
    vectors: np.ndarray,
) -> None:
    """Write one OVPE container. Vectors are written as-is (no normalization)."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise DataError("vectors must be a 2-d array")
    n, dim = vectors.shape
    records = np.zeros(n, dtype=_record_dtype(dim))
    records["image_id"] = np.asarray(image_ids, dtype=np.uint64)
    records["box"] = np.asarray(boxes, dtype=np.float32).reshape(n, 4)
    records["objectness"] = np.asarray(objectness, dtype=np.float32)
    records["vector"] = vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, n))
        fh.write(records.tobytes())


def read_ovpe(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read one OVPE container into (image_ids, boxes, objectness, vectors)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the OVPE header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise FormatError(f"{path}: zero embedding dimension")
    dtype = _record_dtype(dim)
    payload = data[_HEADER.size :]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    records = np.frombuffer(payload, dtype=dtype)
    return (
        records["image_id"].astype(np.int64),
        np.array(records["box"], dtype=np.float32).reshape(count, 4),
        np.array(records["objectness"], dtype=np.float32),
        np.array(records["vector"], dtype=np.float32).reshape(count, dim),
    )


@dataclass
class TextBank:
    """Per-class text embeddings plus one background vector (last row).

    class_names and class_split cover the real classes only; vectors has
    exactly one extra trailing row for background.
    """

    class_names: list[str]
    class_split: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if len(self.class_names) != len(self.class_split):
            raise DataError("class_names and class_split lengths differ")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.class_names) + 1:
            raise DataError("vectors must have one row per class plus one background row")
        bad = [s for s in self.class_split if s not in (SPLIT_BASE, SPLIT_NOVEL)]
        if bad:
            raise DataError(f"invalid split values: {bad}")
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("duplicate class names in bank")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_index(self) -> int:
        return len(self.class_names)

    def novel_mask(self) -> np.ndarray:
        """(C,) boolean mask of novel classes."""
        return np.array([s == SPLIT_NOVEL for s in self.class_split], dtype=bool)

    def index_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DataError(f"class name not in bank: {name!r}") from None


def save_text_bank(bank: TextBank, path: str | Path) -> None:
    """Write a bank as an OVPE container plus a <path>.json names sidecar."""
    n = bank.num_classes + 1
    write_ovpe(
        path,
        image_ids=np.arange(n, dtype=np.uint64),
        boxes=np.zeros((n, 4), dtype=np.float32),
        objectness=np.zeros(n, dtype=np.float32),
        vectors=bank.vectors,
    )
    sidecar = {"class_names": bank.class_names, "class_split": bank.class_split}
    Path(_sidecar_path(path)).write_text(
        json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_text_bank(path: str | Path) -> TextBank:
    """Load a bank; vectors are L2-normalized (see normalize_rows)."""
    ids, _, _, vectors = read_ovpe(path)
    sidecar_path = Path(_sidecar_path(path))
    if not sidecar_path.exists():
        raise FormatError(f"missing text bank sidecar: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    names = list(meta["class_names"])
    split = list(meta["class_split"])
    if len(ids) != len(names) + 1:
        raise CorruptionError(
            f"{path}: {len(ids)} records for {len(names)} classes (+1 background expected)"
        )
    if not np.array_equal(ids, np.arange(len(ids))):
        raise CorruptionError(f"{path}: class indices out of order")
    return TextBank(names, split, normalize_rows(vectors))


def _sidecar_path(path: str | Path) -> str:
    return str(path) + ".json"


def derive_text_bank(
    bank: TextBank,
    base_names: Sequence[str],
    novel_names: Sequence[str],
) -> TextBank:
    """Build a vocabulary bank from named rows of a master bank.

    Duplicate names are dropped order-stably; names must resolve to rows of
    the master bank (there is no text encoder at this layer). The background
    vector is carried over.
    """
    seen: set[str] = set()
    names: list[str] = []
    split: list[str] = []
    for name, s in [(n, SPLIT_BASE) for n in base_names] + [(n, SPLIT_NOVEL) for n in novel_names]:
        if name in seen:
            continue
        seen.add(name)
        names.append(name)
        split.append(s)
    if not names:
        raise ConfigurationError("derived vocabulary is empty")
    try:
        rows = [bank.index_of(n) for n in names]
    except DataError as exc:
        raise ConfigurationError(str(exc)) from None
    vectors = np.concatenate(
        [bank.vectors[rows], bank.vectors[bank.background_index : bank.background_index + 1]]
    )
    return TextBank(names, split, vectors)


@dataclass
class RegionEmbeddingFile:
    """Region embedding records: one (image_id, box, objectness, vector) each."""

    image_ids: np.ndarray
    boxes: np.ndarray
    objectness: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(len(self.image_ids), 4)
        self.objectness = np.asarray(self.objectness, dtype=np.float32)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.image_ids):
            raise DataError("one vector per record required")
        if self.objectness.shape[0] != len(self.image_ids):
            raise DataError("one objectness value per record required")
        self._by_image: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return int(self.image_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def rows_for_image(self, image_id: int) -> np.ndarray:
        """Record row indices belonging to one image."""
        if self._by_image is None:
            by_image: dict[int, list[int]] = {}
            for row, img in enumerate(self.image_ids.tolist()):
                by_image.setdefault(img, []).append(row)
            self._by_image = {k: np.array(v, dtype=np.int64) for k, v in by_image.items()}
        return self._by_image.get(int(image_id), np.zeros(0, dtype=np.int64))

    def record_lookup(self) -> dict[tuple[int, float, float, float, float], int]:
        """Map (image_id, float32 box corners) -> record row, for exact-box joins."""
        out: dict[tuple[int, float, float, float, float], int] = {}
        for row in range(len(self)):
            key = (int(self.image_ids[row]),) + tuple(float(c) for c in self.boxes[row])
            out[key] = row
        return out

    def proposals_for_image(self, image_id: int) -> list[Proposal]:
        """The image's records as proposals; embedding_index is the record row."""
        return [
            Proposal(
                box=Box(*(float(c) for c in self.boxes[row])),
                objectness=float(self.objectness[row]),
                embedding_index=int(row),
            )
            for row in self.rows_for_image(image_id)
        ]


def save_region_file(regions: RegionEmbeddingFile, path: str | Path) -> None:
    write_ovpe(path, regions.image_ids, regions.boxes, regions.objectness, regions.vectors)


def load_region_file(path: str | Path) -> RegionEmbeddingFile:
    ids, boxes, objectness, vectors = read_ovpe(path)
    return RegionEmbeddingFile(ids, boxes, objectness, normalize_rows(vectors))


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    box: Box
    class_id: int
    provenance: str = PROVENANCE_GT
    score: float | None = None


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    split: str


@dataclass
class Dataset:
    """Images, annotations and categories with a base/novel split.

    Novel ground truth is retained but withheld from the training view;
    the eval view carries all ground truth and no pseudo annotations.
    """

    images: list[ImageInfo]
    annotations: list[Annotation]
    categories: list[Category]
    _split_by_id: dict[int, str] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._split_by_id = {c.id: c.split for c in self.categories}
        if len(self._split_by_id) != len(self.categories):
            raise DataError("duplicate category ids")
        for ann in self.annotations:
            if ann.class_id not in self._split_by_id:
                raise DataError(f"annotation references unknown category {ann.class_id}")

    def split_of(self, class_id: int) -> str:
        return self._split_by_id[class_id]

    def category_by_id(self, class_id: int) -> Category:
        for c in self.categories:
            if c.id == class_id:
                return c
        raise DataError(f"unknown category {class_id}")

    def category_id_by_name(self) -> dict[str, int]:
        return {c.name: c.id for c in self.categories}

    def train_annotations(self) -> list[Annotation]:
        """Base ground truth plus any appended pseudo annotations."""
        return [
            a
            for a in self.annotations
            if a.provenance == PROVENANCE_PSEUDO or self.split_of(a.class_id) == SPLIT_BASE
        ]

    def eval_annotations(self) -> list[Annotation]:
        """All ground-truth annotations, including withheld novel ones."""
        return [a for a in self.annotations if a.provenance == PROVENANCE_GT]

    def with_annotations(self, annotations: list[Annotation]) -> "Dataset":
        return Dataset(list(self.images), annotations, list(self.categories))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as COCO-style JSON (xywh boxes, extra provenance/score)."""
    doc = {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height} for im in dataset.images
        ],
        "annotations": [
            {
                "id": i + 1,
                "image_id": a.image_id,
                "bbox": list(a.box.to_xywh()),
                "category_id": a.class_id,
                "provenance": a.provenance,
                **({"score": a.score} if a.score is not None else {}),
            }
            for i, a in enumerate(dataset.annotations)
        ],
        "categories": [
            {"id": c.id, "name": c.name, "split": c.split} for c in dataset.categories
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    images = [ImageInfo(im["id"], im["width"], im["height"]) for im in doc["images"]]
    categories = [Category(c["id"], c["name"], c["split"]) for c in doc["categories"]]
    annotations = [
        Annotation(
            image_id=a["image_id"],
            box=Box.from_xywh(*a["bbox"]),
            class_id=a["category_id"],
            provenance=a.get("provenance", PROVENANCE_GT),
            score=a.get("score"),
        )
        for a in doc["annotations"]
    ]
    return Dataset(images, annotations, categories)


def ingest_coco(
    annotations_json_path: str | Path,
    split_spec: Mapping[str, str] | str | Path,
) -> Dataset:
    """Ingest a COCO-style annotation file under a base/novel split.

    split_spec maps every category name to "base" or "novel" (a mapping or a
    path to a JSON file of one). Boxes are converted from xywh to corner form
    and clipped to their image bounds. Novel ground truth stays in the
    dataset but is excluded from the training view.
    """
    if not isinstance(split_spec, Mapping):
        split_spec = json.loads(Path(split_spec).read_text())
    doc = json.loads(Path(annotations_json_path).read_text())

    names = {c["name"] for c in doc["categories"]}
    unknown = sorted(set(split_spec) - names)
    if unknown:
        raise ConfigurationError(f"split_spec names not in dataset: {unknown}")
    missing = sorted(names - set(split_spec))
    if missing:
        raise ConfigurationError(f"categories without a split assignment: {missing}")
    bad = sorted({v for v in split_spec.values() if v not in (SPLIT_BASE, SPLIT_NOVEL)})
    if bad:
        raise ConfigurationError(f"invalid split values: {bad}")

    images = [ImageInfo(im["id"], im["width"], im["height"]) for im in doc["images"]]
    bounds = {im.id: (im.width, im.height) for im in images}
    categories = [
        Category(c["id"], c["name"], split_spec[c["name"]]) for c in doc["categories"]
    ]
    annotations = []
    for a in doc["annotations"]:
        if a["image_id"] not in bounds:
            raise DataError(f"annotation references unknown image {a['image_id']}")
        w, h = bounds[a["image_id"]]
        box = Box.from_xywh(*a["bbox"]).clipped(w, h)
        annotations.append(Annotation(a["image_id"], box, a["category_id"]))
    return Dataset(images, annotations, categories)


def _orthonormal_vectors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """(n, dim) float32 rows of an orthonormal frame, sign-fixed for stability."""
    gauss = rng.standard_normal((dim, n))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray((q * signs).T, dtype=np.float32)


def generate_synthetic_world(
    n_base: int,
    n_novel: int,
    dim: int,
    n_images: int,
    noise_sigma: float,
    seed: int,
    n_distractors: int = 0,
    image_width: int = 640,
    image_height: int = 480,
    max_objects: int = 4,
) -> tuple[TextBank, RegionEmbeddingFile, Dataset]:
    """Generate a deterministic embedding world for desk-scale experiments.

    Class text vectors are mutually orthogonal unit vectors. Every image
    holds 1..max_objects objects of random classes; each object contributes
    a region record exactly at its ground-truth box plus one jittered copy,
    and each image carries a few background-like noise proposals. Region
    vectors are the class (or background) vector plus Gaussian noise,
    renormalized. Distractor classes, when requested, exist only in the
    vocabulary: they are never drawn in images and get no dataset category.
    """
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    n_classes = n_base + n_novel
    n_vocab = n_classes + n_distractors + 1
    if dim < n_vocab:
        raise ConfigurationError(
            f"dim={dim} too small for {n_vocab} vocabulary vectors (classes + background)"
        )
    rng = rng_stream(seed, WORLD_STREAM)
    vectors = _orthonormal_vectors(n_vocab, dim, rng)

    names = (
        [f"base_{i}" for i in range(n_base)]
        + [f"novel_{i}" for i in range(n_novel)]
        + [f"distractor_{i}" for i in range(n_distractors)]
    )
    split = [SPLIT_BASE] * n_base + [SPLIT_NOVEL] * (n_novel + n_distractors)
    bank = TextBank(names, split, vectors)
    background = vectors[-1].astype(np.float64)

    def noisy(base_vec: np.ndarray) -> np.ndarray:
        v = base_vec + noise_sigma * rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        return (v / norm if norm > 0 else v).astype(np.float32)

    images = []
    annotations = []
    rec_ids: list[int] = []
    rec_boxes: list[tuple[float, float, float, float]] = []
    rec_obj: list[float] = []
    rec_vecs: list[np.ndarray] = []

    def random_box(min_side: int, max_side: int) -> Box:
        w = int(rng.integers(min_side, max_side + 1))
        h = int(rng.integers(min_side, max_side + 1))
        x1 = int(rng.integers(0, image_width - w))
        y1 = int(rng.integers(0, image_height - h))
        return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))

    def jittered(box: Box) -> Box:
        # Shift along x by 20..25% of the width (direction flipped if it
        # would leave the image) plus a tiny y shift. This pins the IoU
        # against the exact box into roughly (0.55, 0.68): high enough that
        # a jitter of a base object is still a positive at the 0.5
        # assignment threshold, low enough that the 0.7 mining NMS keeps
        # both records of a novel object as candidates.
        w = box.x2 - box.x1
        h = box.y2 - box.y1
        dx = float(max(1, round((0.20 + 0.05 * rng.uniform()) * w)))
        if rng.uniform() < 0.5:
            dx = -dx
        if box.x1 + dx < 0 or box.x2 + dx > image_width:
            dx = -dx
        dy = float(rng.integers(-max(1, int(h // 25)), max(1, int(h // 25)) + 1))
        if box.y1 + dy < 0 or box.y2 + dy > image_height:
            dy = -dy
        return Box(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy)

    for image_id in range(n_images):
        images.append(ImageInfo(image_id, image_width, image_height))
        n_obj = int(rng.integers(1, max_objects + 1))
        gt_arrays = []
        for _ in range(n_obj):
            cls = int(rng.integers(0, n_classes))
            box = random_box(40, 160)
            annotations.append(Annotation(image_id, box, cls))
            gt_arrays.append([box.x1, box.y1, box.x2, box.y2])
            cls_vec = vectors[cls].astype(np.float64)

            # Exact ground-truth region: the oracle experiments join on this box.
            rec_ids.append(image_id)
            rec_boxes.append((box.x1, box.y1, box.x2, box.y2))
            rec_obj.append(1.0)
            rec_vecs.append(noisy(cls_vec))

            jit = jittered(box)
            rec_ids.append(image_id)
            rec_boxes.append((jit.x1, jit.y1, jit.x2, jit.y2))
            rec_obj.append(float(rng.uniform(0.55, 0.95)))
            rec_vecs.append(noisy(cls_vec))

        # Background proposals carry background-like embeddings, so keep them
        # off the objects: a region pooled over an object would not look like
        # background. Rejection-sample a clear spot, skipping on failure.
        gt_matrix = np.array(gt_arrays, dtype=np.float64)
        for _ in range(int(rng.integers(3, 7))):
            for _attempt in range(10):
                box = random_box(30, 200)
                arr = np.array([[box.x1, box.y1, box.x2, box.y2]])
                if pairwise_iou(arr, gt_matrix)[0].max() < 0.3:
                    rec_ids.append(image_id)
                    rec_boxes.append((box.x1, box.y1, box.x2, box.y2))
                    rec_obj.append(float(rng.uniform(0.05, 0.5)))
                    rec_vecs.append(noisy(background))
                    break

    regions = RegionEmbeddingFile(
        np.array(rec_ids, dtype=np.int64),
        np.array(rec_boxes, dtype=np.float32),
        np.array(rec_obj, dtype=np.float32),
        np.stack(rec_vecs).astype(np.float32),
    )
    categories = [Category(i, names[i], split[i]) for i in range(n_classes)]
    dataset = Dataset(images, annotations, categories)
    return bank, regions, dataset
