import json

import numpy as np
import pytest
from PIL import Image

from ovpe_extract.encoders import ColorSignatureEncoder

CLASS_NAMES = [f"thing_{i:02d}" for i in range(16)]
BASE_NAMES = CLASS_NAMES[:11]
NOVEL_NAMES = CLASS_NAMES[11:]
GRID_CELLS = ((0, 0), (48, 0), (0, 48), (48, 48))


@pytest.fixture(scope="session")
def coco_world(tmp_path_factory):
    """A 100-image COCO-format world of solid-color objects.

    Objects are filled rectangles whose color is the canonical color the
    offline encoder assigns to their class name, on a dark noisy background,
    so extraction at gt boxes is a faithful stand-in for recognizable
    objects.
    """
    root = tmp_path_factory.mktemp("coco_world")
    image_dir = root / "images"
    image_dir.mkdir()
    rng = np.random.default_rng(20240)
    colors = {
        name: (255 * ColorSignatureEncoder.color_for_name(name)).astype(np.uint8)
        for name in CLASS_NAMES
    }

    images = []
    annotations = []
    ann_id = 1
    for image_id in range(100):
        canvas = rng.integers(16, 40, (96, 96, 3)).astype(np.uint8)
        n_obj = int(rng.integers(1, 4))
        cells = rng.choice(len(GRID_CELLS), size=n_obj, replace=False)
        for cell in cells:
            cx, cy = GRID_CELLS[cell]
            cls = int(rng.integers(0, len(CLASS_NAMES)))
            w = int(rng.integers(24, 42))
            h = int(rng.integers(24, 42))
            x1 = cx + int(rng.integers(0, 48 - w + 1))
            y1 = cy + int(rng.integers(0, 48 - h + 1))
            canvas[y1 : y1 + h, x1 : x1 + w] = colors[CLASS_NAMES[cls]]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "bbox": [x1, y1, w, h],
                    "category_id": cls + 1,
                }
            )
            ann_id += 1
        file_name = f"img_{image_id:04d}.png"
        Image.fromarray(canvas).save(image_dir / file_name)
        images.append(
            {"id": image_id, "width": 96, "height": 96, "file_name": file_name}
        )

    coco_path = root / "annotations.json"
    coco_path.write_text(
        json.dumps(
            {
                "images": images,
                "annotations": annotations,
                "categories": [
                    {"id": i + 1, "name": name} for i, name in enumerate(CLASS_NAMES)
                ],
            }
        )
    )
    split_path = root / "split_spec.json"
    split_path.write_text(
        json.dumps(
            {name: ("novel" if name in NOVEL_NAMES else "base") for name in CLASS_NAMES}
        )
    )
    return {
        "root": root,
        "image_dir": image_dir,
        "coco_json": coco_path,
        "split_spec": split_path,
        "n_annotations": len(annotations),
    }
