"""Region/text encoders behind one small interface.

ColorSignatureEncoder is a deterministic, dependency-free stand-in that maps
an image crop to a random-Fourier-feature embedding of its mean color, and a
class name to the embedding of the name's canonical color. It exists so the
full extraction pipeline can run and be validated offline. ClipEncoder wraps
a pretrained CLIP checkpoint (via transformers) for real datasets; it is an
optional import.
"""

from __future__ import annotations

import hashlib

import numpy as np


class ColorSignatureEncoder:
    """Offline encoder keyed on color: crops by mean RGB, names by a hash
    color. Random Fourier features make distinct colors near-orthogonal."""

    identifier = "color-signature-v1"

    def __init__(self, dim: int = 64, seed: int = 1234, bandwidth: float = 6.0):
        rng = np.random.default_rng(seed)
        self.dim = int(dim)
        self._w = rng.standard_normal((self.dim, 3)) * bandwidth
        self._b = rng.uniform(0.0, 2.0 * np.pi, self.dim)
        # Template perturbation directions are tiny, so the class color
        # dominates while distinct templates still embed distinctly.
        self._template_scale = 0.05

    def _embed_unit_color(self, rgb01: np.ndarray) -> np.ndarray:
        z = np.cos(self._w @ np.asarray(rgb01, dtype=np.float64) + self._b)
        return (z / np.linalg.norm(z)).astype(np.float32)

    @staticmethod
    def color_for_name(name: str) -> np.ndarray:
        # Salted so that the color draw is independent of other uses of the
        # raw name hash. Distinct names can still land on nearby colors
        # (birthday collisions); such classes are visually identical by
        # construction and no encoder could separate them.
        digest = hashlib.sha256(("ovpe-color:" + name).encode("utf-8")).digest()
        return np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64) / 255.0

    def encode_regions(self, image: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        """(N, dim) embeddings for corner-form boxes over an (H, W, 3) image."""
        image = np.asarray(image)
        out = np.zeros((len(boxes), self.dim), dtype=np.float32)
        for i, (x1, y1, x2, y2) in enumerate(np.asarray(boxes, dtype=np.float64)):
            xi1, yi1 = int(np.floor(x1)), int(np.floor(y1))
            xi2, yi2 = int(np.ceil(x2)), int(np.ceil(y2))
            crop = image[max(yi1, 0) : max(yi2, yi1 + 1), max(xi1, 0) : max(xi2, xi1 + 1), :3]
            if crop.size == 0:
                mean = np.zeros(3)
            else:
                mean = crop.reshape(-1, 3).mean(axis=0) / 255.0
            out[i] = self._embed_unit_color(mean)
        return out

    def encode_text(self, class_name: str, template: str) -> np.ndarray:
        base = self._embed_unit_color(self.color_for_name(class_name)).astype(np.float64)
        tweak_rng = np.random.default_rng(
            int.from_bytes(hashlib.sha256(template.encode("utf-8")).digest()[:8], "little")
        )
        tweak = tweak_rng.standard_normal(self.dim)
        tweak /= np.linalg.norm(tweak)
        v = base + self._template_scale * tweak
        return (v / np.linalg.norm(v)).astype(np.float32)


class ClipEncoder:
    """CLIP-backed encoder for real images; requires torch + transformers
    and locally available weights."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.identifier = model_name
        self.model = CLIPModel.from_pretrained(model_name)
        self.model.eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.dim = int(self.model.config.projection_dim)

    def encode_regions(self, image: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        from PIL import Image

        crops = []
        for x1, y1, x2, y2 in np.asarray(boxes, dtype=np.float64):
            crops.append(
                Image.fromarray(np.asarray(image)).crop(
                    (int(x1), int(y1), max(int(x2), int(x1) + 1), max(int(y2), int(y1) + 1))
                )
            )
        inputs = self.processor(images=crops, return_tensors="pt")
        with self._torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)

    def encode_text(self, class_name: str, template: str) -> np.ndarray:
        prompt = template.format(category=class_name)
        inputs = self.processor(text=[prompt], return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy()[0].astype(np.float32)


def build_encoder(name: str, dim: int = 64):
    if name == "color-signature":
        return ColorSignatureEncoder(dim=dim)
    if name.startswith("clip:"):
        return ClipEncoder(name.split(":", 1)[1])
    if name == "clip":
        return ClipEncoder()
    raise ValueError(f"unknown encoder {name!r}")
