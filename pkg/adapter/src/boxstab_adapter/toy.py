"""A deterministic toy detector runtime for tests and demos.

The detector finds bright rectangular blobs on a dark background: the stem
collapses RGB to luminance, two stages halve resolution by average pooling,
and the head thresholds the coarse map and reads connected components as
boxes. Classes are intensity bands, so brightness-style transforms genuinely
move detections around, and feature dropout punches holes in blobs exactly
the way box-stability measurement expects.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .images import LabeledImage

_CLASS_INTENSITY = (0.48, 0.68, 0.88)


def _pool2(feature: np.ndarray) -> np.ndarray:
    h, w = feature.shape
    h2, w2 = h - h % 2, w - w % 2
    trimmed = feature[:h2, :w2]
    return trimmed.reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))


class BlobDetector:
    """Bright-blob detector over H x W x 3 float images."""

    detector_id = "toy-blob-v1"
    num_stages = 2
    num_classes = 3

    threshold = 0.3
    scale = 4  # two 2x pooling stages between head coordinates and pixels

    def stem(self, pixels: np.ndarray) -> np.ndarray:
        return np.asarray(pixels, dtype=np.float64).mean(axis=2)

    def run_stage(self, stage_idx: int, feature: np.ndarray) -> np.ndarray:
        return _pool2(feature)

    def head(self, feature: np.ndarray):
        labels, count = ndimage.label(feature > self.threshold)
        detections = []
        for blob in range(1, count + 1):
            ys, xs = np.nonzero(labels == blob)
            intensity = float(feature[ys, xs].mean())
            score = float(np.clip(intensity + 0.12, 0.0, 1.0))
            class_id = int(np.argmin([abs(intensity - c) for c in _CLASS_INTENSITY]))
            peak = (1.0 + 2.0 * score) / 3.0
            rest = (1.0 - peak) / (self.num_classes - 1)
            probs = tuple(peak if c == class_id else rest
                          for c in range(self.num_classes))
            detections.append((float(xs.min() * self.scale), float(ys.min() * self.scale),
                               float((xs.max() + 1) * self.scale),
                               float((ys.max() + 1) * self.scale),
                               score, class_id, probs))
        return detections

    def pool(self, feature: np.ndarray):
        return (float(feature.mean()), float(feature.std()),
                float(feature.max()), float((feature > self.threshold).mean()))


def make_seed_images(n: int, *, size: int = 64, max_blobs: int = 3,
                     seed: int = 0) -> list[LabeledImage]:
    """Labeled synthetic scenes: bright class-coded rectangles on noise."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        pixels = rng.uniform(0.0, 0.12, size=(size, size, 3))
        boxes, classes = [], []
        for _ in range(int(rng.integers(1, max_blobs + 1))):
            w = int(rng.integers(10, 23))
            h = int(rng.integers(10, 23))
            x1 = int(rng.integers(0, size - w))
            y1 = int(rng.integers(0, size - h))
            cls = int(rng.integers(0, 3))
            level = _CLASS_INTENSITY[cls] + float(rng.uniform(-0.03, 0.03))
            pixels[y1:y1 + h, x1:x1 + w, :] = level
            boxes.append((float(x1), float(y1), float(x1 + w), float(y1 + h)))
            classes.append(cls)
        out.append(LabeledImage(image_id=f"seed-{i:04d}", pixels=pixels,
                                boxes=tuple(boxes), classes=tuple(classes)))
    return out
