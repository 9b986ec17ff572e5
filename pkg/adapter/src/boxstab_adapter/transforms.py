"""Sample-set synthesis: photometric and geometric transforms over labeled images.

Each synthesized sample set applies one randomly drawn transform chain (names
plus magnitudes) to a random subset of the seed images. Photometric transforms
leave boxes untouched; rotation maps each box to the axis-aligned hull of its
rotated corners, clipped to the frame. Boxes clipped away entirely are dropped
and logged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AdapterError
from .images import LabeledImage

log = logging.getLogger("boxstab_adapter")

TRANSFORM_MENU = ("sharpness", "equalize", "color_temperature", "solarize",
                  "autocontrast", "brightness", "rotate")

MAGNITUDE_RANGES = {
    "identity": (0.0, 0.0),
    "sharpness": (0.5, 2.0),
    "equalize": (0.2, 1.0),
    "color_temperature": (-0.3, 0.3),
    "solarize": (0.5, 1.0),
    "autocontrast": (0.0, 0.1),
    "brightness": (0.6, 1.4),
    "rotate": (-25.0, 25.0),
}


def _sharpness(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    blurred = ndimage.uniform_filter(pixels, size=(3, 3, 1), mode="nearest")
    return np.clip(blurred + magnitude * (pixels - blurred), 0.0, 1.0)


def _equalize_channel(channel: np.ndarray) -> np.ndarray:
    levels = np.clip((channel * 255.0).astype(np.intp), 0, 255)
    cdf = np.bincount(levels.ravel(), minlength=256).cumsum()
    total = cdf[-1]
    if total == 0:
        return channel
    return (cdf / total)[levels]


def _equalize(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    flat = np.stack([_equalize_channel(pixels[:, :, c]) for c in range(3)], axis=2)
    return np.clip((1.0 - magnitude) * pixels + magnitude * flat, 0.0, 1.0)


def _color_temperature(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    out = pixels.copy()
    out[:, :, 0] *= 1.0 + magnitude
    out[:, :, 2] *= 1.0 - magnitude
    return np.clip(out, 0.0, 1.0)


def _solarize(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    return np.where(pixels >= magnitude, 1.0 - pixels, pixels)


def _autocontrast(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    out = np.empty_like(pixels)
    for c in range(3):
        channel = pixels[:, :, c]
        lo = float(np.quantile(channel, magnitude))
        hi = float(np.quantile(channel, 1.0 - magnitude))
        if hi - lo < 1e-9:
            out[:, :, c] = channel
        else:
            out[:, :, c] = np.clip((channel - lo) / (hi - lo), 0.0, 1.0)
    return out


def _brightness(pixels: np.ndarray, magnitude: float) -> np.ndarray:
    return np.clip(pixels * magnitude, 0.0, 1.0)


_PHOTOMETRIC = {
    "sharpness": _sharpness,
    "equalize": _equalize,
    "color_temperature": _color_temperature,
    "solarize": _solarize,
    "autocontrast": _autocontrast,
    "brightness": _brightness,
}


def _rotate_box(box, degrees: float, cx: float, cy: float):
    """Axis-aligned hull of the box corners rotated the way the pixels move."""
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    x1, y1, x2, y2 = box
    xs, ys = [], []
    for px, py in ((x1, y1), (x2, y1), (x2, y2), (x1, y2)):
        dx, dy = px - cx, py - cy
        xs.append(cx + dx * cos_t + dy * sin_t)
        ys.append(cy - dx * sin_t + dy * cos_t)
    return min(xs), min(ys), max(xs), max(ys)


def _rotate(image: LabeledImage, degrees: float) -> LabeledImage:
    if degrees == 0.0:
        return image
    pixels = ndimage.rotate(image.pixels, degrees, axes=(0, 1), reshape=False,
                            order=1, mode="constant", cval=0.0, prefilter=False)
    pixels = np.clip(pixels, 0.0, 1.0)
    h, w = image.height, image.width
    boxes, classes = [], []
    dropped = 0
    for box, cls in zip(image.boxes, image.classes):
        x1, y1, x2, y2 = _rotate_box(box, degrees, w / 2.0, h / 2.0)
        x1, x2 = max(0.0, x1), min(float(w), x2)
        y1, y2 = max(0.0, y1), min(float(h), y2)
        if x2 <= x1 or y2 <= y1:
            dropped += 1
            continue
        boxes.append((x1, y1, x2, y2))
        classes.append(cls)
    if dropped:
        log.info("rotate(%.1f) dropped %d fully clipped box(es) on image %s",
                 degrees, dropped, image.image_id)
    return LabeledImage(image_id=image.image_id, pixels=pixels,
                        boxes=tuple(boxes), classes=tuple(classes))


def apply_transform(name: str, magnitude: float, image: LabeledImage) -> LabeledImage:
    """One named transform; labels are inherited, moved only by geometry."""
    if name == "identity":
        return image
    if name == "rotate":
        return _rotate(image, magnitude)
    fn = _PHOTOMETRIC.get(name)
    if fn is None:
        raise AdapterError(f"unknown transform {name!r}")
    return LabeledImage(image_id=image.image_id, pixels=fn(image.pixels, magnitude),
                        boxes=image.boxes, classes=image.classes)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """One synthesized sample set: transformed images plus the applied chain."""

    set_id: str
    images: tuple[LabeledImage, ...]
    transform_log: tuple[tuple[str, float], ...]


def synthesize_sample_sets(seed_images, *, n_images: int = 250, n_sets: int = 50,
                           transforms=TRANSFORM_MENU, n_transforms: int = 3,
                           seed: int = 0, set_id_prefix: str = "set") -> list[SampleSet]:
    """Random transformed subsets of a labeled seed set, labels inherited.

    Per sample set: an n_images subset without replacement, then n_transforms
    distinct transforms drawn from the menu with uniform random magnitudes,
    applied in draw order to every image.
    """
    seed_images = list(seed_images)
    if n_images > len(seed_images):
        raise AdapterError(f"n_images {n_images} exceeds seed set size {len(seed_images)}")
    if not 1 <= n_transforms <= len(transforms):
        raise AdapterError("n_transforms must be between 1 and the menu size")
    for name in transforms:
        if name != "identity" and name not in _PHOTOMETRIC and name != "rotate":
            raise AdapterError(f"unknown transform {name!r}")
    out = []
    for set_idx in range(n_sets):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(set_idx,)))
        subset = rng.choice(len(seed_images), size=n_images, replace=False)
        picks = rng.choice(len(transforms), size=n_transforms, replace=False)
        chain = []
        for t in picks:
            name = transforms[int(t)]
            lo, hi = MAGNITUDE_RANGES[name]
            chain.append((name, float(rng.uniform(lo, hi))))
        images = []
        for i in subset:
            image = seed_images[int(i)]
            for name, magnitude in chain:
                image = apply_transform(name, magnitude, image)
            images.append(image)
        out.append(SampleSet(set_id=f"{set_id_prefix}-t{set_idx:03d}",
                             images=tuple(images), transform_log=tuple(chain)))
    return out
