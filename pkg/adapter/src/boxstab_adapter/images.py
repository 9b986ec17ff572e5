"""In-memory labeled images the adapter transforms and feeds to detectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdapterError


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """One RGB image (H x W x 3 floats in [0, 1]) with optional box labels.

    boxes are (x1, y1, x2, y2) in pixel coordinates, classes parallel to them.
    An empty boxes tuple means the image is unlabeled.
    """

    image_id: str
    pixels: np.ndarray
    boxes: tuple[tuple[float, float, float, float], ...] = ()
    classes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.image_id:
            raise AdapterError("image_id must be a non-empty string")
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise AdapterError(f"pixels must be H x W x 3, got shape {pixels.shape}")
        object.__setattr__(self, "pixels", pixels)
        if len(self.boxes) != len(self.classes):
            raise AdapterError("boxes and classes must have equal length")
        for x1, y1, x2, y2 in self.boxes:
            if x2 < x1 or y2 < y1:
                raise AdapterError(f"box ({x1}, {y1}, {x2}, {y2}) has negative extent")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]
