"""Bridge from a detector runtime to box-stability dumps.

Instruments a detector with seeded feature dropout for the perturbed pass,
synthesizes transformed sample sets from a labeled seed set, and writes the
dump + manifest files the boxstab toolkit consumes.
"""

from .errors import AdapterError
from .images import LabeledImage
from .instrument import (DetectorRuntime, build_meta_set, load_detector,
                         run_two_pass)
from .transforms import (MAGNITUDE_RANGES, TRANSFORM_MENU, SampleSet,
                         apply_transform, synthesize_sample_sets)

__all__ = [
    "AdapterError",
    "LabeledImage",
    "DetectorRuntime",
    "build_meta_set",
    "load_detector",
    "run_two_pass",
    "MAGNITUDE_RANGES",
    "TRANSFORM_MENU",
    "SampleSet",
    "apply_transform",
    "synthesize_sample_sets",
]
