"""Two-pass inference over an instrumented detector runtime.

The runtime protocol is deliberately small: a stem, numbered backbone stages,
a detection head, and a pooled-feature hook. The adapter injects seeded
dropout masks after the configured stage positions (0 meaning after the stem)
for the perturbed pass; the clean pass never enters the mask path, so a zero
dropout rate gives exactly identical passes.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from boxstab.dumps import (DetectionRecord, ImageRecord, PerturbConfig,
                           SampleSetManifest, write_dump, write_manifest)
from boxstab.geometry import BBox

from .errors import AdapterError

log = logging.getLogger("boxstab_adapter")


@runtime_checkable
class DetectorRuntime(Protocol):
    """What a detector must expose to be instrumented.

    Stages are numbered 1..num_stages; `head` consumes the final backbone
    feature and returns plain detection tuples
    (x1, y1, x2, y2, score, class_id) or with a trailing probs sequence.
    """

    detector_id: str
    num_stages: int

    def stem(self, pixels: np.ndarray) -> np.ndarray: ...

    def run_stage(self, stage_idx: int, feature: np.ndarray) -> np.ndarray: ...

    def head(self, feature: np.ndarray) -> Sequence[tuple]: ...

    def pool(self, feature: np.ndarray) -> Sequence[float]: ...


def load_detector(detector) -> DetectorRuntime:
    """Accept a runtime instance or a zero-argument loader for one."""
    # A class object satisfies the runtime protocol (its methods are plain
    # attributes) but is unusable as a detector, so classes always go through
    # the loader branch and get instantiated.
    if not isinstance(detector, type) and isinstance(detector, DetectorRuntime):
        return detector
    if callable(detector):
        try:
            loaded = detector()
        except Exception as err:
            raise AdapterError(f"detector load failed: {err}") from err
        if not isinstance(loaded, type) and isinstance(loaded, DetectorRuntime):
            return loaded
        raise AdapterError("loader did not return a detector runtime")
    raise AdapterError("object does not implement the detector runtime protocol")


def _mask_rng(seed: int | None, image_idx: int, pass_idx: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed or 0, spawn_key=(image_idx, pass_idx)))


def _backbone(detector: DetectorRuntime, pixels: np.ndarray,
              rate: float, positions: frozenset[int],
              rng: np.random.Generator | None) -> np.ndarray:
    feature = detector.stem(pixels)
    if rng is not None and 0 in positions:
        feature = feature * (rng.uniform(size=feature.shape) >= rate)
    for stage in range(1, detector.num_stages + 1):
        feature = detector.run_stage(stage, feature)
        if rng is not None and stage in positions:
            feature = feature * (rng.uniform(size=feature.shape) >= rate)
    return feature


def _to_detections(raw: Sequence[tuple], score_threshold: float) -> tuple[DetectionRecord, ...]:
    out = []
    for item in raw:
        x1, y1, x2, y2, score, class_id = item[:6]
        probs = tuple(float(p) for p in item[6]) if len(item) > 6 else None
        if score < score_threshold:
            continue
        out.append(DetectionRecord(bbox=BBox(float(x1), float(y1), float(x2), float(y2)),
                                   score=float(score), class_id=int(class_id),
                                   probs=probs))
    return tuple(out)


def run_two_pass(images, detector, config: PerturbConfig, *, set_id: str,
                 out_dir: str | os.PathLike, source_name: str = "",
                 score_threshold: float = 0.0,
                 transform_log=None) -> Path:
    """Clean and perturbed inference over a sample set, written as dump + manifest.

    The perturbed pass applies seeded dropout after the configured backbone
    stages; with passes > 1 the post-dropout features of the independent
    draws are averaged before the head runs. Images whose inference raises
    are skipped and logged. Returns the manifest path.
    """
    problems = config.validate()
    if problems:
        raise AdapterError("bad perturb config: " + "; ".join(problems))
    detector = load_detector(detector)
    positions = frozenset(config.positions)
    if config.rate > 0.0 and max(positions) > detector.num_stages:
        raise AdapterError(f"position {max(positions)} exceeds detector "
                           f"stages ({detector.num_stages})")

    records = []
    for image_idx, image in enumerate(images):
        try:
            clean = _backbone(detector, image.pixels, 0.0, frozenset(), None)
            original = _to_detections(detector.head(clean), score_threshold)
            feature = tuple(float(v) for v in detector.pool(clean))
            if config.rate == 0.0:
                perturbed = original
            else:
                outputs = [
                    _backbone(detector, image.pixels, config.rate, positions,
                              _mask_rng(config.seed, image_idx, pass_idx))
                    for pass_idx in range(config.passes)
                ]
                merged = outputs[0] if len(outputs) == 1 else \
                    np.mean(np.stack(outputs), axis=0)
                perturbed = _to_detections(detector.head(merged), score_threshold)
            ground_truth = tuple((BBox(*box), int(cls))
                                 for box, cls in zip(image.boxes, image.classes)) \
                if image.boxes else None
            records.append(ImageRecord(image_id=image.image_id, original=original,
                                       perturbed=perturbed, ground_truth=ground_truth,
                                       feature=feature))
        except Exception as err:
            log.warning("image %s skipped: %s", image.image_id, err)

    if images and not records:
        raise AdapterError(
            f"set {set_id}: every image failed the detector; nothing to dump")

    num_classes = getattr(detector, "num_classes", None)
    dump_name = f"{set_id}.jsonl"
    os.makedirs(out_dir, exist_ok=True)
    write_dump(records, os.path.join(out_dir, dump_name), num_classes=num_classes)
    manifest = SampleSetManifest(
        set_id=set_id,
        source_name=source_name,
        detector_id=detector.detector_id,
        image_count=len(records),
        dump_paths=(dump_name,),
        perturb_config=config,
        transform_log=tuple(transform_log) if transform_log is not None else None,
        feature_dim=len(records[0].feature) if records else None,
        num_classes=num_classes,
    )
    manifest_path = Path(out_dir) / f"{set_id}.manifest.json"
    write_manifest(manifest, manifest_path)
    return manifest_path


def build_meta_set(seed_images, detector, config: PerturbConfig, *,
                   out_dir: str | os.PathLike, source_name: str,
                   n_images: int = 250, n_sets: int = 50, n_transforms: int = 3,
                   seed: int = 0, score_threshold: float = 0.0) -> list[Path]:
    """Synthesize sample sets from a labeled seed set and dump them all.

    Defaults follow the standard recipe: 250-image subsets, three random
    transforms each, 50 sample sets per source. Returns the manifest paths.
    """
    from .transforms import synthesize_sample_sets

    sets = synthesize_sample_sets(seed_images, n_images=n_images, n_sets=n_sets,
                                  n_transforms=n_transforms, seed=seed,
                                  set_id_prefix=source_name or "set")
    return [
        run_two_pass(sample.images, detector, config, set_id=sample.set_id,
                     out_dir=out_dir, source_name=source_name,
                     score_threshold=score_threshold,
                     transform_log=sample.transform_log)
        for sample in sets
    ]
