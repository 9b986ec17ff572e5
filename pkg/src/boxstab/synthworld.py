"""Synthetic scene and detector simulator for desk-scale end-to-end runs.

Each source is a difficulty profile; each sample set draws a jittered copy of
its source profile, simulates labeled scenes, a detection pass, and a
perturbed second pass whose jitter scale is coupled to difficulty. That
coupling is what makes box stability track mAP by construction, so the whole
prediction pipeline can be exercised and falsified without a real detector.
Everything is a pure function of (config, seed, indices).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autoeval import MetaProvider, MetaSample, measure_set
from .detmetrics import evaluate_detections
from .dumps import (DetectionRecord, ImageRecord, SampleSetManifest,
                    write_dump, write_manifest)
from .errors import ScoreUndefinedError, ValidationError
from .geometry import BBox
from .matching import StabilityOptions

__all__ = [
    "WorldConfig",
    "DifficultyProfile",
    "make_source_profiles",
    "gen_scene",
    "simulate_detection",
    "perturb_pass",
    "set_profile",
    "gen_sample_records",
    "gen_meta_set",
    "build_meta_provider",
    "save_world_config",
    "load_world_config",
]

# Seed-stream tags so every stage draws from its own deterministic stream.
_SCENE, _DETECT, _PERTURB, _FEATURE, _PROFILE = 0, 1, 2, 3, 4

# Pixel scale against which localization noise is turned into a confidence drop.
_NOISE_REF = 20.0


@dataclass(frozen=True)
class WorldConfig:
    """Shape and seeding of a synthetic meta-set."""

    extent: float = 640.0
    objects_min: int = 5
    objects_max: int = 14
    classes: int = 6
    images_per_set: int = 40
    sets_per_source: int = 50
    sources: int = 9
    seed: int = 0
    coupled: bool = True
    coupling: float = 1.2
    uncoupled_kappa: float = 2.0
    test_images: int = 90
    feature_dim: int = 4

    def __post_init__(self):
        counts = {
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "classes": self.classes,
            "images_per_set": self.images_per_set,
            "sets_per_source": self.sets_per_source,
            "sources": self.sources,
            "test_images": self.test_images,
            "feature_dim": self.feature_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValidationError(f"{name} must be at least 1", field=name)
        if self.objects_max < self.objects_min:
            raise ValidationError("objects_max below objects_min", field="objects_max")
        if self.extent <= 0:
            raise ValidationError("extent must be positive", field="extent")
        if self.coupling < 0 or self.uncoupled_kappa < 0:
            raise ValidationError("coupling terms must be non-negative", field="coupling")


@dataclass(frozen=True)
class DifficultyProfile:
    """Detector-quality knobs for one source (or one jittered sample set).

    sigma is the localization noise in pixels, kappa the second-pass jitter
    scale. confidence_slope is a per-source calibration factor: sources with
    the same accuracy can report systematically different confidences.
    """

    sigma: float
    miss_prob: float
    fp_rate: float
    confidence_noise: float
    kappa: float
    confidence_slope: float = 1.0

    def __post_init__(self):
        if self.sigma < 0 or self.kappa < 0:
            raise ValidationError("sigma and kappa must be non-negative", field="sigma")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValidationError("miss_prob must lie in [0, 1]", field="miss_prob")
        if self.fp_rate < 0:
            raise ValidationError("fp_rate must be non-negative", field="fp_rate")
        if self.confidence_noise < 0:
            raise ValidationError("confidence_noise must be non-negative",
                                  field="confidence_noise")
        if self.confidence_slope <= 0:
            raise ValidationError("confidence_slope must be positive",
                                  field="confidence_slope")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def kappa_for(config: WorldConfig, sigma: float) -> float:
    return config.coupling * sigma if config.coupled else config.uncoupled_kappa


def make_source_profiles(config: WorldConfig) -> tuple[DifficultyProfile, ...]:
    """One profile per source, ramping difficulty.

    sigma moves over a narrow band while miss and false-positive rates ramp
    hard, so mAP varies widely and near-linearly. confidence_slope is scrambled
    across the ramp (not monotone in difficulty), so mean confidence carries
    source-specific bias that does not transfer.
    """
    s = config.sources
    profiles = []
    for i in range(s):
        t = i / (s - 1) if s > 1 else 0.0
        sigma = 1.2 + 1.6 * t
        scramble = ((i * 7) % s) / (s - 1) if s > 1 else 0.0
        profiles.append(DifficultyProfile(
            sigma=sigma,
            miss_prob=0.02 + 0.33 * t,
            fp_rate=0.2 + 1.6 * t,
            confidence_noise=0.05,
            kappa=kappa_for(config, sigma),
            confidence_slope=0.6 + 1.2 * scramble,
        ))
    return tuple(profiles)


_JITTER_LO = 0.8
_JITTER_HI = 1.25
_JITTER_WOBBLE = 0.05


def set_profile(config: WorldConfig, base: DifficultyProfile,
                source_idx: int, set_idx: int) -> DifficultyProfile:
    """Per-set severity jitter of a source profile.

    One shared severity factor scales sigma, miss and false-positive rate
    together (the stand-in for set-level transforms, which degrade every
    channel at once), with a small independent wobble on top.
    """
    rng = _rng(config.seed, source_idx, set_idx, _PROFILE)
    severity = float(rng.uniform(_JITTER_LO, _JITTER_HI))
    w_sigma, w_miss, w_fp = rng.uniform(1.0 - _JITTER_WOBBLE,
                                        1.0 + _JITTER_WOBBLE, size=3)
    sigma = base.sigma * severity * float(w_sigma)
    return replace(base,
                   sigma=sigma,
                   miss_prob=min(1.0, base.miss_prob * severity * float(w_miss)),
                   fp_rate=base.fp_rate * severity * float(w_fp),
                   kappa=kappa_for(config, sigma))


def gen_scene(config: WorldConfig, seed) -> list[tuple[BBox, int]]:
    """Random labeled scene: boxes placed fully inside the image extent."""
    rng = _as_rng(seed)
    n = int(rng.integers(config.objects_min, config.objects_max + 1))
    wh = config.extent * rng.uniform(0.05, 0.25, size=(n, 2))
    cx = rng.uniform(wh[:, 0] / 2, config.extent - wh[:, 0] / 2)
    cy = rng.uniform(wh[:, 1] / 2, config.extent - wh[:, 1] / 2)
    cls = rng.integers(config.classes, size=n)
    return [(BBox(cx[i] - wh[i, 0] / 2, cy[i] - wh[i, 1] / 2,
                  cx[i] + wh[i, 0] / 2, cy[i] + wh[i, 1] / 2), int(cls[i]))
            for i in range(n)]


def _fix_box(x1: float, y1: float, x2: float, y2: float, extent: float) -> BBox:
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    x1, x2 = max(0.0, x1), min(extent, x2)
    y1, y2 = max(0.0, y1), min(extent, y2)
    if x2 - x1 < 1.0:
        mid = min(max((x1 + x2) / 2, 0.5), extent - 0.5)
        x1, x2 = mid - 0.5, mid + 0.5
    if y2 - y1 < 1.0:
        mid = min(max((y1 + y2) / 2, 0.5), extent - 0.5)
        y1, y2 = mid - 0.5, mid + 0.5
    return BBox(x1, y1, x2, y2)


def _peaked_probs(classes: int, class_id: int, confidence: float) -> tuple[float, ...]:
    if classes == 1:
        return (1.0,)
    rest = (1.0 - confidence) / (classes - 1)
    return tuple(confidence if k == class_id else rest for k in range(classes))


def simulate_detection(gt: Sequence[tuple[BBox, int]], profile: DifficultyProfile,
                       seed, *, extent: float = 640.0,
                       classes: int | None = None) -> list[DetectionRecord]:
    """One detection pass over a scene.

    Each ground-truth box is missed with miss_prob or emitted with per-corner
    Gaussian noise; confidence falls with the applied noise (scaled by the
    profile's calibration slope) minus a non-negative confidence-noise draw.
    False positives follow, Poisson-many, at low-to-mid confidence.
    """
    rng = _as_rng(seed)
    if classes is None:
        classes = max((cls for _, cls in gt), default=0) + 1
    n = len(gt)
    missed = rng.uniform(size=n) < profile.miss_prob
    noise = rng.normal(0.0, profile.sigma, size=(n, 4))
    eta = np.abs(rng.normal(0.0, profile.confidence_noise, size=n))
    effect = np.abs(noise).mean(axis=1) / _NOISE_REF
    raw_scores = np.clip(1.0 - profile.confidence_slope * effect - eta, 0.0, 1.0)
    out = []
    for i, (bbox, cls) in enumerate(gt):
        if missed[i]:
            continue
        box = _fix_box(bbox.x1 + noise[i, 0], bbox.y1 + noise[i, 1],
                       bbox.x2 + noise[i, 2], bbox.y2 + noise[i, 3], extent)
        score = float(raw_scores[i])
        out.append(DetectionRecord(bbox=box, score=score, class_id=cls,
                                   probs=_peaked_probs(classes, cls, score)))
    n_fp = int(rng.poisson(profile.fp_rate))
    if n_fp:
        wh = extent * rng.uniform(0.05, 0.2, size=(n_fp, 2))
        cx = rng.uniform(wh[:, 0] / 2, extent - wh[:, 0] / 2)
        cy = rng.uniform(wh[:, 1] / 2, extent - wh[:, 1] / 2)
        fp_cls = rng.integers(classes, size=n_fp)
        fp_scores = rng.uniform(0.05, 0.55, size=n_fp)
        for i in range(n_fp):
            score = float(fp_scores[i])
            cls = int(fp_cls[i])
            out.append(DetectionRecord(
                bbox=_fix_box(cx[i] - wh[i, 0] / 2, cy[i] - wh[i, 1] / 2,
                              cx[i] + wh[i, 0] / 2, cy[i] + wh[i, 1] / 2, extent),
                score=score, class_id=cls,
                probs=_peaked_probs(classes, cls, score)))
    return out


def perturb_pass(original: Sequence[DetectionRecord], profile: DifficultyProfile,
                 seed, *, extent: float = 640.0) -> list[DetectionRecord]:
    """Second pass: re-jitter every box at scale kappa * (1 + sigma).

    Boxes are dropped or duplicated with a small probability growing in kappa;
    confidences wobble slightly. kappa = 0 returns the original pass unchanged.
    """
    if profile.kappa == 0.0:
        return list(original)
    rng = _as_rng(seed)
    scale = profile.kappa * (1.0 + profile.sigma)
    p_change = min(0.2, 0.035 * profile.kappa)
    score_noise = 0.05 * min(1.0, 10.0 * profile.kappa)
    classes = max((len(d.probs) for d in original if d.probs is not None), default=1)
    n = len(original)
    dropped = rng.uniform(size=n) < p_change
    duplicated = rng.uniform(size=n) < p_change
    noise = rng.normal(0.0, scale, size=(n, 2, 4))
    wobble = rng.normal(0.0, score_noise, size=(n, 2))

    def jittered(i: int, k: int, score_factor: float = 1.0) -> DetectionRecord:
        det = original[i]
        dx = noise[i, k]
        box = _fix_box(det.bbox.x1 + dx[0], det.bbox.y1 + dx[1],
                       det.bbox.x2 + dx[2], det.bbox.y2 + dx[3], extent)
        score = min(1.0, max(0.0, (det.score + wobble[i, k]) * score_factor))
        return DetectionRecord(bbox=box, score=score, class_id=det.class_id,
                               probs=_peaked_probs(classes, det.class_id, score)
                               if det.probs is not None else None)

    out = []
    for i in range(n):
        if dropped[i]:
            continue
        out.append(jittered(i, 0))
        if duplicated[i]:
            out.append(jittered(i, 1, score_factor=0.9))
    return out


def _image_feature(profile: DifficultyProfile, seed, dim: int) -> tuple[float, ...]:
    rng = _as_rng(seed)
    base = [profile.sigma / 5.0, profile.miss_prob, profile.fp_rate / 1.5, profile.kappa]
    base = (base + [0.0] * dim)[:dim]
    noise = rng.normal(0.0, 0.3, size=dim)
    return tuple(float(b + n) for b, n in zip(base, noise))


def source_name(source_idx: int) -> str:
    return f"source-{source_idx:02d}"


def set_id_for(source_idx: int, set_idx: int) -> str:
    return f"s{source_idx:02d}-t{set_idx:03d}"


def _image_parts(config: WorldConfig, source_idx: int, set_idx: int, i: int,
                 profile: DifficultyProfile):
    """Scene, original detections and feature for one image (redraw-independent)."""
    scene = gen_scene(config, _rng(config.seed, source_idx, set_idx, i, _SCENE))
    original = simulate_detection(
        scene, profile, _rng(config.seed, source_idx, set_idx, i, _DETECT),
        extent=config.extent, classes=config.classes)
    feature = _image_feature(
        profile, _rng(config.seed, source_idx, set_idx, i, _FEATURE),
        config.feature_dim)
    return scene, original, feature


def _assemble_record(config: WorldConfig, source_idx: int, set_idx: int, i: int,
                     profile: DifficultyProfile, parts, redraw: int) -> ImageRecord:
    scene, original, feature = parts
    perturbed = perturb_pass(
        original, profile,
        _rng(config.seed, source_idx, set_idx, i, _PERTURB, redraw),
        extent=config.extent)
    return ImageRecord(
        image_id=f"{set_id_for(source_idx, set_idx)}-i{i:04d}",
        original=tuple(original),
        perturbed=tuple(perturbed),
        ground_truth=tuple(scene),
        feature=feature,
    )


def gen_sample_records(config: WorldConfig, source_idx: int, set_idx: int, *,
                       redraw: int = 0, n_images: int | None = None,
                       profiles: Sequence[DifficultyProfile] | None = None) -> list[ImageRecord]:
    """All image records of one sample set, a pure function of config and indices.

    redraw reseeds only the perturbed pass, giving fresh stochastic
    measurements over identical scenes and original detections.
    """
    if not 0 <= source_idx < config.sources:
        raise ValidationError("source index out of range", field="source_idx")
    profiles = tuple(profiles) if profiles is not None else make_source_profiles(config)
    profile = set_profile(config, profiles[source_idx], source_idx, set_idx)
    n = config.images_per_set if n_images is None else n_images
    return [
        _assemble_record(config, source_idx, set_idx, i, profile,
                         _image_parts(config, source_idx, set_idx, i, profile),
                         redraw)
        for i in range(n)
    ]


def _set_manifest(config: WorldConfig, source_idx: int, set_idx: int,
                  profile: DifficultyProfile, image_count: int,
                  dump_rel: str) -> SampleSetManifest:
    return SampleSetManifest(
        set_id=set_id_for(source_idx, set_idx),
        source_name=source_name(source_idx),
        detector_id="synth-detector-v1",
        image_count=image_count,
        dump_paths=(dump_rel,),
        perturb_config=None,
        transform_log=(("sigma", profile.sigma), ("miss", profile.miss_prob),
                       ("fp_rate", profile.fp_rate), ("kappa", profile.kappa)),
        feature_dim=config.feature_dim,
        num_classes=config.classes,
    )


def gen_meta_set(config: WorldConfig, out_dir: str | os.PathLike,
                 profiles: Sequence[DifficultyProfile] | None = None) -> list[str]:
    """Write every sample set's dump and manifest under out_dir.

    Flat layout: <set_id>.jsonl next to <set_id>.manifest.json, dump paths
    stored relative to the manifest's directory. Returns manifest paths.
    """
    profiles = tuple(profiles) if profiles is not None else make_source_profiles(config)
    os.makedirs(out_dir, exist_ok=True)
    manifest_paths = []
    for source_idx in range(config.sources):
        for set_idx in range(config.sets_per_source):
            sid = set_id_for(source_idx, set_idx)
            records = gen_sample_records(config, source_idx, set_idx, profiles=profiles)
            dump_rel = f"{sid}.jsonl"
            write_dump(records, os.path.join(out_dir, dump_rel),
                       num_classes=config.classes)
            profile = set_profile(config, profiles[source_idx], source_idx, set_idx)
            manifest = _set_manifest(config, source_idx, set_idx, profile,
                                     len(records), dump_rel)
            path = os.path.join(out_dir, f"{sid}.manifest.json")
            write_manifest(manifest, path)
            manifest_paths.append(path)
    return manifest_paths


def build_meta_provider(config: WorldConfig, *,
                        feature_kinds: Sequence[str] = ("bos",),
                        opts: StabilityOptions | None = None,
                        profiles: Sequence[DifficultyProfile] | None = None) -> MetaProvider:
    """Measurement provider over the synthetic meta-set for leave-one-out runs.

    Training samples are the per-source sample sets; each source also gets one
    larger held-out test set (capped at test_cap images). mAP targets are
    cached across repeats since only the perturbed pass is redrawn.
    """
    opts = opts or StabilityOptions()
    kinds = tuple(feature_kinds)
    fixed_profiles = tuple(profiles) if profiles is not None else make_source_profiles(config)
    map_cache: dict[tuple[int, int, int], float] = {}
    base_cache: dict[tuple[int, int, int], tuple[DifficultyProfile, list]] = {}
    test_set_idx = config.sets_per_source

    def sample_records(source_idx: int, set_idx: int, n_images: int,
                       repeat: int) -> list[ImageRecord]:
        # Scenes, original detections and features never depend on the
        # repeat, so they are generated once; only the perturbed pass is
        # redrawn. Output is identical to gen_sample_records(redraw=repeat).
        key = (source_idx, set_idx, n_images)
        if key not in base_cache:
            profile = set_profile(config, fixed_profiles[source_idx],
                                  source_idx, set_idx)
            base_cache[key] = (profile, [
                _image_parts(config, source_idx, set_idx, i, profile)
                for i in range(n_images)
            ])
        profile, parts = base_cache[key]
        return [
            _assemble_record(config, source_idx, set_idx, i, profile,
                             parts[i], repeat)
            for i in range(n_images)
        ]

    def target_map(source_idx: int, set_idx: int, n_images: int,
                   records: list[ImageRecord]) -> float:
        key = (source_idx, set_idx, n_images)
        if key not in map_cache:
            map_cache[key] = evaluate_detections(records).map_all
        return map_cache[key]

    def measure(records: list[ImageRecord]) -> tuple[float, ...] | None:
        values = []
        for kind in kinds:
            try:
                values.append(measure_set(records, kind, opts).value)
            except ScoreUndefinedError:
                return None
        return tuple(values)

    def provider(repeat: int, test_cap: int | None):
        samples = []
        for source_idx in range(config.sources):
            for set_idx in range(config.sets_per_source):
                records = sample_records(source_idx, set_idx,
                                         config.images_per_set, repeat)
                features = measure(records)
                if features is None:
                    continue
                samples.append(MetaSample(
                    set_id=set_id_for(source_idx, set_idx),
                    source_name=source_name(source_idx),
                    features=features,
                    target_map=target_map(source_idx, set_idx, len(records), records),
                ))
        test_points: dict[str, list[MetaSample]] = {}
        for source_idx in range(config.sources):
            n_images = config.test_images if test_cap is None \
                else min(config.test_images, test_cap)
            records = sample_records(source_idx, test_set_idx, n_images, repeat)
            features = measure(records)
            name = source_name(source_idx)
            if features is None:
                test_points[name] = []
                continue
            test_points[name] = [MetaSample(
                set_id=set_id_for(source_idx, test_set_idx),
                source_name=name,
                features=features,
                target_map=target_map(source_idx, test_set_idx, n_images, records),
            )]
        return samples, test_points

    return provider


_CONFIG_FIELDS = ("extent", "objects_min", "objects_max", "classes", "images_per_set",
                  "sets_per_source", "sources", "seed", "coupled", "coupling",
                  "uncoupled_kappa", "test_images", "feature_dim")


def save_world_config(config: WorldConfig, path: str | os.PathLike) -> None:
    obj = {name: getattr(config, name) for name in _CONFIG_FIELDS}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def load_world_config(path: str | os.PathLike) -> WorldConfig:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("world config must be a JSON object", field="config")
    unknown = set(obj) - set(_CONFIG_FIELDS)
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)!r}", field="config")
    try:
        return WorldConfig(**obj)
    except TypeError as err:
        raise ValidationError(f"malformed world config: {err}", field="config") from None
