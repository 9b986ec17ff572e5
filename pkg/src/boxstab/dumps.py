"""Serialized detection dumps: the boundary between a detector runtime and this toolkit.

A dump is UTF-8 line-delimited JSON, one image per line:

    {"image_id": "...",
     "original":     [[x1, y1, x2, y2, score, class_id, [p0, ...]?], ...],
     "perturbed":    [[x1, y1, x2, y2, score, class_id, [p0, ...]?], ...],
     "ground_truth": [[x1, y1, x2, y2, class_id], ...],   # omitted when unlabeled
     "feature":      [f0, f1, ...]}                        # omitted when absent

A sample-set manifest is a single JSON document (see SampleSetManifest).
Writing is deterministic: fixed key order, repr float formatting, so identical
records always produce identical bytes.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

from .errors import DumpParseError, ValidationError
from .geometry import BBox

__all__ = [
    "DetectionRecord",
    "ImageRecord",
    "PerturbConfig",
    "SampleSetManifest",
    "Finding",
    "ValidationReport",
    "parse_dump",
    "write_dump",
    "load_manifest",
    "write_manifest",
    "validate_manifest",
]

PROBS_SUM_TOL = 1e-4


@dataclass(frozen=True)
class DetectionRecord:
    """One detected box: geometry, confidence, class, optional class probabilities.

    `score` is authoritative for ranking; `probs` feeds entropy-based measures only.
    """

    bbox: BBox
    score: float
    class_id: int
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValidationError("score out of range [0, 1]", field="score")
        if not isinstance(self.class_id, int) or isinstance(self.class_id, bool) or self.class_id < 0:
            raise ValidationError("class_id must be a non-negative integer", field="class_id")
        if self.probs is not None:
            if len(self.probs) == 0:
                raise ValidationError("probs must be non-empty when present", field="probs")
            if any(not math.isfinite(p) or p < 0.0 for p in self.probs):
                raise ValidationError("probs entries must be finite and non-negative", field="probs")
            total = sum(self.probs)
            if abs(total - 1.0) > PROBS_SUM_TOL:
                raise ValidationError(f"probs sum to {total!r}, expected 1 +/- {PROBS_SUM_TOL}", field="probs")
            if self.class_id >= len(self.probs):
                raise ValidationError("class_id out of range of probs vector", field="class_id")


@dataclass(frozen=True)
class ImageRecord:
    """Two inference passes over one image, plus optional labels and pooled feature."""

    image_id: str
    original: tuple[DetectionRecord, ...]
    perturbed: tuple[DetectionRecord, ...]
    ground_truth: tuple[tuple[BBox, int], ...] | None = None
    feature: tuple[float, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id:
            raise ValidationError("image_id must be a non-empty string", field="image_id")
        if self.ground_truth is not None:
            for _, cls in self.ground_truth:
                if not isinstance(cls, int) or isinstance(cls, bool) or cls < 0:
                    raise ValidationError("ground-truth class_id must be a non-negative integer",
                                          field="ground_truth")
        if self.feature is not None and any(not math.isfinite(f) for f in self.feature):
            raise ValidationError("feature entries must be finite", field="feature")


@dataclass(frozen=True)
class PerturbConfig:
    """Feature-perturbation settings: dropout rate and backbone stage positions."""

    rate: float
    positions: tuple[int, ...]
    passes: int = 1
    seed: int | None = None

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 <= self.rate <= 1.0:
            problems.append(f"perturb rate {self.rate!r} outside [0, 1]")
        if any(p not in (0, 1, 2, 3) for p in self.positions):
            problems.append(f"positions {list(self.positions)!r} not a subset of {{0,1,2,3}}")
        if self.rate > 0.0 and not self.positions:
            problems.append("positions must be non-empty when rate > 0")
        if self.passes < 1:
            problems.append("passes must be >= 1")
        return problems


@dataclass(frozen=True)
class SampleSetManifest:
    """Provenance and file references for one sample set."""

    set_id: str
    source_name: str
    detector_id: str
    image_count: int
    dump_paths: tuple[str, ...]
    perturb_config: PerturbConfig | None = None
    transform_log: tuple[tuple[str, float], ...] | None = None
    feature_dim: int | None = None
    num_classes: int | None = None


@dataclass(frozen=True)
class Finding:
    location: str
    message: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, location: str, message: str) -> None:
        self.findings.append(Finding(location, message))


def _detection_from_json(value, line: int) -> DetectionRecord:
    if not isinstance(value, list) or len(value) not in (6, 7):
        raise DumpParseError(f"detection must be a 6- or 7-element array, got {value!r}", line=line)
    x1, y1, x2, y2, score, class_id = value[:6]
    probs = value[6] if len(value) == 7 else None
    if probs is not None and not isinstance(probs, list):
        raise DumpParseError("detection probs must be an array", line=line)
    try:
        return DetectionRecord(
            bbox=BBox(float(x1), float(y1), float(x2), float(y2)),
            score=float(score),
            class_id=class_id,
            probs=tuple(float(p) for p in probs) if probs is not None else None,
        )
    except ValidationError as err:
        raise ValidationError(str(err), field=err.field, line=line) from None
    except (TypeError, ValueError) as err:
        raise DumpParseError(f"malformed detection: {err}", line=line) from None


def _detection_to_json(det: DetectionRecord):
    row = [det.bbox.x1, det.bbox.y1, det.bbox.x2, det.bbox.y2, det.score, det.class_id]
    if det.probs is not None:
        row.append(list(det.probs))
    return row


def _gt_from_json(value, line: int) -> tuple[BBox, int]:
    if not isinstance(value, list) or len(value) != 5:
        raise DumpParseError(f"ground-truth entry must be a 5-element array, got {value!r}", line=line)
    x1, y1, x2, y2, class_id = value
    try:
        return (BBox(float(x1), float(y1), float(x2), float(y2)), class_id)
    except ValidationError as err:
        raise ValidationError(str(err), field=f"ground_truth.{err.field}", line=line) from None
    except (TypeError, ValueError) as err:
        raise DumpParseError(f"malformed ground-truth entry: {err}", line=line) from None


def _record_from_json(obj, line: int) -> ImageRecord:
    if not isinstance(obj, dict):
        raise DumpParseError("record must be a JSON object", line=line)
    unknown = set(obj) - {"image_id", "original", "perturbed", "ground_truth", "feature"}
    if unknown:
        raise DumpParseError(f"unknown keys {sorted(unknown)!r}", line=line)
    for key in ("image_id", "original", "perturbed"):
        if key not in obj:
            raise DumpParseError(f"missing required key '{key}'", line=line)
    if not isinstance(obj["original"], list) or not isinstance(obj["perturbed"], list):
        raise DumpParseError("'original' and 'perturbed' must be arrays", line=line)
    gt = obj.get("ground_truth")
    if gt is not None and not isinstance(gt, list):
        raise DumpParseError("'ground_truth' must be an array", line=line)
    feat = obj.get("feature")
    if feat is not None and not isinstance(feat, list):
        raise DumpParseError("'feature' must be an array", line=line)
    try:
        return ImageRecord(
            image_id=obj["image_id"],
            original=tuple(_detection_from_json(d, line) for d in obj["original"]),
            perturbed=tuple(_detection_from_json(d, line) for d in obj["perturbed"]),
            ground_truth=tuple(_gt_from_json(g, line) for g in gt) if gt is not None else None,
            feature=tuple(float(f) for f in feat) if feat is not None else None,
        )
    except ValidationError as err:
        if err.line is None:
            raise ValidationError(str(err), field=err.field, line=line) from None
        raise


def _check_consistency(records: Sequence[ImageRecord], num_classes: int | None) -> None:
    """Cross-record invariants: unique ids, consistent probs length / feature dim."""
    seen: set[str] = set()
    probs_len = num_classes
    feat_dim: int | None = None
    for rec in records:
        if rec.image_id in seen:
            raise ValidationError(f"duplicate image_id {rec.image_id!r}", field="image_id")
        seen.add(rec.image_id)
        for det in rec.original + rec.perturbed:
            if det.probs is None:
                continue
            if probs_len is None:
                probs_len = len(det.probs)
            elif len(det.probs) != probs_len:
                raise ValidationError(
                    f"probs length {len(det.probs)} does not match declared class count {probs_len}",
                    field="probs",
                )
        if rec.feature is not None:
            if feat_dim is None:
                feat_dim = len(rec.feature)
            elif len(rec.feature) != feat_dim:
                raise ValidationError(
                    f"feature length {len(rec.feature)} does not match earlier dimension {feat_dim}",
                    field="feature",
                )


def parse_dump(source: str | os.PathLike | IO[str], num_classes: int | None = None) -> list[ImageRecord]:
    """Parse a dump file or text stream into validated ImageRecords, order preserved."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_dump(fh, num_classes=num_classes)
    records: list[ImageRecord] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DumpParseError(f"invalid JSON: {err.msg}", line=lineno) from None
        records.append(_record_from_json(obj, lineno))
    _check_consistency(records, num_classes)
    return records


def _record_to_json_line(rec: ImageRecord) -> str:
    obj = {
        "image_id": rec.image_id,
        "original": [_detection_to_json(d) for d in rec.original],
        "perturbed": [_detection_to_json(d) for d in rec.perturbed],
    }
    if rec.ground_truth is not None:
        obj["ground_truth"] = [[b.x1, b.y1, b.x2, b.y2, c] for b, c in rec.ground_truth]
    if rec.feature is not None:
        obj["feature"] = list(rec.feature)
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _write_text_atomic(path: str | os.PathLike, text: str) -> None:
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dump(records: Sequence[ImageRecord], dest: str | os.PathLike | IO[str],
               num_classes: int | None = None) -> None:
    """Write records line-delimited; byte output is deterministic for identical input.

    Paths are written atomically (temp file then rename).
    """
    _check_consistency(records, num_classes)
    if isinstance(dest, (str, os.PathLike)):
        buf = io.StringIO()
        for rec in records:
            buf.write(_record_to_json_line(rec))
            buf.write("\n")
        _write_text_atomic(dest, buf.getvalue())
        return
    for rec in records:
        dest.write(_record_to_json_line(rec))
        dest.write("\n")


def dumps_to_text(records: Sequence[ImageRecord], num_classes: int | None = None) -> str:
    buf = io.StringIO()
    write_dump(records, buf, num_classes=num_classes)
    return buf.getvalue()


def _manifest_to_json(m: SampleSetManifest) -> dict:
    obj: dict = {
        "set_id": m.set_id,
        "source_name": m.source_name,
        "detector_id": m.detector_id,
        "image_count": m.image_count,
        "dump_paths": list(m.dump_paths),
    }
    if m.perturb_config is not None:
        pc = {"rate": m.perturb_config.rate, "positions": list(m.perturb_config.positions),
              "passes": m.perturb_config.passes}
        if m.perturb_config.seed is not None:
            pc["seed"] = m.perturb_config.seed
        obj["perturb_config"] = pc
    if m.transform_log is not None:
        obj["transform_log"] = [[name, mag] for name, mag in m.transform_log]
    if m.feature_dim is not None:
        obj["feature_dim"] = m.feature_dim
    if m.num_classes is not None:
        obj["num_classes"] = m.num_classes
    return obj


def write_manifest(manifest: SampleSetManifest, path: str | os.PathLike) -> None:
    text = json.dumps(_manifest_to_json(manifest), ensure_ascii=False, indent=2) + "\n"
    _write_text_atomic(path, text)


def load_manifest(path: str | os.PathLike) -> SampleSetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("manifest must be a JSON object", field="manifest")
    try:
        pc = None
        if obj.get("perturb_config") is not None:
            raw = obj["perturb_config"]
            pc = PerturbConfig(rate=float(raw["rate"]),
                               positions=tuple(int(p) for p in raw["positions"]),
                               passes=int(raw.get("passes", 1)),
                               seed=raw.get("seed"))
        tl = None
        if obj.get("transform_log") is not None:
            tl = tuple((str(name), float(mag)) for name, mag in obj["transform_log"])
        return SampleSetManifest(
            set_id=str(obj["set_id"]),
            source_name=str(obj["source_name"]),
            detector_id=str(obj["detector_id"]),
            image_count=int(obj["image_count"]),
            dump_paths=tuple(str(p) for p in obj["dump_paths"]),
            perturb_config=pc,
            transform_log=tl,
            feature_dim=int(obj["feature_dim"]) if obj.get("feature_dim") is not None else None,
            num_classes=int(obj["num_classes"]) if obj.get("num_classes") is not None else None,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"malformed manifest: {err}", field="manifest") from None


def load_manifest_records(manifest: SampleSetManifest, base_dir: str | os.PathLike = ".") -> list[ImageRecord]:
    """Load and pool every ImageRecord referenced by the manifest, path order preserved."""
    records: list[ImageRecord] = []
    for rel in manifest.dump_paths:
        records.extend(parse_dump(os.path.join(base_dir, rel), num_classes=manifest.num_classes))
    _check_consistency(records, manifest.num_classes)
    return records


def validate_manifest(manifest: SampleSetManifest, base_dir: str | os.PathLike = ".") -> ValidationReport:
    """Check every manifest invariant; problems are reported, never thrown."""
    report = ValidationReport()
    if not manifest.set_id:
        report.add("set_id", "must be non-empty")
    if manifest.perturb_config is not None:
        for problem in manifest.perturb_config.validate():
            report.add("perturb_config", problem)
    if not manifest.dump_paths:
        report.add("dump_paths", "manifest references no dump files")

    seen_ids: set[str] = set()
    total = 0
    probs_len = manifest.num_classes
    for rel in manifest.dump_paths:
        path = os.path.join(base_dir, rel)
        if not os.path.exists(path):
            report.add(f"dump_paths[{rel}]", "dump file missing")
            continue
        try:
            records = parse_dump(path)
        except (DumpParseError, ValidationError) as err:
            report.add(f"dump_paths[{rel}]", f"unreadable dump: {err}")
            continue
        total += len(records)
        for rec in records:
            if rec.image_id in seen_ids:
                report.add(f"dump_paths[{rel}]", f"duplicate image_id {rec.image_id!r} across sample set")
            seen_ids.add(rec.image_id)
            if manifest.feature_dim is not None and rec.feature is not None \
                    and len(rec.feature) != manifest.feature_dim:
                report.add(f"dump_paths[{rel}]",
                           f"image {rec.image_id!r} feature dimension {len(rec.feature)} != "
                           f"declared {manifest.feature_dim}")
            for det in rec.original + rec.perturbed:
                if det.probs is not None:
                    if probs_len is None:
                        probs_len = len(det.probs)
                    elif len(det.probs) != probs_len:
                        report.add(f"dump_paths[{rel}]",
                                   f"image {rec.image_id!r} probs length {len(det.probs)} != {probs_len}")
    if total != manifest.image_count and not any(f.location.startswith("dump_paths[") and
                                                 "missing" in f.message for f in report.findings):
        report.add("image_count", f"declared {manifest.image_count} but dumps contain {total}")
    return report


def with_perturbed(record: ImageRecord, perturbed: Iterable[DetectionRecord]) -> ImageRecord:
    return replace(record, perturbed=tuple(perturbed))
