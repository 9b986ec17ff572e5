import logging
import os

import numpy as np
import pytest

from boxstab.dumps import (PerturbConfig, load_manifest, load_manifest_records,
                           validate_manifest)
from boxstab_adapter import AdapterError, LabeledImage, load_detector, run_two_pass
from boxstab_adapter.toy import BlobDetector, make_seed_images

SEEDS = make_seed_images(24, seed=11)


def _run(tmp_path, config, images=SEEDS, **kwargs):
    path = run_two_pass(images, BlobDetector(), config, set_id="t0",
                        out_dir=tmp_path, **kwargs)
    manifest = load_manifest(path)
    return manifest, load_manifest_records(manifest, base_dir=tmp_path)


class TestTwoPass:
    def test_zero_rate_passes_identical(self, tmp_path):
        manifest, records = _run(tmp_path, PerturbConfig(rate=0.0, positions=(), seed=1))
        assert records
        for rec in records:
            assert rec.original == rec.perturbed

    def test_zero_rate_many_passes_still_identical(self, tmp_path):
        config = PerturbConfig(rate=0.0, positions=(), passes=5, seed=1)
        _, records = _run(tmp_path, config)
        for rec in records:
            assert rec.original == rec.perturbed

    def test_dropout_perturbs_detections(self, tmp_path):
        _, records = _run(tmp_path, PerturbConfig(rate=0.3, positions=(1, 2), seed=1))
        assert any(rec.original != rec.perturbed for rec in records)

    def test_same_seed_same_bytes(self, tmp_path):
        config = PerturbConfig(rate=0.15, positions=(1, 2), seed=7)
        run_two_pass(SEEDS, BlobDetector(), config, set_id="a", out_dir=tmp_path / "x")
        run_two_pass(SEEDS, BlobDetector(), config, set_id="a", out_dir=tmp_path / "y")
        assert (tmp_path / "x" / "a.jsonl").read_bytes() == \
            (tmp_path / "y" / "a.jsonl").read_bytes()

    def test_seed_changes_perturbed_pass_only(self, tmp_path):
        _, first = _run(tmp_path / "s7", PerturbConfig(rate=0.3, positions=(1, 2), seed=7))
        _, second = _run(tmp_path / "s8", PerturbConfig(rate=0.3, positions=(1, 2), seed=8))
        assert [r.original for r in first] == [r.original for r in second]
        assert [r.perturbed for r in first] != [r.perturbed for r in second]

    def test_multi_pass_averages_features(self, tmp_path):
        one = _run(tmp_path / "p1", PerturbConfig(rate=0.3, positions=(1, 2), seed=3))[1]
        five = _run(tmp_path / "p5", PerturbConfig(rate=0.3, positions=(1, 2),
                                                   passes=5, seed=3))[1]
        assert [r.original for r in one] == [r.original for r in five]
        assert [r.perturbed for r in one] != [r.perturbed for r in five]

    def test_score_threshold_filters_both_passes(self, tmp_path):
        config = PerturbConfig(rate=0.15, positions=(1, 2), seed=1)
        _, loose = _run(tmp_path / "lo", config, score_threshold=0.0)
        _, tight = _run(tmp_path / "hi", config, score_threshold=0.95)
        assert sum(len(r.original) for r in tight) < sum(len(r.original) for r in loose)
        for rec in tight:
            assert all(d.score >= 0.95 for d in rec.original + rec.perturbed)

    def test_labels_inherited_unlabeled_left_bare(self, tmp_path):
        bare = LabeledImage(image_id="plain", pixels=SEEDS[0].pixels)
        _, records = _run(tmp_path, PerturbConfig(rate=0.0, positions=()),
                          images=[SEEDS[0], bare])
        by_id = {r.image_id: r for r in records}
        assert by_id["seed-0000"].ground_truth is not None
        assert len(by_id["seed-0000"].ground_truth) == len(SEEDS[0].boxes)
        assert by_id["plain"].ground_truth is None

    def test_manifest_records_config_verbatim(self, tmp_path):
        config = PerturbConfig(rate=0.15, positions=(1, 2), seed=42)
        manifest, records = _run(tmp_path, config,
                                 transform_log=(("brightness", 1.2),))
        assert manifest.perturb_config == config
        assert manifest.detector_id == "toy-blob-v1"
        assert manifest.image_count == len(records)
        assert manifest.transform_log == (("brightness", 1.2),)
        assert manifest.feature_dim == 4
        assert manifest.num_classes == 3

    def test_manifest_passes_primary_validation(self, tmp_path):
        manifest, _ = _run(tmp_path, PerturbConfig(rate=0.15, positions=(1, 2), seed=2))
        report = validate_manifest(manifest, base_dir=tmp_path)
        assert report.ok, [f.message for f in report.findings]

    def test_failed_image_skipped_and_logged(self, tmp_path, caplog):
        poison = LabeledImage(image_id="poison",
                              pixels=np.full((64, 64, 3), np.nan))

        class Fragile(BlobDetector):
            def stem(self, pixels):
                if np.isnan(pixels).any():
                    raise RuntimeError("bad tensor")
                return super().stem(pixels)

        with caplog.at_level(logging.WARNING, logger="boxstab_adapter"):
            path = run_two_pass([SEEDS[0], poison, SEEDS[1]], Fragile(),
                                PerturbConfig(rate=0.0, positions=()),
                                set_id="frag", out_dir=tmp_path)
        manifest = load_manifest(path)
        assert manifest.image_count == 2
        assert any("poison" in rec.message for rec in caplog.records)

    def test_every_image_failing_raises(self, tmp_path):
        class Broken(BlobDetector):
            def stem(self, pixels):
                raise RuntimeError("no weights")

        with pytest.raises(AdapterError, match="every image failed"):
            run_two_pass(SEEDS[:3], Broken(),
                         PerturbConfig(rate=0.0, positions=()),
                         set_id="dead", out_dir=tmp_path)

    def test_bad_config_rejected(self, tmp_path):
        with pytest.raises(AdapterError, match="bad perturb config"):
            run_two_pass(SEEDS, BlobDetector(),
                         PerturbConfig(rate=0.5, positions=()),
                         set_id="x", out_dir=tmp_path)

    def test_position_beyond_detector_stages(self, tmp_path):
        with pytest.raises(AdapterError, match="exceeds detector stages"):
            run_two_pass(SEEDS, BlobDetector(),
                         PerturbConfig(rate=0.5, positions=(3,)),
                         set_id="x", out_dir=tmp_path)


class TestLoadDetector:
    def test_instance_passthrough(self):
        det = BlobDetector()
        assert load_detector(det) is det

    def test_class_is_instantiated_not_passed_through(self):
        # A bare class looks like a runtime to hasattr checks but its methods
        # are unbound; the loader has to call it.
        det = load_detector(BlobDetector)
        assert isinstance(det, BlobDetector)
        assert det.detector_id == "toy-blob-v1"
        det.stem(np.zeros((8, 8, 3)))

    def test_loader_returning_class_rejected(self):
        with pytest.raises(AdapterError, match="did not return a detector"):
            load_detector(lambda: BlobDetector)

    def test_loader_failure(self):
        def boom():
            raise OSError("missing checkpoint")

        with pytest.raises(AdapterError, match="detector load failed"):
            load_detector(boom)

    def test_loader_returning_junk(self):
        with pytest.raises(AdapterError, match="did not return a detector"):
            load_detector(lambda: object())

    def test_non_detector_rejected(self):
        with pytest.raises(AdapterError, match="runtime protocol"):
            load_detector(42)


class TestLabeledImage:
    def test_validation(self):
        with pytest.raises(AdapterError, match="H x W x 3"):
            LabeledImage(image_id="x", pixels=np.zeros((4, 4)))
        with pytest.raises(AdapterError, match="equal length"):
            LabeledImage(image_id="x", pixels=np.zeros((4, 4, 3)),
                         boxes=((0, 0, 1, 1),), classes=())
        with pytest.raises(AdapterError, match="negative extent"):
            LabeledImage(image_id="x", pixels=np.zeros((4, 4, 3)),
                         boxes=((2, 0, 1, 1),), classes=(0,))
        with pytest.raises(AdapterError, match="image_id"):
            LabeledImage(image_id="", pixels=np.zeros((4, 4, 3)))
