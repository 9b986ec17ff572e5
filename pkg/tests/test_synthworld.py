import filecmp
import os

import numpy as np
import pytest

from boxstab.dumps import load_manifest, load_manifest_records, validate_manifest
from boxstab.detmetrics import evaluate_detections
from boxstab.errors import ValidationError
from boxstab.matching import StabilityOptions, bos_score, image_stability
from boxstab.synthworld import (DifficultyProfile, WorldConfig, build_meta_provider,
                                gen_meta_set, gen_sample_records, gen_scene,
                                kappa_for, load_world_config, make_source_profiles,
                                perturb_pass, save_world_config, set_id_for,
                                set_profile, simulate_detection, source_name)


SMALL = WorldConfig(images_per_set=2, objects_min=1, objects_max=3,
                    sets_per_source=2, sources=3, test_images=4)

_FLAT = DifficultyProfile(sigma=0.0, miss_prob=0.0, fp_rate=0.0,
                          confidence_noise=0.0, kappa=0.0)


class TestWorldConfig:
    def test_defaults_are_valid(self):
        cfg = WorldConfig()
        assert cfg.sources == 9
        assert cfg.sets_per_source == 50
        assert cfg.coupled

    def test_counts_validated(self):
        with pytest.raises(ValidationError):
            WorldConfig(sources=0)
        with pytest.raises(ValidationError):
            WorldConfig(images_per_set=0)

    def test_object_range_validated(self):
        with pytest.raises(ValidationError):
            WorldConfig(objects_min=5, objects_max=3)

    def test_extent_positive(self):
        with pytest.raises(ValidationError):
            WorldConfig(extent=0.0)

    def test_coupling_non_negative(self):
        with pytest.raises(ValidationError):
            WorldConfig(coupling=-1.0)

    def test_round_trip(self, tmp_path):
        cfg = WorldConfig(seed=7, coupling=1.5, coupled=False)
        path = tmp_path / "world_config.json"
        save_world_config(cfg, path)
        assert load_world_config(path) == cfg

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "world_config.json"
        path.write_text('{"seed": 1, "n_bogus": 2}')
        with pytest.raises(ValidationError, match="unknown config keys"):
            load_world_config(path)


class TestProfiles:
    def test_kappa_for(self):
        assert kappa_for(WorldConfig(coupling=1.2), 2.0) == pytest.approx(2.4)
        assert kappa_for(WorldConfig(coupled=False, uncoupled_kappa=3.0), 2.0) == 3.0

    def test_difficulty_ramps(self):
        profiles = make_source_profiles(WorldConfig())
        sigmas = [p.sigma for p in profiles]
        misses = [p.miss_prob for p in profiles]
        fps = [p.fp_rate for p in profiles]
        assert sigmas == sorted(sigmas)
        assert misses == sorted(misses)
        assert fps == sorted(fps)
        for p in profiles:
            assert p.kappa == pytest.approx(WorldConfig().coupling * p.sigma)

    def test_profile_validation(self):
        with pytest.raises(ValidationError):
            DifficultyProfile(sigma=-1.0, miss_prob=0.0, fp_rate=0.0,
                              confidence_noise=0.0, kappa=0.0)
        with pytest.raises(ValidationError):
            DifficultyProfile(sigma=1.0, miss_prob=1.5, fp_rate=0.0,
                              confidence_noise=0.0, kappa=0.0)

    def test_set_profile_scales_channels_together(self):
        cfg = WorldConfig()
        base = make_source_profiles(cfg)[4]
        jittered = set_profile(cfg, base, 4, 0)
        ratios = (jittered.sigma / base.sigma,
                  jittered.miss_prob / base.miss_prob,
                  jittered.fp_rate / base.fp_rate)
        spread = max(ratios) - min(ratios)
        assert spread < 0.25  # shared severity, small independent wobble
        assert jittered.kappa == pytest.approx(cfg.coupling * jittered.sigma)

    def test_set_profile_deterministic(self):
        cfg = WorldConfig()
        base = make_source_profiles(cfg)[0]
        assert set_profile(cfg, base, 0, 3) == set_profile(cfg, base, 0, 3)


class TestSceneAndDetector:
    def test_scene_within_extent(self):
        cfg = WorldConfig(objects_min=4, objects_max=9)
        scene = gen_scene(cfg, 123)
        assert len(scene) >= 4
        for bbox, cls in scene:
            assert 0.0 <= bbox.x1 <= bbox.x2 <= cfg.extent
            assert 0.0 <= bbox.y1 <= bbox.y2 <= cfg.extent
            assert 0 <= cls < cfg.classes

    def test_flat_profile_reproduces_gt_exactly(self):
        scene = gen_scene(WorldConfig(), 5)
        dets = simulate_detection(scene, _FLAT, 9, classes=6)
        assert len(dets) == len(scene)
        for det, (bbox, cls) in zip(dets, scene):
            assert det.bbox == bbox
            assert det.score == 1.0
            assert det.class_id == cls
            assert det.probs[cls] == 1.0

    def test_detection_deterministic(self):
        scene = gen_scene(WorldConfig(), 5)
        profile = make_source_profiles(WorldConfig())[3]
        assert simulate_detection(scene, profile, 42, classes=6) == \
            simulate_detection(scene, profile, 42, classes=6)

    def test_map_decreases_with_sigma(self):
        from boxstab.dumps import ImageRecord

        def mc_map(sigma, n=100):
            profile = DifficultyProfile(sigma=sigma, miss_prob=0.05, fp_rate=0.3,
                                        confidence_noise=0.05, kappa=0.0)
            cfg = WorldConfig()
            values = []
            for s in range(n):
                scene = gen_scene(cfg, 1000 + s)
                dets = simulate_detection(scene, profile, 2000 + s, classes=cfg.classes)
                rec = ImageRecord(image_id=f"i{s}", original=tuple(dets),
                                  perturbed=tuple(dets), ground_truth=tuple(scene))
                values.append(evaluate_detections([rec]).map_all)
            return float(np.mean(values))

        assert mc_map(0.5) > mc_map(4.0)

    def test_kappa_zero_returns_originals(self):
        scene = gen_scene(WorldConfig(), 5)
        dets = simulate_detection(scene, _FLAT, 9, classes=6)
        assert perturb_pass(dets, _FLAT, 77) == dets

    def test_kappa_zero_stability_is_one(self):
        cfg = WorldConfig(coupling=0.0, images_per_set=2, objects_min=2,
                          objects_max=4, sources=3, sets_per_source=2)
        records = gen_sample_records(cfg, 0, 0)
        for rec in records:
            st = image_stability(rec, StabilityOptions())
            if st.defined:
                assert st.stability == 1.0

    def test_bos_decreases_with_kappa(self):
        def mc_bos(kappa, n=100):
            profile = DifficultyProfile(sigma=2.0, miss_prob=0.05, fp_rate=0.3,
                                        confidence_noise=0.05, kappa=kappa)
            cfg = WorldConfig()
            stabs = []
            for s in range(n):
                scene = gen_scene(cfg, 3000 + s)
                dets = simulate_detection(scene, profile, 4000 + s, classes=cfg.classes)
                per = perturb_pass(dets, profile, 5000 + s)
                from boxstab.dumps import ImageRecord
                rec = ImageRecord(image_id=f"i{s}", original=tuple(dets),
                                  perturbed=tuple(per), ground_truth=tuple(scene))
                stabs.append(image_stability(rec, StabilityOptions()))
            return bos_score(stabs).value

        assert mc_bos(0.5) > mc_bos(3.0)


class TestSampleRecords:
    def test_deterministic(self):
        assert gen_sample_records(SMALL, 1, 1) == gen_sample_records(SMALL, 1, 1)

    def test_seed_changes_output(self):
        other = WorldConfig(images_per_set=2, objects_min=1, objects_max=3,
                            sets_per_source=2, sources=3, test_images=4, seed=99)
        assert gen_sample_records(SMALL, 1, 1) != gen_sample_records(other, 1, 1)

    def test_redraw_touches_only_perturbed_pass(self):
        base = gen_sample_records(SMALL, 0, 0, redraw=0)
        redrawn = gen_sample_records(SMALL, 0, 0, redraw=1)
        assert [r.original for r in base] == [r.original for r in redrawn]
        assert [r.ground_truth for r in base] == [r.ground_truth for r in redrawn]
        assert [r.feature for r in base] == [r.feature for r in redrawn]
        assert [r.perturbed for r in base] != [r.perturbed for r in redrawn]

    def test_image_ids_follow_set_id(self):
        records = gen_sample_records(SMALL, 2, 1)
        assert set_id_for(2, 1) == "s02-t001"
        assert records[0].image_id == "s02-t001-i0000"

    def test_source_index_validated(self):
        with pytest.raises(ValidationError):
            gen_sample_records(SMALL, 5, 0)


class TestMetaSet:
    def test_manifest_count_and_validity(self, tmp_path):
        cfg = WorldConfig(images_per_set=2, objects_min=1, objects_max=2,
                          sets_per_source=50, sources=9)
        paths = gen_meta_set(cfg, tmp_path)
        assert len(paths) == 450
        manifest = load_manifest(paths[0])
        report = validate_manifest(manifest, base_dir=tmp_path)
        assert report.ok, [f.message for f in report.findings]
        records = load_manifest_records(manifest, base_dir=tmp_path)
        assert len(records) == cfg.images_per_set
        assert records == gen_sample_records(cfg, 0, 0)

    def test_regeneration_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        gen_meta_set(SMALL, a)
        gen_meta_set(SMALL, b)
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert mismatch == [] and errors == []


class TestMetaProvider:
    def test_training_samples_cover_every_set(self):
        provider = build_meta_provider(SMALL)
        samples, tests = provider(0, None)
        assert len(samples) <= SMALL.sources * SMALL.sets_per_source
        assert len(samples) >= SMALL.sources  # tiny sets may skip a few
        assert set(tests) == {source_name(i) for i in range(SMALL.sources)}
        train_ids = {s.set_id for s in samples}
        for points in tests.values():
            for t in points:
                assert t.set_id not in train_ids

    def test_deterministic_per_repeat(self):
        provider = build_meta_provider(SMALL)
        first = provider(2, 4)
        second = build_meta_provider(SMALL)(2, 4)
        assert first == second

    def test_repeat_respects_redraw_semantics(self):
        provider = build_meta_provider(SMALL)
        s0, _ = provider(0, 4)
        s1, _ = provider(1, 4)
        by_id0 = {s.set_id: s for s in s0}
        by_id1 = {s.set_id: s for s in s1}
        # mAP targets are redraw-independent, measured features are not.
        common = set(by_id0) & set(by_id1)
        assert common
        for sid in common:
            assert by_id0[sid].target_map == by_id1[sid].target_map
        assert any(by_id0[sid].features != by_id1[sid].features for sid in common)
