import csv
import json
import os

import pytest

from boxstab.cli import main


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """A tiny synthetic meta-set plus every downstream artifact, built once."""
    root = tmp_path_factory.mktemp("pipeline")
    world_dir = root / "world"
    rc = main(["synth", "--out", str(world_dir), "--seed", "0",
               "--sources", "3", "--sets", "4", "--images", "3"])
    assert rc == 0
    manifests = sorted(str(p) for p in world_dir.glob("*.manifest.json"))
    assert len(manifests) == 12

    paths = {
        "root": root,
        "world_dir": world_dir,
        "manifests": manifests,
        "config": str(world_dir / "world_config.json"),
        "scores": str(root / "scores.csv"),
        "ac_scores": str(root / "ac_scores.csv"),
        "maps": str(root / "maps.csv"),
        "model": str(root / "model.json"),
        "predictions": str(root / "predictions.csv"),
        "report": str(root / "report.csv"),
        "summary": str(root / "report_summary.csv"),
        "stats": str(root / "stats.json"),
    }
    assert main(["score", "--manifest", *manifests, "--kind", "bos",
                 "--out", paths["scores"]]) == 0
    assert main(["score", "--manifest", *manifests, "--kind", "ac",
                 "--out", paths["ac_scores"]]) == 0
    assert main(["map", "--manifest", *manifests, "--out", paths["maps"]]) == 0
    assert main(["fit", "--scores", paths["scores"], "--maps", paths["maps"],
                 "--out", paths["model"]]) == 0
    assert main(["predict", "--model", paths["model"], "--scores", paths["scores"],
                 "--out", paths["predictions"]]) == 0
    assert main(["report", "--scores", paths["scores"], paths["ac_scores"],
                 "--maps", paths["maps"], "--out", paths["report"],
                 "--summary", paths["summary"]]) == 0
    assert main(["stats", "--manifest", *manifests, "--out", paths["stats"]]) == 0
    return paths


class TestSynth:
    def test_writes_config_next_to_dumps(self, world):
        cfg = json.loads(open(world["config"]).read())
        assert cfg["sources"] == 3
        assert cfg["sets_per_source"] == 4
        assert cfg["images_per_set"] == 3

    def test_rerun_is_byte_identical(self, world, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), "--seed", "0",
                     "--sources", "3", "--sets", "4", "--images", "3"]) == 0
        for name in sorted(os.listdir(world["world_dir"])):
            first = (world["world_dir"] / name).read_bytes()
            assert first == (again / name).read_bytes(), name

    def test_synth_needs_seed_or_config(self, capsys):
        assert main(["synth"]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ValidationError"

    def test_synth_from_config_file(self, world, tmp_path):
        out = tmp_path / "fromcfg"
        assert main(["synth", "--config", world["config"], "--out", str(out)]) == 0
        name = "s00-t000.jsonl"
        assert (out / name).read_bytes() == (world["world_dir"] / name).read_bytes()


class TestValidate:
    def test_clean_world_passes(self, world, capsys):
        assert main(["validate", "--manifest", *world["manifests"]]) == 0
        assert json.loads(capsys.readouterr().out) == {"findings": []}

    def test_broken_manifest_reported(self, world, tmp_path, capsys):
        bad = tmp_path / "bad.manifest.json"
        bad.write_text("{not json")
        assert main(["validate", "--manifest", str(bad)]) == 1
        findings = json.loads(capsys.readouterr().out)["findings"]
        assert findings and findings[0]["input"] == str(bad)

    def test_missing_dump_reported(self, tmp_path, capsys):
        assert main(["validate", "--dump", str(tmp_path / "nope.jsonl")]) == 1
        findings = json.loads(capsys.readouterr().out)["findings"]
        assert len(findings) == 1

    def test_findings_written_to_file(self, world, tmp_path):
        out = tmp_path / "findings.json"
        assert main(["validate", "--manifest", world["manifests"][0],
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == {"findings": []}


class TestScoreAndMap:
    def test_score_table_shape(self, world):
        rows = _read_csv(world["scores"])
        assert rows[0] == ["set_id", "source_name", "kind", "value",
                           "valid_images", "skipped_images"]
        assert len(rows) == 13
        for row in rows[1:]:
            assert row[2] == "bos"
            assert 0.0 <= float(row[3]) <= 1.0

    def test_sets_sorted_by_id(self, world):
        ids = [row[0] for row in _read_csv(world["scores"])[1:]]
        assert ids == sorted(ids)

    def test_map_table_shape(self, world):
        rows = _read_csv(world["maps"])
        assert rows[0] == ["set_id", "source_name", "map_all", "map50", "map75"]
        assert len(rows) == 13
        for row in rows[1:]:
            assert 0.0 <= float(row[2]) <= 1.0

    def test_fd_requires_reference(self, world, capsys):
        assert main(["score", "--manifest", world["manifests"][0],
                     "--kind", "fd", "--out", "/dev/null"]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == "ValidationError"

    def test_fd_with_reference(self, world, tmp_path):
        out = tmp_path / "fd.csv"
        assert main(["score", "--manifest", *world["manifests"],
                     "--kind", "fd", "--reference", world["stats"],
                     "--out", str(out)]) == 0
        values = [float(r[3]) for r in _read_csv(str(out))[1:]]
        assert all(v >= 0.0 for v in values)

    def test_perturbed_pass_map(self, world, tmp_path):
        out = tmp_path / "maps_perturbed.csv"
        assert main(["map", "--manifest", *world["manifests"],
                     "--pass", "perturbed", "--out", str(out)]) == 0
        assert len(_read_csv(str(out))) == 13


class TestFitPredict:
    def test_model_file(self, world):
        model = json.loads(open(world["model"]).read())
        assert model["feature_kinds"] == ["bos"]
        assert len(model["weights"]) == 2
        assert 0.0 <= model["rmse"] <= 1.0

    def test_predictions_clamped(self, world):
        rows = _read_csv(world["predictions"])
        assert rows[0] == ["set_id", "source_name", "estimate"]
        assert len(rows) == 13
        for row in rows[1:]:
            assert 0.0 <= float(row[2]) <= 1.0

    def test_fit_rejects_missing_scores(self, world, tmp_path, capsys):
        maps_only = tmp_path / "maps.csv"
        maps_only.write_text("set_id,source_name,map_all,map50,map75\n"
                             "zz-1,src,0.5,0.6,0.4\n")
        assert main(["fit", "--scores", world["scores"], "--maps", str(maps_only),
                     "--out", str(tmp_path / "m.json")]) == 1

    def test_fit_too_few_samples_is_computation_error(self, tmp_path, capsys):
        scores = tmp_path / "s.csv"
        maps = tmp_path / "m.csv"
        scores.write_text("set_id,source_name,kind,value,valid_images,skipped_images\n"
                          "a,src,bos,0.5,1,0\n")
        maps.write_text("set_id,source_name,map_all,map50,map75\na,src,0.5,0.6,0.4\n")
        assert main(["fit", "--scores", str(scores), "--maps", str(maps),
                     "--out", str(tmp_path / "model.json")]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "RegressionError"


class TestReport:
    def test_merged_table(self, world):
        rows = _read_csv(world["report"])
        assert rows[0] == ["set_id", "source_name", "ac", "bos", "map_all"]
        assert len(rows) == 13

    def test_summary_has_fit_quality_per_kind(self, world):
        rows = _read_csv(world["summary"])
        assert rows[0] == ["kind", "n", "r2", "spearman_rho"]
        kinds = {row[0]: row for row in rows[1:]}
        assert set(kinds) == {"ac", "bos"}
        assert kinds["bos"][1] == "12"
        assert -1.0 <= float(kinds["bos"][3]) <= 1.0


class TestLoo:
    def test_table_mode(self, world, tmp_path):
        out = tmp_path / "loo.csv"
        assert main(["loo", "--scores", world["scores"], "--maps", world["maps"],
                     "--out", str(out)]) == 0
        rows = _read_csv(str(out))
        assert rows[0] == ["held_out", "source-00", "source-01", "source-02", "average"]
        assert [r[0] for r in rows[1:]] == ["rmse_mean", "rmse_std", "truth_map",
                                            "mean_estimate", "n_repeats"]
        overall = float(rows[1][-1])
        assert 0.0 <= overall <= 1.0

    def test_world_mode_deterministic(self, world, tmp_path):
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        argv = ["loo", "--world", world["config"], "--repeats", "2",
                "--test-cap", "4"]
        assert main(argv + ["--out", str(first)]) == 0
        assert main(argv + ["--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()
        assert _read_csv(str(first))[5][1] == "2"  # n_repeats row

    def test_needs_world_or_tables(self, capsys):
        assert main(["loo"]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == "ValidationError"


class TestOutDir:
    def test_default_outputs_land_in_env_dir(self, world, tmp_path, monkeypatch):
        monkeypatch.setenv("BOXSTAB_OUT_DIR", str(tmp_path))
        assert main(["score", "--manifest", world["manifests"][0],
                     "--kind", "ac"]) == 0
        assert (tmp_path / "scores.csv").exists()

    def test_no_temp_files_left_behind(self, world):
        leftovers = [n for n in os.listdir(world["root"]) if ".tmp-" in n]
        assert leftovers == []
