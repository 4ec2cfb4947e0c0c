"""End-to-end tests of the command-line pipeline."""

import hashlib
import json
import os

import numpy as np
import pytest

from volformer.cli import main

TINY_MODEL = {"slices": 4, "height": 8, "width": 8, "channels": 1,
              "patch_slices": 2, "patch_height": 4, "patch_width": 4,
              "embed_dim": 8, "num_heads": 2, "num_layers": 2, "num_classes": 3}


def write_config(tmp_path, name="cfg.json", **overrides):
    doc = {
        "model": dict(TINY_MODEL),
        "train": {"epochs": 3, "batch_size": 8, "learning_rate": 1e-3, "seed": 5},
        "synth": {"n_per_class": 10, "seed": 7},
        "paths": {
            "manifest": str(tmp_path / "manifest.jsonl"),
            "data_dir": str(tmp_path / "data"),
            "out_dir": str(tmp_path / "processed"),
            "checkpoint_dir": str(tmp_path / "ckpt"),
            "report": str(tmp_path / "report.json"),
            "history": str(tmp_path / "history.jsonl"),
        },
    }
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def checksum_dir(path):
    out = {}
    for name in sorted(os.listdir(path)):
        out[name] = hashlib.sha256((path / name).read_bytes()).hexdigest()
    return out


@pytest.fixture
def synth_env(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--quiet"]) == 0
    capsys.readouterr()
    return tmp_path, cfg


class TestSynth:
    def test_creates_volumes_and_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["synth", "--config", str(cfg), "--quiet"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["counts"] == {"NC": 10, "MCI": 10, "AD": 10}
        assert len(list((tmp_path / "data").glob("*.vvol"))) == 30
        assert (tmp_path / "manifest.jsonl").exists()

    def test_rerun_same_seed_identical_files(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        for sub in (a, b):
            cfg = write_config(sub)
            assert main(["synth", "--config", str(cfg), "--quiet"]) == 0
        assert checksum_dir(a / "data") == checksum_dir(b / "data")

    def test_nonempty_dir_refused_without_force(self, synth_env, capsys):
        tmp_path, cfg = synth_env
        assert main(["synth", "--config", str(cfg), "--quiet"]) == 2
        assert "force" in capsys.readouterr().err
        assert main(["synth", "--config", str(cfg), "--quiet", "--force"]) == 0


class TestPreprocess:
    def test_pipeline_shapes(self, tmp_path, capsys):
        # sources are 8x10x10; the model wants 4 central slices at 8x8
        cfg = write_config(tmp_path)
        assert main(["synth", "--config", str(cfg), "--quiet",
                     "--set", "model.slices=8", "--set", "model.height=10",
                     "--set", "model.width=10"]) == 0
        capsys.readouterr()
        assert main(["preprocess", "--config", str(cfg), "--quiet"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["processed"] == 30 and out["skipped"] == 0

        from volformer.data import DatasetManifest

        manifest = DatasetManifest.load(out["manifest"])
        vol = manifest.load_volume(manifest.entries[0])
        assert vol.shape == (4, 8, 8, 1)
        assert vol.voxels.min() >= 0.0 and vol.voxels.max() <= 1.0

    def test_empty_manifest_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        (tmp_path / "manifest.jsonl").write_text("")
        assert main(["preprocess", "--config", str(cfg), "--quiet"]) == 2
        assert "empty" in capsys.readouterr().err

    def test_short_volumes_listed_and_skipped(self, tmp_path, capsys):
        import volformer.data as D

        cfg = write_config(tmp_path)
        (tmp_path / "data").mkdir()
        rng = np.random.default_rng(0)
        entries = []
        for i, slices in enumerate([8, 2, 8]):
            vol = D.Volume(f"v{i}", i % 3,
                           rng.standard_normal((slices, 10, 10, 1)).astype(np.float32))
            D.write_volume(vol, tmp_path / "data" / f"v{i}.vvol")
            entries.append(D.ManifestEntry(path=f"data/v{i}.vvol", label=i % 3))
        D.DatasetManifest(entries=entries, base_dir=str(tmp_path)) \
            .save(tmp_path / "manifest.jsonl")
        assert main(["preprocess", "--config", str(cfg)]) == 0
        captured = capsys.readouterr()
        out = json.loads(captured.out)
        assert out["processed"] == 2 and out["skipped"] == 1
        assert "v1.vvol" in captured.err


class TestTrainEvalPredict:
    def test_train_eval_predict_inspect(self, synth_env, capsys):
        tmp_path, cfg = synth_env

        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert os.path.exists(summary["checkpoint"])
        history = [json.loads(l) for l in
                   (tmp_path / "history.jsonl").read_text().splitlines()]
        assert len(history) == 3

        assert main(["eval", "--config", str(cfg), "--quiet"]) == 0
        text = capsys.readouterr().out
        assert "accuracy:" in text and "row-normalized" in text
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report) == {"accuracy_mean", "accuracy_std", "per_class",
                               "macro", "micro", "confusion"}

        vol_path = sorted((tmp_path / "data").glob("*.vvol"))[0]
        assert main(["predict", "--config", str(cfg), "--quiet",
                     str(vol_path)]) == 0
        line = json.loads(capsys.readouterr().out.strip())
        assert len(line["probabilities"]) == 3
        assert abs(sum(line["probabilities"]) - 1.0) < 1e-6
        assert line["class_name"] in ("NC", "MCI", "AD")

        assert main(["inspect", "--config", str(cfg), "--quiet",
                     "--checkpoint", summary["checkpoint"]]) == 0
        out = capsys.readouterr().out
        assert "total trainable parameters: 2115" in out

    def test_train_refuses_overwrite(self, synth_env, capsys):
        tmp_path, cfg = synth_env
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        capsys.readouterr()
        assert main(["train", "--config", str(cfg), "--quiet"]) == 2

    def test_eval_checkpoint_mismatch_exits_3(self, synth_env, capsys):
        tmp_path, cfg = synth_env
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
        capsys.readouterr()
        code = main(["eval", "--config", str(cfg), "--quiet", "--force",
                     "--set", "model.embed_dim=16"])
        captured = capsys.readouterr()
        assert code == 3
        assert "embed.weight" in captured.err

    def test_missing_checkpoint_exits_2(self, synth_env, capsys):
        tmp_path, cfg = synth_env
        assert main(["eval", "--config", str(cfg), "--quiet"]) == 2


class TestInspectDefault:
    def test_reference_config_count(self, capsys):
        assert main(["inspect", "--quiet"]) == 0
        out = capsys.readouterr().out
        assert "total trainable parameters: 466115" in out
        assert "embed.weight" in out and "8192x32" in out


class TestCrossValidation:
    def test_ten_folds_cover_every_sample_once(self, synth_env, capsys):
        tmp_path, cfg = synth_env
        assert main(["cv", "--config", str(cfg), "--quiet",
                     "--set", "train.epochs=2"]) == 0
        capsys.readouterr()
        aggregate = json.loads((tmp_path / "report.json").read_text())
        assert int(np.sum(aggregate["confusion"])) == 30
        fold_reports = sorted(tmp_path.glob("report_rep0_fold*.json"))
        assert len(fold_reports) == 10
        totals = [int(np.sum(json.loads(p.read_text())["confusion"]))
                  for p in fold_reports]
        assert totals == [3] * 10


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"embed_dims": 8}}))
        assert main(["inspect", "--config", str(cfg), "--quiet"]) == 1
        assert "embed_dims" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"modle": {}}))
        assert main(["inspect", "--config", str(cfg), "--quiet"]) == 1

    def test_set_overrides_config_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["inspect", "--config", str(cfg), "--quiet",
                     "--set", "model.num_layers=0"]) == 0
        out = capsys.readouterr().out
        assert "total trainable parameters: 371" in out  # 2115 - 2*872

    def test_invalid_flag_exits_1(self, capsys):
        assert main(["inspect", "--nope"]) == 1

    def test_bad_json_config_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["inspect", "--config", str(cfg), "--quiet"]) == 1

    def test_thread_cap_env(self, monkeypatch):
        from volformer.cli import _apply_thread_cap

        monkeypatch.setenv("VOLFORMER_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        _apply_thread_cap()
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_preprocess_zscore_mode(self, tmp_path, capsys):
        cfg = write_config(tmp_path, preprocess={"normalize": "zscore"})
        assert main(["synth", "--config", str(cfg), "--quiet"]) == 0
        capsys.readouterr()
        assert main(["preprocess", "--config", str(cfg), "--quiet"]) == 0
        out = json.loads(capsys.readouterr().out)

        from volformer.data import DatasetManifest

        manifest = DatasetManifest.load(out["manifest"])
        vol = manifest.load_volume(manifest.entries[0])
        assert abs(float(vol.voxels.mean())) < 1e-5

    def test_help_enumerates_config_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for key in ("model.embed_dim (default 32)",
                    "train.learning_rate (default 0.0001)",
                    "split.folds (default 10)",
                    "paths.checkpoint_dir (default 'checkpoints')"):
            assert key in out
