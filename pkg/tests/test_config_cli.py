import json

import numpy as np
import pytest
import torch
import yaml

from creative_diffusion.cli import main
from creative_diffusion.config import (
    OUTPUT_ROOT_ENV,
    ExperimentConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    profile_names,
    profile_path,
)
from creative_diffusion.exceptions import ConfigError
from creative_diffusion.experiments import build_corpus, build_embedder, centers_for
from creative_diffusion.kmeans import ClusterSet, assign
from creative_diffusion.prompts import STYLES

# Small enough to run in a few seconds.
TINY = [
    "trainer.epochs=2",
    "trainer.batches_per_epoch=2",
    "trainer.batch_size=4",
    "model.pretrain_steps=40",
    "data.n_per_style=32",
    "grid.images_per_prompt=1",
]


class TestConfig:
    def test_defaults_validate(self):
        cfg = config_from_dict({})
        assert cfg == ExperimentConfig()
        assert cfg.trainer.clip_epsilon == 1e-4 and cfg.trainer.lr == 3e-4
        assert cfg.schedule.inference_steps == 30

    def test_all_errors_reported_together(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"mode": "train", "classifier": "vgg", "trainer": {"lr": "fast", "epochs": 0}, "extra": 1})
        fields = {e.split(":")[0] for e in info.value.errors}
        assert {"mode", "classifier", "trainer.lr", "trainer.epochs", "extra"} <= fields

    def test_missing_file_reported(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"reward": {"centers": "/nonexistent/centers.txt"}})
        assert any(e.startswith("reward.centers") for e in info.value.errors)

    def test_dcgan_needs_head(self):
        with pytest.raises(ConfigError):
            config_from_dict({"classifier": "dcgan"})

    def test_wasserstein_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"can": {"wasserstein_lambda": 10.0}})

    def test_overrides_parse_yaml(self):
        d = apply_overrides({"trainer": {"lr": 1.0}}, ["trainer.lr=0.5", "seed=3", "prompts.subjects=[shapes]"])
        assert d == {"trainer": {"lr": 0.5}, "seed": 3, "prompts": {"subjects": ["shapes"]}}

    def test_hash_ignores_output_dir(self):
        a = config_from_dict({"output_dir": "x"})
        b = config_from_dict({"output_dir": "y"})
        c = config_from_dict({"seed": 1})
        assert a.config_hash() == b.config_hash() != c.config_hash()

    def test_output_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert config_from_dict({"output_dir": "runs/a"}).resolved_output_dir() == tmp_path / "runs/a"
        assert config_from_dict({"output_dir": "/abs"}).resolved_output_dir().as_posix() == "/abs"

    def test_relative_paths_resolve_against_file(self, tmp_path):
        (tmp_path / "c.txt").write_text(ClusterSet(np.eye(2)).to_text())
        (tmp_path / "exp.yaml").write_text(yaml.safe_dump({"reward": {"centers": "c.txt"}}))
        assert load_config(tmp_path / "exp.yaml").reward.centers == str(tmp_path / "c.txt")

    def test_profiles_ship_and_validate(self):
        names = profile_names()
        assert {"desk-ddpo-kmeans-image", "desk-can", "desk-evaluate"} <= set(names)
        for name in names:
            load_config(profile_path(name), check_paths=False)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            profile_path("nope")


@pytest.fixture(scope="module")
def desk_cfg():
    return load_config(profile_path("desk-ddpo-kmeans-image"), ["data.n_per_style=64"])


class TestFitCenters:
    def test_text_centers_are_the_style_embeddings(self, desk_cfg):
        clusters = centers_for(desk_cfg, "text", len(STYLES))
        emb = build_embedder(desk_cfg).embed_text(list(STYLES)).to(torch.float64).numpy()
        order = np.lexsort(clusters.centers.T[::-1])
        np.testing.assert_allclose(clusters.centers[order], emb[np.lexsort(emb.T[::-1])], atol=1e-12)
        assert clusters.inertia == pytest.approx(0.0, abs=1e-20)

    def test_image_centers_separate_styles(self, desk_cfg):
        images, labels, _ = build_corpus(desk_cfg)
        clusters = centers_for(desk_cfg, "image", 2, images)
        with torch.no_grad():
            emb = build_embedder(desk_cfg).embed_image(torch.as_tensor(images)).to(torch.float64).numpy()
        idx = assign(emb, clusters)
        # Match clusters to styles by majority, then count agreements.
        agree = max(np.mean(idx == labels), np.mean(idx == 1 - labels))
        assert agree >= 0.95

    def test_cli_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        for out in (a, b):
            assert main(["fit-centers", "desk-ddpo-kmeans-image", "--set", "data.n_per_style=32",
                         "--source", "image", "--k", "2", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert ClusterSet.load(a).k == 2


class TestCLI:
    def test_profiles_listed(self, capsys):
        assert main(["profiles"]) == 0
        assert "desk-can" in capsys.readouterr().out.split()

    def test_invalid_config_exits_nonzero_with_fields(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("classifier: resnet\ntrainer:\n  batch_size: -1\n")
        assert main(["run", str(bad)]) != 0
        err = capsys.readouterr().err
        assert "classifier:" in err and "trainer.batch_size:" in err

    def test_run_rerun_export(self, tmp_path, capsys):
        dirs = [tmp_path / "r1", tmp_path / "r2"]
        for d in dirs:
            args = ["run", "desk-ddpo-kmeans-image", "--output-dir", str(d)]
            for s in TINY:
                args += ["--set", s]
            assert main(args) == 0
        first, second = (d / "metrics.jsonl" for d in dirs)
        assert first.read_bytes() == second.read_bytes()
        rows = [json.loads(line) for line in first.read_text().splitlines()]
        assert {r["kind"] for r in rows} >= {"pretrain", "reward", "epoch"}
        manifest = json.loads((dirs[0] / "manifest.json").read_text())
        assert manifest["status"] == "ok" and len(manifest["config_hash"]) == 64
        assert sorted(p.name for p in (dirs[0] / "checkpoints").iterdir()) == ["adapters-epoch000.pt", "adapters-epoch001.pt"]

        out = tmp_path / "grids"
        assert main(["export-grid", "desk-ddpo-kmeans-image", "--checkpoint", str(dirs[0] / "base.pt"),
                     "--adapters", str(dirs[0] / "checkpoints" / "adapters-epoch001.pt"), "--out", str(out)]) == 0
        assert (out / "picture-of-shapes-0.png").exists() and (out / "null-0.png").exists()

        capsys.readouterr()
        assert main(["evaluate", "desk-evaluate", "--output-dir", str(tmp_path / "ev"),
                     "--set", f"evaluate.base_checkpoint={dirs[0] / 'base.pt'}",
                     "--set", f"evaluate.adapters={{tuned: {dirs[0] / 'checkpoints' / 'adapters-epoch001.pt'}}}",
                     "--set", "evaluate.n_prompts=6", "--set", "evaluate.n_style_pairs=3", "--set", "data.n_per_style=32"]) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert [r["model"] for r in report["rows"]] == ["baseline", "tuned"]
        assert report["rows"][0]["image_reward"] == "unavailable"

    def test_can_run(self, tmp_path):
        args = ["run", "desk-can-16", "--output-dir", str(tmp_path), "--set", "can.epochs=2", "--set", "data.n_per_style=8",
                "--set", "grid.images_per_prompt=1"]
        assert main(args) == 0
        rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows if r["kind"] == "can_epoch"] == [0, 1]
        assert (tmp_path / "style_head.pt").exists()
