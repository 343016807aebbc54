import hashlib
import io
import json
import time
from pathlib import Path

import pytest

from sled.cli import EXIT_CODES, main
from sled.config import ConfigError, RunConfig, canonical_json
from sled.evalbench import EvalReport
from sled.synth import LatentSequence, make_task, read_latents, sample_utterance, write_latents


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_defaults_echo(self):
        cfg = RunConfig()
        data = json.loads(cfg.to_json())
        assert set(data) == {"model", "train", "task", "data", "sampler", "eval", "paths"}
        assert data["train"]["lr"] == 3e-4 and data["model"]["vocab_size"] == 17
        assert RunConfig.from_json(cfg.to_json()) == cfg

    def test_canonical(self):
        assert canonical_json({"b": 1, "a": [1.5, "é"]}) == '{"a":[1.5,"é"],"b":1}'.encode()
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_every_error_listed(self):
        bad = {"model": {"layers": 0, "bogus": 1}, "train": {"lr": "fast", "batch_size": 0},
               "sampler": {"schedule": "5-20"}, "extra": {}}
        with pytest.raises(ConfigError) as info:
            RunConfig.from_dict(bad)
        text = "\n".join(info.value.errors)
        for needle in ("unknown section extra", "unknown key model.bogus", "model.layers", "train.lr",
                       "train.batch_size", "sampler.schedule"):
            assert needle in text
        assert len(info.value.errors) >= 6

    def test_cross_section(self):
        with pytest.raises(ConfigError, match="vocab_size"):
            RunConfig.from_dict({"task": {"vocab_size": 8}})

    def test_replace_revalidates(self):
        cfg = RunConfig().replace("train", lr=1e-3)
        assert cfg.train.lr == 1e-3
        with pytest.raises(ConfigError):
            cfg.replace("train", lr=-1.0)

    def test_invalid_json(self):
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.from_json("{")


class TestDataGen:
    def test_reproducible_and_fast(self, tmp_path, capsys):
        t0 = time.perf_counter()
        assert run(capsys, "data-gen", "--out", tmp_path / "a")[0] == 0
        elapsed = time.perf_counter() - t0
        assert run(capsys, "data-gen", "--out", tmp_path / "b")[0] == 0
        assert elapsed < 10
        da, db = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
        assert da == db and len(da) > 1000
        manifest = json.loads(next((tmp_path / "a").glob("manifest*")).read_text())
        assert manifest["config_sha256"] == RunConfig().digest()
        assert "task" in json.dumps(manifest) and "seed" in json.dumps(manifest)

    def test_seed_changes_output(self, tmp_path, capsys):
        run(capsys, "data-gen", "--out", tmp_path / "a", "--count", 5)
        run(capsys, "data-gen", "--out", tmp_path / "b", "--count", 5, "--seed", 9)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


class TestGed:
    def test_self_is_zero(self, tmp_path, capsys):
        path = tmp_path / "x.slat"
        write_latents(path, sample_utterance(make_task(1), [1, 2, 3], 0))
        code, out, _ = run(capsys, "ged", path, path, "--estimator", "biased")
        assert code == 0
        assert out.splitlines() == ["estimator,kernel_or_metric,value", "biased,energy(beta=1.0),0.0"]
        code, out, _ = run(capsys, "ged", path, path, "--estimator", "biased", "--kernel", "rbf")
        assert out.splitlines()[1] == "biased,rbf(bandwidth=1.0),0.0"

    def test_errors(self, tmp_path, capsys):
        code, _, err = run(capsys, "ged", tmp_path / "missing.slat", tmp_path / "missing.slat")
        assert code == EXIT_CODES["io"] and err.startswith("error:io:")
        junk = tmp_path / "junk.slat"
        junk.write_bytes(b"not a latent file")
        code, _, err = run(capsys, "ged", junk, junk)
        assert code == EXIT_CODES["format"] and err.startswith("error:format:")
        tiny = tmp_path / "tiny.slat"
        write_latents(tiny, LatentSequence(sample_utterance(make_task(1), [1], 0).frames[:1]))
        code, _, err = run(capsys, "ged", tiny, tiny)
        assert code == EXIT_CODES["input"]


class TestErrors:
    def test_usage(self, capsys):
        assert run(capsys, "nonsense")[0] == EXIT_CODES["usage"]

    def test_config_lists_all(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr": -1.0, "batch_size": 0}}))
        code, _, err = run(capsys, "data-gen", "--config", cfg, "--out", tmp_path / "o")
        assert code == EXIT_CODES["config"]
        assert err.count("\n") == 1 and "train.lr" in err and "train.batch_size" in err

    def test_threads_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SLED_THREADS", "zero")
        code, _, err = run(capsys, "data-gen", "--out", tmp_path / "o", "--count", 1)
        assert code == EXIT_CODES["config"] and "SLED_THREADS" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "generate", "--out", tmp_path, "--text", "1 2")
        assert code == EXIT_CODES["usage"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """data-gen, a 200-step training run and a small config for the rest."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = RunConfig().replace("data", count=50).replace("eval", prompts=2, lams=[1.0, 2.0],
                                                          positions=[0, 5], samples_per_step=32)
    cfg = cfg.replace("sampler", max_frames=60)
    cfg.write(root / "config.json")
    assert main(["data-gen", "--config", str(root / "config.json"), "--out", str(root / "data")]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--config", str(root / "config.json"), "--data", str(root / "data"),
                 "--steps", "200", "--out", str(root / "train")]) == 0
    return root, time.perf_counter() - t0


class TestPipeline:
    def test_train_outputs(self, pipeline):
        root, elapsed = pipeline
        train = root / "train"
        assert (train / "checkpoint.slck").exists()
        rows = (train / "metrics.csv").read_text().splitlines()
        assert rows[0].startswith("step,") and len(rows) == 201
        echoed = RunConfig.load(train / "config.json")
        assert echoed.train.total_steps == 200 and echoed.paths.checkpoint == str(train / "checkpoint.slck")
        assert elapsed < 300

    def test_generate_twice_identical(self, pipeline, capsys):
        root, _ = pipeline
        args = ["generate", "--config", str(root / "train" / "config.json"), "--text", "1 2 3",
                "--lambda", "1.0", "--seed", "4"]
        assert run(capsys, *args, "--out", root / "g1")[0] == 0
        code, out, _ = run(capsys, *args, "--out", root / "g2")
        assert code == 0 and out.startswith("gen_000000.slat,")
        assert (root / "g1" / "gen_000000.slat").read_bytes() == (root / "g2" / "gen_000000.slat").read_bytes()

    def test_generate_max_frames(self, pipeline, capsys):
        root, _ = pipeline
        code, out, _ = run(capsys, "generate", "--config", root / "train" / "config.json", "--text", "1 2",
                           "--max-frames", "3", "--stop-threshold", "0.99", "--out", root / "g4")
        assert code == 0
        name, count, stopped = out.strip().split(",")
        assert int(count) <= 3 and len(read_latents(root / "g4" / name)) == int(count)
        assert RunConfig.load(root / "g4" / "config.json").sampler.max_frames == 3

    def test_generate_bad_token(self, pipeline, capsys):
        root, _ = pipeline
        code, _, err = run(capsys, "generate", "--config", root / "train" / "config.json", "--text", "1 x",
                           "--out", root / "g3")
        assert code == EXIT_CODES["input"]

    def test_stream_from_stdin(self, pipeline, capsys, monkeypatch):
        root, _ = pipeline
        monkeypatch.setattr("sys.stdin", io.StringIO("1 2\n3 4 5\n6\n"))
        code, out, _ = run(capsys, "stream", "--config", root / "train" / "config.json", "--schedule", "5:20",
                           "--out", root / "s")
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "event,tokens_seen,frames_emitted,wall_ms"
        assert lines[1].startswith("group,5,20,")
        assert any(l.startswith("eot,6,20,") for l in lines)
        frames = read_latents(root / "s" / "stream.slat")
        assert len(frames) == int(lines[-1].split(",")[2])
        assert (root / "s" / "config.json").exists()

    def test_eval_report(self, pipeline, capsys):
        root, _ = pipeline
        code, out, _ = run(capsys, "eval", "--config", root / "train" / "config.json", "--out", root / "e")
        assert code == 0
        report = EvalReport.from_csv((root / "e" / "eval.csv").read_text())
        assert len(report.configurations()) == 4
        assert all(len([r for r in report.rows if r[0] == c]) == 4 for c in report.configurations())

    def test_bench(self, pipeline, capsys):
        root, _ = pipeline
        code, out, _ = run(capsys, "bench", "--batch-sizes", "1,2", "--frames", "4", "--out", root / "b")
        assert code == 0 and "batch=2,per_frame_ms," in out
        code, _, _ = run(capsys, "bench", "--batch-sizes", "0")
        assert code == EXIT_CODES["usage"]
