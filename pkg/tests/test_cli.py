"""Config parsing and CLI behavior: strict keys, exit codes, artifact
determinism, and the numeric-failure path."""

import os

import numpy as np
import pytest

from gatedprompt import cli
from gatedprompt import tensor as T
from gatedprompt.config import parse_run_config
from gatedprompt.errors import ConfigError

BASE_YAML = """\
model:
  image_size: 16
  channels: 3
  patch_size: 8
  embed_dim: 16
  num_blocks: 3
  num_heads: 2
  mlp_ratio: 2
  num_classes: 4
train:
  mode: gated
  lr: 0.25
  batch_size: 20
  epochs: 3
  seed: 3
  n_prompts: 2
  eval_cadence: 2
data:
  path: {data_path}
  n: 40
  depth: 0
  seed: 5
compare:
  modes: [shallow, gated]
  shaping: [false, true]
  gates: [soft]
output_dir: {out_dir}
"""


@pytest.fixture
def workdir(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(BASE_YAML.format(data_path=tmp_path / "toy.ds",
                                         out_dir=tmp_path / "out"))
    return tmp_path, cfg_path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfigParsing:
    def test_round_trip(self, workdir):
        _, cfg_path = workdir
        cfg = parse_run_config(cfg_path.read_text())
        assert cfg.model.embed_dim == 16
        assert cfg.train.mode == "gated"
        assert cfg.compare.modes == ("shallow", "gated")

    def test_unknown_top_key_named_with_line(self):
        text = "model: {}\ntrain: {}\ndata: {}\nbogus_key: 1\n"
        with pytest.raises(ConfigError, match=r"'bogus_key' at line 4"):
            parse_run_config(text)

    def test_unknown_nested_key_named(self):
        """A typo like gaet_init must be fatal, not silently ignored."""
        text = "train:\n  mode: gated\n  gaet_init: 5\n"
        with pytest.raises(ConfigError, match=r"'train\.gaet_init' at line 3"):
            parse_run_config(text)

    def test_invalid_value_reported(self):
        with pytest.raises(ConfigError, match="train"):
            parse_run_config("train:\n  mode: sideways\n")

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            parse_run_config("")

    def test_fingerprint_stable_and_sensitive(self, workdir):
        _, cfg_path = workdir
        a = parse_run_config(cfg_path.read_text())
        b = parse_run_config(cfg_path.read_text())
        assert a.fingerprint() == b.fingerprint()
        c = parse_run_config(cfg_path.read_text().replace("lr: 0.25", "lr: 0.5"))
        assert a.fingerprint() != c.fingerprint()


class TestExitCodes:
    def test_missing_dataset_path_is_io_error(self, workdir, capsys):
        _, cfg_path = workdir
        assert run("train", "--config", cfg_path) == cli.EXIT_IO
        err = capsys.readouterr().err
        assert "toy.ds" in err

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train:\n  gaet_init: 5\n")
        assert run("train", "--config", bad) == cli.EXIT_USAGE
        assert "gaet_init" in capsys.readouterr().err

    def test_gradcheck_cap_refusal(self, workdir, capsys):
        _, cfg_path = workdir
        assert run("gradcheck", "--config", cfg_path, "--max-params", "10") == cli.EXIT_USAGE
        assert "cap" in capsys.readouterr().err

    def test_analyze_non_gated_checkpoint_is_mode_error(self, workdir, tmp_path):
        root, cfg_path = workdir
        shallow_cfg = tmp_path / "shallow.yaml"
        shallow_cfg.write_text(cfg_path.read_text().replace("mode: gated", "mode: shallow"))
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", shallow_cfg, "--out", root / "sh") == 0
        assert run("analyze", "--checkpoint", root / "sh" / "checkpoint.ckpt",
                   "--out", root / "an") == cli.EXIT_USAGE


class TestTrainCommand:
    def test_rerun_byte_identical_checkpoint_and_metrics(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("train", "--config", cfg_path, "--out", root / "r2") == 0
        ck1 = (root / "r1" / "checkpoint.ckpt").read_bytes()
        ck2 = (root / "r2" / "checkpoint.ckpt").read_bytes()
        assert ck1 == ck2
        m1 = (root / "r1" / "metrics.csv").read_bytes()
        m2 = (root / "r2" / "metrics.csv").read_bytes()
        assert m1 == m2

    def test_seed_override_changes_artifacts(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("train", "--config", cfg_path, "--seed", "99",
                   "--out", root / "r3") == 0
        assert (root / "r1" / "checkpoint.ckpt").read_bytes() != \
            (root / "r3" / "checkpoint.ckpt").read_bytes()

    def test_resolved_config_written(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        text = (root / "r1" / "resolved_config.yaml").read_text()
        assert text.startswith("# config_fingerprint=")
        assert "embed_dim: 16" in text

    def test_metrics_figure_written(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert (root / "r1" / "metrics.png").stat().st_size > 0


class TestGradcheckCommand:
    def test_toy_config_passes(self, workdir):
        root, cfg_path = workdir
        assert run("gradcheck", "--config", cfg_path, "--tolerance", "1e-4",
                   "--out", root / "gc") == 0
        report = (root / "gc" / "gradcheck_report.txt").read_text()
        assert "PASS" in report
        assert "worst 10 parameters" in report

    def test_injected_gradient_bug_fails(self, workdir, monkeypatch):
        """Negative control: corrupt one backward closure and expect exit 2."""
        real_sigmoid = T.sigmoid

        def bad_sigmoid(x):
            out = real_sigmoid(x)
            if out._backward is not None:
                orig = out._backward
                out._backward = lambda g: tuple(
                    None if p is None else p * 1.1 for p in orig(g))
            return out

        monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
        monkeypatch.setattr("gatedprompt.prompts.T.sigmoid", bad_sigmoid)
        root, cfg_path = workdir
        assert run("gradcheck", "--config", cfg_path, "--tolerance", "1e-4",
                   "--out", root / "gc2") == cli.EXIT_NUMERIC


class TestAnalyzeCommand:
    def test_analyze_artifacts(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("analyze", "--checkpoint", root / "r1" / "checkpoint.ckpt",
                   "--config", cfg_path, "--out", root / "an") == 0
        names = sorted(os.listdir(root / "an"))
        assert "selection_report.txt" in names
        assert "selection_ratios.svg" in names
        assert "selection_ratios.png" in names
        assert any(n.startswith("attention_block0_head") for n in names)

    def test_report_gates_match_checkpoint(self, workdir):
        from gatedprompt.checkpoint import load_checkpoint

        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("analyze", "--checkpoint", root / "r1" / "checkpoint.ckpt",
                   "--out", root / "an") == 0
        ckpt = load_checkpoint(root / "r1" / "checkpoint.ckpt")
        expected = [1 / (1 + np.exp(-ckpt.params[f"gates.gamma.{l}"].item()))
                    for l in range(2)]
        text = (root / "an" / "selection_report.txt").read_text()
        block = text.split("gate_values:")[1].split("accumulated_weights:")[0]
        got = [float(line.split(": ")[1]) for line in block.strip().splitlines()]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_analyze_deterministic(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("analyze", "--checkpoint", root / "r1" / "checkpoint.ckpt",
                   "--out", root / "a1") == 0
        assert run("analyze", "--checkpoint", root / "r1" / "checkpoint.ckpt",
                   "--out", root / "a2") == 0
        svg1 = (root / "a1" / "selection_ratios.svg").read_bytes()
        svg2 = (root / "a2" / "selection_ratios.svg").read_bytes()
        assert svg1 == svg2
        csv1 = (root / "a1" / "attention_block0_headmean.csv").read_bytes()
        csv2 = (root / "a2" / "attention_block0_headmean.csv").read_bytes()
        assert csv1 == csv2


class TestCompareCommand:
    def test_grid_rows_and_rerun_identical(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("compare", "--config", cfg_path, "--out", root / "c1") == 0
        assert run("compare", "--config", cfg_path, "--out", root / "c2") == 0
        csv1 = (root / "c1" / "ablation.csv").read_text()
        assert csv1 == (root / "c2" / "ablation.csv").read_text()
        rows = [r for r in csv1.strip().splitlines() if not r.startswith("#")][1:]
        assert len(rows) == 4  # {shallow, gated} x {off, on} x {soft}
        hashes = {r.split(",")[6] for r in rows}
        assert len(hashes) == 1

    def test_eval_command(self, workdir):
        root, cfg_path = workdir
        assert run("gen-data", "--config", cfg_path) == 0
        assert run("train", "--config", cfg_path, "--out", root / "r1") == 0
        assert run("eval", "--config", cfg_path,
                   "--checkpoint", root / "r1" / "checkpoint.ckpt",
                   "--split", "val", "--out", root / "ev") == 0
        text = (root / "ev" / "eval.csv").read_text()
        assert "split,loss,accuracy" in text
