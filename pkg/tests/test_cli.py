"""Command-line interface over a micro experiment."""

import json
from pathlib import Path

import pytest

from unlearn_lab.cli import main
from unlearn_lab.harness import ExperimentConfig, EvalSettings, FinetuneSettings, \
    NormalSettings, UnlearnSettings
from unlearn_lab.corpus import CorpusSpec
from unlearn_lab.objectives import UnlearnMethodConfig


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = ExperimentConfig(
        out_dir=str(out / "run"),
        seed=3,
        corpus=CorpusSpec(authors=8, qa_per_author=2, forget_fraction=0.15,
                          holdout_authors=2),
        model={"vocab_size": 300, "dim": 16, "layers": 1, "heads": 2, "context": 128},
        finetune=FinetuneSettings(lr=3e-3, batch_size=8, max_epochs=20,
                                  target_forget_rouge=0.4, check_every=10),
        normal=NormalSettings(companions=2),
        method=UnlearnMethodConfig(method="SGA", rate=0.2, slot_count=3),
        unlearn=UnlearnSettings(epochs=2, lr=1e-4, batch_size=8),
        eval=EvalSettings(verbmem_prefix=8, knowmem_max_new=12, gen_max_new=16),
    )
    path = out / "config.json"
    cfg.save(path)
    return path, Path(cfg.out_dir)


class TestCli:
    def test_synth(self, config_file, capsys):
        path, out = config_file
        assert main(["synth", "--config", str(path)]) == 0
        assert (out / "corpus" / "forget.jsonl").exists()
        assert "synth: done" in capsys.readouterr().out

    def test_eval_pipeline_and_report(self, config_file, capsys):
        path, out = config_file
        assert main(["eval", "--config", str(path)]) == 0
        assert (out / "reports" / "metrics.json").exists()
        assert (out / "reports" / "table_entity.csv").exists()
        assert main(["report", "--config", str(path)]) == 0
        assert "summary" in capsys.readouterr().out

    def test_probe_r(self, config_file, capsys):
        path, out = config_file
        assert main(["probe-r", "--config", str(path)]) == 0
        profile_path = out / "reports" / "sign_profile.jsonl"
        assert profile_path.exists()
        lines = [json.loads(l) for l in profile_path.read_text().splitlines()]
        assert "summary" in lines[-1]
        assert len(lines) - 1 == 2  # one row per forget record (2 forget records)
        captured = capsys.readouterr().out
        assert "instances=" in captured

    def test_flag_overrides(self, config_file, tmp_path):
        path, _ = config_file
        out2 = tmp_path / "ga_run"
        assert main(["synth", "--config", str(path), "--out", str(out2),
                     "--method", "GA", "--seed", "9"]) == 0
        assert (out2 / "corpus" / "retain.jsonl").exists()

    def test_missing_config_and_out(self):
        with pytest.raises(SystemExit):
            main(["synth"])

    def test_failure_exit_code(self, tmp_path, capsys):
        # unlearn without its finetune dependency in a fresh directory
        cfg = ExperimentConfig(out_dir=str(tmp_path / "r"), stages=["synth"])
        path = tmp_path / "c.json"
        cfg.save(path)
        main(["synth", "--config", str(path)])
        code = main(["report", "--config", str(path), "--out", str(tmp_path / "nope")])
        assert code == 1
        assert "error" in capsys.readouterr().err
