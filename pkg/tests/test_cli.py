import json
import subprocess
import sys

import pytest

from genreplay.cli import EXIT_CONFIG, main
from genreplay.harness import SCHEMA

TINY = """\
# genreplay-config v1
seeds = 0
dataset.num_classes = 4
dataset.train_per_class = 12
dataset.eval_per_class = 4
dataset.image_size = 8
protocol.phases = 2
arch.widths = 8,16,16,16
initial.epochs = 1
initial.batch_size = 8
inheritance.epochs = 1
inheritance.batch_size = 8
method.name = finetune
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.conf"
    p.write_text(TINY)
    return p


def stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestValidate:
    def test_resolved_config(self, conf, capsys):
        assert main(["validate", str(conf)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["valid"] and out["method"] == "finetune"
        assert out["config"]["protocol.phases"] == "2"

    def test_flag_overrides_file(self, conf, capsys):
        assert main(["validate", str(conf), "--method.name", "lwf", "--inheritance.ratio", "3:1"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["method"] == "lwf" and out["config"]["inheritance.ratio"] == "3:1"

    def test_every_key_is_a_flag(self, capsys):
        from genreplay.cli import build_parser

        helptext = build_parser()._subparsers._group_actions[0].choices["run"].format_help()
        for key in SCHEMA:
            assert f"--{key}" in helptext

    def test_invalid_config_reports_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.conf"
        bad.write_text("nope = 1\nmethod.name = ours\nmethod.bn = false\n")
        assert main(["validate", str(bad)]) == EXIT_CONFIG
        err = stderr_json(capsys)
        assert err["error"] == "config"
        assert len(err["errors"]) == 2

    def test_preset(self, capsys):
        assert main(["validate", "--preset", "desk-5phase"]) == 0
        assert json.loads(capsys.readouterr().out)["config"]["protocol.phases"] == "5"

    def test_missing_file(self, tmp_path, capsys):
        assert main(["validate", str(tmp_path / "absent.conf")]) != 0
        assert stderr_json(capsys)["error"] == "FileNotFoundError"


class TestRunReportInspect:
    def test_round_trip(self, conf, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GENREPLAY_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["run", str(conf), "--run.name", "ft"]) == 0
        first = json.loads(capsys.readouterr().out)
        assert first["status"] == "complete"
        run_dir = tmp_path / "root" / "runs" / "ft"
        assert (run_dir / "manifest.json").exists()

        assert main(["run", str(conf), "--method.name", "lwf", "--run.name", "lwf"]) == 0
        second = json.loads(capsys.readouterr().out)
        assert second["cache"]["hits"] == 1

        assert main(["report", str(run_dir), str(run_dir.parent / "lwf"), "--out", str(tmp_path / "rep"),
                     "--reference", "lwf"]) == 0
        table = capsys.readouterr().out
        assert "avg_improvement_of_lwf" in table and "| finetune |" in table

        ckpt = run_dir / "seed-0" / "checkpoints" / "task1.pt"
        assert main(["inspect-checkpoint", str(ckpt)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["kind"] == "classifier"

    def test_report_of_missing_run(self, tmp_path, capsys):
        assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == EXIT_CONFIG
        assert "manifest.json" in stderr_json(capsys)["message"]


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "genreplay.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("genreplay ")
