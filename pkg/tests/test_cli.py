import json

import pytest

from gorqat.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

CONFIG = """
mode = "qat_kd_gor"
epochs = 2
teacher_widths = [[2, 16, 2]]
teacher_epochs = 3

[data]
n = 400
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


def _files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


class TestTrain:
    def test_populates_run_dir(self, tmp_path, config, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out), "--json"]) == EXIT_OK
        assert _files(out) == ["config.json", "metrics.csv", "student.ckpt", "summary.json", "teacher-0.ckpt"]
        summary = json.loads((out / "summary.json").read_text())
        assert 0 <= summary["test_acc"] <= 1 and summary["config"]["mode"] == "qat_kd_gor"
        assert json.loads(capsys.readouterr().out)["run_dir"] == str(out)

    def test_seed_override(self, tmp_path, config):
        for name, seed in (("a", "0"), ("b", "0"), ("c", "1")):
            assert main(["train", "--config", str(config), "--out", str(tmp_path / name), "--seed", seed]) == EXIT_OK
        read = lambda n: (tmp_path / n / "metrics.csv").read_bytes()
        assert read("a") == read("b") != read("c")

    def test_resolved_config_replays(self, tmp_path, config):
        main(["train", "--config", str(config), "--out", str(tmp_path / "a"), "--eta-alpha", "0.01"])
        main(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_env_default_root(self, tmp_path, config, monkeypatch):
        monkeypatch.setenv("GORQAT_OUT", str(tmp_path / "root"))
        assert main(["train", "--config", str(config), "--mode", "qat_only"]) == EXIT_OK
        assert (tmp_path / "root" / "train-qat_only-seed0" / "metrics.csv").is_file()

    def test_missing_teacher_is_config_error(self, tmp_path, config, capsys):
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--teachers", str(tmp_path / "nope.ckpt")])
        assert code == EXIT_CONFIG
        assert capsys.readouterr().err.count("\n") == 1

    def test_unknown_key(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("mode = 'qat_only'\nlearning_rate = 0.1\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_unknown_data_key(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[data]\nsigmaa = 0.1\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit(self, tmp_path):
        assert main(["train", "--mode", "qat_only", "--eta-theta", "1e12", "--out", str(tmp_path / "r")]) == 3
        assert (tmp_path / "r" / "last_good.ckpt").is_file()

    def test_missing_data_file_is_io_error(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f"mode = 'qat_only'\n[data]\nsource = 'csv'\npath = '{tmp_path / 'none.csv'}'\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_IO


class TestInspectEvaluate:
    @pytest.fixture
    def run(self, tmp_path, config):
        out = tmp_path / "run"
        main(["train", "--config", str(config), "--out", str(out)])
        return out

    def test_inspect_json(self, run, capsys):
        capsys.readouterr()
        assert main(["inspect", str(run / "student.ckpt"), "--json"]) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert all(s["bits"] == 4 for s in info["quant"]["weights"])
        assert info["gor"]["step_count"] > 0

    def test_fresh_checkpoint_scalars(self, tmp_path, capsys):
        from gorqat.checkpoint import save_checkpoint
        from gorqat.models import build_mlp
        from gorqat.regularizer import GoRState

        path = save_checkpoint(tmp_path / "fresh.ckpt", build_mlp([2, 4, 2], seed=0), GoRState())
        assert main(["inspect", str(path)]) == EXIT_OK
        assert "alpha_task 1.0 alpha_kd 1.0" in capsys.readouterr().out

    def test_truncated_is_io_error(self, run, tmp_path):
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes((run / "student.ckpt").read_bytes()[:-7])
        assert main(["inspect", str(cut)]) == EXIT_IO

    def test_evaluate(self, run, config, capsys):
        capsys.readouterr()
        assert main(["evaluate", str(run / "student.ckpt"), "--config", str(config), "--json"]) == EXIT_OK
        assert set(json.loads(capsys.readouterr().out)) == {"train", "test"}


class TestSweepDynamics:
    def test_sweep(self, tmp_path, config):
        out = tmp_path / "sweep"
        with pytest.warns(UserWarning):
            assert main(["sweep", "--config", str(config), "--grid", "0,1,1", "--out", str(out)]) == EXIT_OK
        assert {"runs.csv", "table.csv", "table.txt"} <= set(_files(out))
        assert (out / "table.csv").read_text().count("\n") == 4

    def test_dynamics(self, tmp_path):
        out = tmp_path / "dyn"
        assert main(["dynamics", "--out", str(out), "--scan", "--steps", "2000"]) == EXIT_OK
        assert {"config.json", "scan.csv", "summary.json", "trajectory.csv"} == set(_files(out))

    def test_dynamics_unknown_key(self, tmp_path):
        cfg = tmp_path / "d.toml"
        cfg.write_text("variant = 'gor'\nalpha = 1\n")
        assert main(["dynamics", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_CONFIG

    def test_writes_only_inside_run_dir(self, tmp_path, config, monkeypatch):
        monkeypatch.chdir(tmp_path)
        before = set(tmp_path.iterdir())
        assert main(["train", "--config", str(config), "--out", "only"]) == EXIT_OK
        assert main(["dynamics", "--out", "only/dyn", "--steps", "10"]) == EXIT_OK
        assert set(tmp_path.iterdir()) - before == {tmp_path / "only"}
