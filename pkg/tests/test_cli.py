import json
from os import environ

import pytest
import toml

from py_finrouter import __version__, core
from py_finrouter.core import DEFAULT_CONFIG_EDITOR, cli
from py_finrouter.selfcheck import SAMPLE_DIR

ANNUAL_REPORT = SAMPLE_DIR / "annual_report_northwind.txt"


def test_version(runner):
    result = runner.invoke(cli, ["-v"])
    assert result.exit_code == 0
    assert "finrouter version" in result.output


def test_version_from_source_tree(runner, mocker):
    mocker.patch.object(
        core, "version", side_effect=core.PackageNotFoundError("py_finrouter")
    )
    result = runner.invoke(cli, ["-v"])
    assert result.exit_code == 0
    assert f"finrouter version {__version__}" in result.output


def test_unknown_command(runner):
    result = runner.invoke(cli, ["predict"])
    assert result.exit_code == 2


def _json_output(output):
    return json.loads(output[output.index("{\n") :])


class TestConfig:
    def _make_config_file(self, path, config):
        with open(path, "w", encoding="utf8") as f:
            toml.dump(config, f)

    def test_use_custom_config_file(self, tmp_path, mocker):
        config_file = tmp_path / "config.toml"
        self._make_config_file(config_file, {"language": "zh", "runs_dir": "out"})
        mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
        config = core.setup_config()
        assert config.language == "zh"
        assert config.runs_dir.name == "out"
        assert [b.backend_id for b in config.backends] == ["gpt-main", "llama-local"]

    @pytest.mark.parametrize(
        "config",
        (
            {"agents": [{"agent_id": "a", "backend_id": "nope", "task_kinds": ["x"]}]},
            {"agents": [{"agent_id": "a", "backend_id": "gpt-main", "task_kinds": []}]},
            {"weights": {"forecast": {"exact_match": 0.5, "token_f1": 0.2}}},
            {"provider": {"kind": "bloomberg"}},
            {"backends": [{"backend_id": "a", "base_url": "http://x"}], "agents": []},
        ),
    )
    def test_config_validation(self, tmp_path, mocker, config):
        config_file = tmp_path / "config.toml"
        self._make_config_file(config_file, config)
        mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
        with pytest.raises(SystemExit):
            core.setup_config()


class TestEditConfig:
    def test_create_default_config(self, tmp_path, mocker, runner):
        config_file = tmp_path / "config.toml"
        assert not config_file.exists()
        mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
        # NOTE: in case of no editor installed
        mocker.patch("py_finrouter.core.subprocess.call")
        result = runner.invoke(cli, ["--edit-config"])
        assert result.exit_code == 0
        assert config_file.exists()
        assert toml.load(config_file)["language"] == "en"

    def test_default_open_editor(self, tmp_path, mocker, runner):
        config_file = tmp_path / "config.toml"
        mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
        patched_subprocess_call = mocker.patch("py_finrouter.core.subprocess.call")
        environ.pop("EDITOR", None)
        runner.invoke(cli, ["--edit-config"])
        patched_subprocess_call.assert_called_with([DEFAULT_CONFIG_EDITOR, config_file])

    def test_respect_editor_env(self, tmp_path, mocker, monkeypatch, runner):
        config_file = tmp_path / "config.toml"
        mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
        patched_subprocess_call = mocker.patch("py_finrouter.core.subprocess.call")
        monkeypatch.setenv("EDITOR", "vim")
        runner.invoke(cli, ["--edit-config"])
        patched_subprocess_call.assert_called_with(["vim", config_file])


@pytest.mark.usefixtures("no_network")
class TestEvaluate:
    def test_json(self, runner, config_file):
        result = runner.invoke(cli, ["evaluate", "--offline", "--json"])
        assert result.exit_code == 0
        scores = _json_output(result.output)
        assert sorted(scores) == ["forecast", "report"]
        for kind_scores in scores.values():
            agents = [s["agent_id"] for s in kind_scores]
            assert agents == ["analyst-gpt", "analyst-llama"]
            for score in kind_scores:
                assert score["raw_scores"]["exact_match"] == 1.0
                assert score["raw_scores"]["quality"] == pytest.approx(0.9)
                assert score["composite"] == pytest.approx(1.0)

    def test_single_kind(self, runner, config_file, tmp_path):
        result = runner.invoke(cli, ["evaluate", "-k", "report", "--offline"])
        assert result.exit_code == 0
        assert "[report]" in result.output
        assert "[forecast]" not in result.output
        assert (tmp_path / "state" / "offline" / "task_scores.jsonl").exists()
        assert not (tmp_path / "state" / "task_scores.jsonl").exists()

    def test_unknown_kind(self, runner, config_file):
        result = runner.invoke(cli, ["evaluate", "-k", "audit", "--offline"])
        assert result.exit_code == 1
        assert "ConfigError" in result.output


@pytest.mark.usefixtures("no_network")
class TestRoute:
    def test_after_evaluate(self, runner, config_file):
        runner.invoke(cli, ["evaluate", "--offline"])
        result = runner.invoke(cli, ["route", "forecast", "--offline"])
        assert result.exit_code == 0
        assert "forecast -> analyst-gpt" in result.output

    def test_offline_scores_stay_offline(self, runner, config_file):
        runner.invoke(cli, ["evaluate", "--offline"])
        result = runner.invoke(cli, ["route", "forecast"])
        assert result.exit_code == 1
        assert "NoScoredAgents" in result.output

    def test_json(self, runner, config_file):
        runner.invoke(cli, ["evaluate", "--offline"])
        result = runner.invoke(cli, ["route", "report", "--json", "--offline"])
        ranking = _json_output(result.output)
        assert ranking["agent_id"] == "analyst-gpt"
        assert [r["agent_id"] for r in ranking["ranking"]] == [
            "analyst-gpt",
            "analyst-llama",
        ]

    def test_not_scored(self, runner, config_file):
        result = runner.invoke(cli, ["route", "forecast"])
        assert result.exit_code == 1
        assert "NoScoredAgents" in result.output


@pytest.mark.usefixtures("no_network")
class TestForecast:
    args = ["forecast", "AAPL", "--cutoff", "2024-04-19", "--horizon", "7", "--offline"]

    def test_offline(self, runner, config_file, tmp_path):
        result = runner.invoke(cli, self.args)
        assert result.exit_code == 0
        assert "Prediction: Up by 0-1%" in result.output
        (run_dir,) = (tmp_path / "runs").iterdir()
        assert run_dir.name.startswith("forecast-AAPL-2024-04-19-")
        forecast = json.loads((run_dir / "forecast.json").read_text(encoding="utf8"))
        assert forecast["symbol"] == "AAPL"
        assert forecast["horizon_start"] == "2024-04-22"
        assert forecast["horizon_end"] == "2024-04-26"
        assert forecast["direction"] == "Up"
        assert (run_dir / "trace.jsonl").exists()

    def test_reproducible(self, runner, tmp_path, mocker, config_dict):
        outputs = []
        for name in ("first", "second"):
            config = dict(
                config_dict,
                state_dir=str(tmp_path / name / "state"),
                runs_dir=str(tmp_path / name / "runs"),
            )
            config_file = tmp_path / f"{name}.toml"
            with open(config_file, "w", encoding="utf8") as f:
                toml.dump(config, f)
            mocker.patch.object(core, "DEFAULT_CONFIG_FILE", config_file)
            assert runner.invoke(cli, self.args).exit_code == 0
            (run_dir,) = (tmp_path / name / "runs").iterdir()
            outputs.append(
                (
                    run_dir.name,
                    (run_dir / "forecast.json").read_bytes(),
                    (run_dir / "trace.jsonl").read_bytes(),
                )
            )
        assert outputs[0] == outputs[1]

    def test_reproducible_with_stored_scores(self, runner, config_file, tmp_path):
        outputs = []
        for _ in range(2):
            assert runner.invoke(cli, self.args).exit_code == 0
            (run_dir,) = (tmp_path / "runs").iterdir()
            outputs.append(
                (
                    (run_dir / "forecast.json").read_bytes(),
                    (run_dir / "trace.jsonl").read_bytes(),
                )
            )
        assert outputs[0] == outputs[1]

    def test_chinese(self, runner, config_file):
        result = runner.invoke(
            cli,
            [
                "forecast",
                "600519",
                "--cutoff",
                "2024-04-19",
                "--lang",
                "zh",
                "--offline",
            ],
        )
        assert result.exit_code == 0
        assert "预测涨跌幅: 上涨0-1%" in result.output

    def test_unknown_symbol(self, runner, config_file):
        result = runner.invoke(
            cli, ["forecast", "ZZZZ", "--cutoff", "2024-04-19", "--offline"]
        )
        assert result.exit_code == 1
        assert "StageError" in result.output

    def test_bad_cutoff(self, runner, config_file):
        result = runner.invoke(cli, ["forecast", "AAPL", "--cutoff", "19/04/2024"])
        assert result.exit_code == 2


@pytest.mark.usefixtures("no_network")
class TestReport:
    def test_offline(self, runner, config_file, tmp_path):
        result = runner.invoke(cli, ["report", str(ANNUAL_REPORT), "--offline"])
        assert result.exit_code == 0
        assert "## Financial Performance" in result.output
        (run_dir,) = (tmp_path / "runs").iterdir()
        assert run_dir.name.startswith("report-annual-report-northwind-")
        for name in ("report.md", "report.txt", "trace.jsonl"):
            assert (run_dir / name).exists()

    def test_empty_document(self, runner, config_file, tmp_path):
        document = tmp_path / "empty.txt"
        document.write_text("  \n", encoding="utf8")
        result = runner.invoke(cli, ["report", str(document), "--offline"])
        assert result.exit_code == 1
        assert "UnreadableDocument" in result.output

    def test_missing_document(self, runner, config_file, tmp_path):
        result = runner.invoke(cli, ["report", str(tmp_path / "nope.txt")])
        assert result.exit_code == 2


def test_selfcheck(runner):
    result = runner.invoke(cli, ["selfcheck"])
    assert result.exit_code == 0
    assert "FAIL" not in result.output
    assert "checks passed" in result.output
