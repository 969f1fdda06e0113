from copy import deepcopy
from datetime import date

import pytest

from py_finrouter import core
from py_finrouter.clock import FrozenClock, SystemClock
from py_finrouter.config import (
    BUNDLED_GOLDEN_DIR,
    BUNDLED_MOCK_SCRIPT,
    OFFLINE_DATE,
    ConfigError,
    EngineConfig,
    build_engine,
    ensure_scored,
    evaluate_task_kind,
    make_provider,
)
from py_finrouter.dataops import FinnhubProvider, FixtureProvider
from py_finrouter.scheduler import NoScoredAgents


class TestFromDict:
    def test_defaults(self):
        config = EngineConfig.from_dict(deepcopy(core.DEFAULT_CONFIG))
        assert [b.backend_id for b in config.backends] == ["gpt-main", "llama-local"]
        assert [a.agent_id for a in config.agents] == ["analyst-gpt", "analyst-llama"]
        assert config.golden == {
            "forecast": BUNDLED_GOLDEN_DIR / "forecast.jsonl",
            "report": BUNDLED_GOLDEN_DIR / "report.jsonl",
        }
        assert config.prompt_dir is None
        assert config.language == "en"

    def test_unknown_backend(self, config_dict):
        config_dict["agents"] = [
            {"agent_id": "ghost", "backend_id": "nowhere", "task_kinds": ["forecast"]}
        ]
        with pytest.raises(ConfigError, match="unknown backend nowhere"):
            EngineConfig.from_dict(config_dict)

    @pytest.mark.parametrize(
        "weights", ({"accuracy": 0.7, "speed": 0.7}, {"accuracy": -0.5, "speed": 1.5})
    )
    def test_bad_weights(self, config_dict, weights):
        config_dict["weights"] = {"forecast": weights}
        with pytest.raises(ConfigError, match="weights.forecast"):
            EngineConfig.from_dict(config_dict)

    def test_provider_kind(self, config_dict):
        config_dict["provider"] = dict(config_dict["provider"], kind="bloomberg")
        with pytest.raises(ConfigError):
            EngineConfig.from_dict(config_dict)

    def test_backend_without_model(self, config_dict):
        del config_dict["backends"][0]["model_name"]
        with pytest.raises(ConfigError):
            EngineConfig.from_dict(config_dict)

    def test_custom_golden_path(self, config_dict, tmp_path):
        config_dict["golden"] = {"forecast": str(tmp_path / "mine.jsonl")}
        assert EngineConfig.from_dict(config_dict).golden == {
            "forecast": tmp_path / "mine.jsonl"
        }

    def test_mock_scripts(self, config_dict, tmp_path):
        scripts = {"llama-local": str(tmp_path / "l.json")}
        config_dict["offline"] = {"script": "", "scripts": scripts}
        config = EngineConfig.from_dict(config_dict)
        assert config.mock_script_for("llama-local") == tmp_path / "l.json"
        assert config.mock_script_for("gpt-main") == BUNDLED_MOCK_SCRIPT


class TestProvider:
    def test_offline_uses_fixtures(self, engine_config):
        assert isinstance(make_provider(engine_config, offline=True), FixtureProvider)

    def test_live_uses_finnhub(self, engine_config):
        provider = make_provider(engine_config)
        assert isinstance(provider, FinnhubProvider)
        assert provider.base_url == "https://finnhub.io/api/v1"

    def test_fixture_kind(self, config_dict):
        config_dict["provider"] = dict(config_dict["provider"], kind="fixture")
        provider = make_provider(EngineConfig.from_dict(config_dict))
        assert isinstance(provider, FixtureProvider)


class TestBuildEngine:
    def test_offline(self, engine_config, no_network):
        engine = build_engine(engine_config, offline=True)
        assert isinstance(engine.clock, FrozenClock)
        assert engine.clock.now().date() == OFFLINE_DATE
        assert engine.gateway.list_backends() == ["gpt-main", "llama-local"]
        assert all(
            engine.gateway.get_backend(b).mock is not None
            for b in engine.gateway.list_backends()
        )
        roster = engine.scheduler.roster("forecast")
        assert [a.agent_id for a in roster] == ["analyst-gpt", "analyst-llama"]
        assert engine.runs_dir == engine_config.runs_dir
        assert engine.scheduler.store.state_dir == engine_config.state_dir / "offline"

    def test_offline_cutoff_anchors_clock(self, engine_config, no_network):
        engine = build_engine(engine_config, offline=True, cutoff=date(2024, 1, 29))
        assert engine.clock.now().date() == date(2024, 1, 29)

    def test_live(self, engine_config):
        engine = build_engine(engine_config)
        assert isinstance(engine.clock, SystemClock)
        assert engine.gateway.get_backend("gpt-main").mock is None
        assert engine.scheduler.store.state_dir == engine_config.state_dir


class TestScoring:
    def test_ensure_scored_once(self, offline_engine, engine_config):
        engine = offline_engine()
        assert ensure_scored(engine, engine_config, "forecast")
        assert not ensure_scored(engine, engine_config, "forecast")
        assert not ensure_scored(offline_engine(), engine_config, "forecast")

    def test_scoring_does_not_advance_clock(self, offline_engine, engine_config):
        scored, fresh = offline_engine(), offline_engine()
        assert ensure_scored(scored, engine_config, "forecast")
        assert not ensure_scored(fresh, engine_config, "forecast")
        assert scored.clock.now() == fresh.clock.now()

    def test_no_golden_dataset(self, config_dict, no_network):
        config_dict["golden"] = {}
        config = EngineConfig.from_dict(config_dict)
        engine = build_engine(config, offline=True)
        with pytest.raises(NoScoredAgents):
            ensure_scored(engine, config, "forecast")
        with pytest.raises(ConfigError):
            evaluate_task_kind(engine, config, "forecast")

    def test_evaluate(self, offline_engine, engine_config):
        scores = evaluate_task_kind(offline_engine(), engine_config, "report")
        assert [s.agent_id for s in scores] == ["analyst-gpt", "analyst-llama"]
