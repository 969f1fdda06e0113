import random
from copy import deepcopy
from datetime import date

import pytest
import requests
import toml
from click.testing import CliRunner

from py_finrouter import core
from py_finrouter.clock import FrozenClock
from py_finrouter.config import EngineConfig, build_engine
from py_finrouter.gateway import Gateway, script_mock


@pytest.fixture(scope="function")
def runner():
    return CliRunner()


@pytest.fixture
def no_network(mocker):
    """Any real HTTP request fails the test."""
    return mocker.patch.object(
        requests.adapters.HTTPAdapter,
        "send",
        side_effect=AssertionError("Network access during an offline run"),
    )


@pytest.fixture
def clock():
    return FrozenClock.at(date(2024, 4, 19))


@pytest.fixture
def make_gateway(clock):
    """Sealed gateway with one scripted mock backend per keyword argument."""

    def make(**scripts):
        gateway = Gateway(
            requests.Session(), clock, sleep=lambda _: None, rng=random.Random(0)
        )
        for backend_id, rules in scripts.items():
            gateway.register_backend(script_mock(rules, backend_id=backend_id))
        gateway.seal()
        return gateway

    return make


@pytest.fixture
def config_dict(tmp_path):
    config = deepcopy(core.DEFAULT_CONFIG)
    config.update(
        state_dir=str(tmp_path / "state"),
        runs_dir=str(tmp_path / "runs"),
        cache={"enabled": False, "dir": ""},
    )
    return config


@pytest.fixture
def engine_config(config_dict):
    return EngineConfig.from_dict(config_dict)


@pytest.fixture
def offline_engine(engine_config, no_network):
    """Build offline engines sharing one state directory."""

    def make(cutoff=None):
        return build_engine(engine_config, offline=True, cutoff=cutoff)

    return make


@pytest.fixture
def config_file(tmp_path, mocker, config_dict):
    path = tmp_path / "config.toml"
    with open(path, "w", encoding="utf8") as f:
        toml.dump(config_dict, f)
    mocker.patch.object(core, "DEFAULT_CONFIG_FILE", path)
    return path
