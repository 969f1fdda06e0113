"""Typed engine configuration and assembly of the runtime components."""
import random
from dataclasses import dataclass, field
from datetime import date
from logging import getLogger
from pathlib import Path as LibPath
from typing import Dict, List, Mapping, Optional

import requests

from py_finrouter.clock import FrozenClock, SystemClock
from py_finrouter.dataops import (
    BUNDLED_FIXTURE_DIR,
    DEFAULT_FINNHUB_URL,
    FinnhubProvider,
    FixtureProvider,
    Provider,
    ResponseCache,
)
from py_finrouter.gateway import (
    BackendSpec,
    Gateway,
    GatewayError,
    load_mock_script,
    script_mock,
)
from py_finrouter.prompts import PromptStore
from py_finrouter.scheduler import (
    AgentProfile,
    NoScoredAgents,
    ScoreStore,
    Scheduler,
    SchedulerError,
    TaskScore,
    load_golden,
    validate_weights,
)
from py_finrouter.workflow import WorkflowEngine

LOGGER = getLogger(__name__)

DATA_DIR = LibPath(__file__).parent / "data"
BUNDLED_GOLDEN_DIR = DATA_DIR / "golden"
BUNDLED_MOCK_SCRIPT = DATA_DIR / "mock_script.json"
# Clock anchor of offline runs that have no cutoff of their own
OFFLINE_DATE = date(2024, 4, 19)
# Offline scores and evaluations stay apart from live ones
OFFLINE_STATE_DIR = "offline"
PROVIDER_KINDS = ("finnhub", "fixture")


class ConfigError(Exception):
    pass


def _path(value: str, default: Optional[LibPath] = None) -> Optional[LibPath]:
    return LibPath(value).expanduser() if value else default


@dataclass
class EngineConfig:
    backends: List[BackendSpec]
    agents: List[AgentProfile]
    weights: Dict[str, Dict[str, float]] = field(default_factory=dict)
    dimensions: Dict[str, Dict[str, str]] = field(default_factory=dict)
    golden: Dict[str, LibPath] = field(default_factory=dict)
    provider: Dict = field(default_factory=dict)
    cache: Dict = field(default_factory=dict)
    offline: Dict = field(default_factory=dict)
    state_dir: LibPath = LibPath("state")
    runs_dir: LibPath = LibPath("runs")
    prompt_dir: Optional[LibPath] = None
    language: str = "en"

    @classmethod
    def from_dict(cls, config: Mapping) -> "EngineConfig":
        """Validate a merged config dict and resolve its references.

        Raises:
          ConfigError: on invalid backends, agents, weights or provider kind.
        """
        try:
            backends = [BackendSpec.from_dict(b) for b in config.get("backends", [])]
            agents = [AgentProfile.from_dict(a) for a in config.get("agents", [])]
        except (GatewayError, SchedulerError) as exc:
            raise ConfigError(str(exc)) from exc
        backend_ids = {spec.backend_id for spec in backends}
        for agent in agents:
            if agent.backend_id not in backend_ids:
                raise ConfigError(
                    f"Agent {agent.agent_id} uses unknown backend {agent.backend_id}"
                )
        weights = {
            kind: {d: float(w) for d, w in dims.items()}
            for kind, dims in config.get("weights", {}).items()
        }
        for kind, dims in weights.items():
            try:
                validate_weights(dims)
            except SchedulerError as exc:
                raise ConfigError(f"weights.{kind}: {exc}") from exc
        provider = dict(config.get("provider", {}))
        if provider.get("kind", "finnhub") not in PROVIDER_KINDS:
            raise ConfigError(f"Unknown provider kind: {provider.get('kind')}")
        golden = {
            kind: _path(path, BUNDLED_GOLDEN_DIR / f"{kind}.jsonl")
            for kind, path in config.get("golden", {}).items()
        }
        return cls(
            backends=backends,
            agents=agents,
            weights=weights,
            dimensions={k: dict(v) for k, v in config.get("dimensions", {}).items()},
            golden=golden,
            provider=provider,
            cache=dict(config.get("cache", {})),
            offline=dict(config.get("offline", {})),
            state_dir=_path(config.get("state_dir", ""), LibPath("state")),
            runs_dir=_path(config.get("runs_dir", ""), LibPath("runs")),
            prompt_dir=_path(config.get("prompt_dir", "")),
            language=config.get("language", "en") or "en",
        )

    def mock_script_for(self, backend_id: str) -> LibPath:
        scripts = self.offline.get("scripts", {})
        if scripts.get(backend_id):
            return _path(scripts[backend_id])
        return _path(self.offline.get("script", ""), BUNDLED_MOCK_SCRIPT)


def make_provider(config: EngineConfig, offline: bool = False) -> Provider:
    settings = config.provider
    cache = ResponseCache(
        _path(config.cache.get("dir", "")),
        enabled=config.cache.get("enabled", True),
    )
    if offline or settings.get("kind") == "fixture":
        fixture_dir = _path(settings.get("fixture_dir", ""), BUNDLED_FIXTURE_DIR)
        return FixtureProvider(fixture_dir, cache)
    return FinnhubProvider(
        base_url=settings.get("base_url") or DEFAULT_FINNHUB_URL,
        token_env=settings.get("token_env", "FINNHUB_API_KEY"),
        cache=cache,
        timeout=float(settings.get("timeout", 10.0)),
    )


def build_engine(
    config: EngineConfig, offline: bool = False, cutoff: Optional[date] = None
) -> WorkflowEngine:
    """Wire gateway, scheduler and provider into a workflow engine.

    Offline engines swap every backend for its scripted mock, read market
    data from fixtures, never sleep between retries and run on a frozen
    clock anchored at the cutoff, so their artifacts are reproducible.
    Their scores live in a subdirectory of the state dir.
    """
    if offline:
        clock = FrozenClock.at(cutoff or OFFLINE_DATE)
        gateway = Gateway(
            requests.Session(), clock, sleep=lambda _: None, rng=random.Random(0)
        )
    else:
        clock = SystemClock()
        gateway = Gateway(requests.Session(), clock)
    for spec in config.backends:
        if offline:
            spec = script_mock(
                load_mock_script(config.mock_script_for(spec.backend_id)),
                backend_id=spec.backend_id,
                model_name=spec.model_name,
                max_retries=spec.max_retries,
            )
        gateway.register_backend(spec)
    gateway.seal()

    state_dir = config.state_dir / OFFLINE_STATE_DIR if offline else config.state_dir
    prompts = PromptStore([config.prompt_dir] if config.prompt_dir else None)
    scheduler = Scheduler(
        gateway,
        ScoreStore(state_dir),
        prompts,
        weights=config.weights,
        dimensions=config.dimensions,
        clock=clock,
    )
    for agent in config.agents:
        scheduler.register_agent(agent)
    return WorkflowEngine(
        gateway,
        scheduler,
        make_provider(config, offline),
        prompts,
        runs_dir=config.runs_dir,
        clock=clock,
        lookback_days=int(config.provider.get("lookback_days", 28)),
        max_news=int(config.provider.get("max_news", 5)),
    )


def evaluate_task_kind(
    engine: WorkflowEngine, config: EngineConfig, task_kind: str
) -> List[TaskScore]:
    path = config.golden.get(task_kind)
    if path is None:
        raise ConfigError(f"No golden dataset configured for {task_kind}")
    dataset = load_golden(path)
    weights = config.weights.get(task_kind)
    return engine.scheduler.evaluate_roster(task_kind, dataset, weights)


def ensure_scored(engine: WorkflowEngine, config: EngineConfig, task_kind: str) -> bool:
    """Run the initial scoring of a task kind once, if it was never scored.

    Scoring does not advance the engine clock, so a workflow that follows
    sees the same timestamps whether or not scores were already stored.
    """
    with engine.clock.suspended():
        try:
            engine.scheduler.rank_agents(task_kind)
            return False
        except NoScoredAgents:
            if task_kind not in config.golden:
                raise
        LOGGER.info("No scores for %s yet, running initial evaluation", task_kind)
        evaluate_task_kind(engine, config, task_kind)
        return True
