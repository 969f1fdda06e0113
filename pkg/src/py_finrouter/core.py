import json
import subprocess
import sys
from copy import deepcopy
from functools import partial
from importlib.metadata import PackageNotFoundError, version
from os import environ
from pathlib import Path as LibPath

import toml
from click import Choice, DateTime, argument, group, option, pass_context, secho
from click import Path as PathType
from yaspin import yaspin
from yaspin.spinners import Spinners

from py_finrouter.analytics import AnalyticsError
from py_finrouter.apps import (
    AppError,
    analyze_document,
    generate_report,
    render_forecast,
    run_forecaster,
)
from py_finrouter.config import (
    ConfigError,
    EngineConfig,
    build_engine,
    ensure_scored,
    evaluate_task_kind,
)
from py_finrouter.dataops import DataOpsError
from py_finrouter.dsl import DslError
from py_finrouter.gateway import GatewayError
from py_finrouter.prompts import PromptError
from py_finrouter.scheduler import SchedulerError
from py_finrouter.tools import ToolError
from py_finrouter.workflow import WorkflowError


DEFAULT_CONFIG_EDITOR = "vi"
DEFAULT_CONFIG_DIR = LibPath.home() / ".config" / "finrouter"
DEFAULT_CONFIG_FILE = DEFAULT_CONFIG_DIR / "config.toml"
DEFAULT_DATA_DIR = LibPath.home() / ".local" / "share" / "finrouter"
DEFAULT_CACHE_DIR = LibPath.home() / ".cache" / "finrouter"
DEFAULT_CONFIG = {
    "language": "en",
    "state_dir": str(DEFAULT_DATA_DIR / "state"),
    "runs_dir": "runs",
    "prompt_dir": "",
    "backends": [
        {
            "backend_id": "gpt-main",
            "base_url": "https://api.openai.com/v1",
            "model_name": "gpt-4o",
            "api_key_env": "OPENAI_API_KEY",
            "max_tokens": 1024,
            "temperature": 0.0,
            "timeout": 60.0,
            "max_retries": 2,
        },
        {
            "backend_id": "llama-local",
            "base_url": "http://localhost:8000/v1",
            "model_name": "llama-3-8b-instruct",
            "api_key_env": "",
            "max_tokens": 1024,
            "temperature": 0.0,
            "timeout": 120.0,
            "max_retries": 2,
        },
    ],
    "agents": [
        {
            "agent_id": "analyst-gpt",
            "backend_id": "gpt-main",
            "task_kinds": ["forecast", "report"],
        },
        {
            "agent_id": "analyst-llama",
            "backend_id": "llama-local",
            "task_kinds": ["forecast", "report"],
        },
    ],
    "weights": {},
    "dimensions": {"quality": {"template": "grade"}},
    # An empty path selects the bundled dataset of that task kind
    "golden": {"forecast": "", "report": ""},
    "provider": {
        "kind": "finnhub",
        "base_url": "https://finnhub.io/api/v1",
        "token_env": "FINNHUB_API_KEY",
        "fixture_dir": "",
        "lookback_days": 28,
        "max_news": 5,
        "timeout": 10.0,
    },
    "cache": {"enabled": True, "dir": str(DEFAULT_CACHE_DIR)},
    "offline": {"script": "", "scripts": {}},
}
DOMAIN_ERRORS = (
    AnalyticsError,
    AppError,
    ConfigError,
    DataOpsError,
    DslError,
    GatewayError,
    PromptError,
    SchedulerError,
    ToolError,
    WorkflowError,
)

info = partial(secho, bold=True, fg="green")
warn = partial(secho, bold=True, fg="yellow")


def package_version() -> str:
    """Installed version, or the source tree's own when not installed."""
    try:
        return version("py_finrouter")
    except PackageNotFoundError:
        from py_finrouter import __version__

        return __version__


def print_version(ctx, param, value):  # pylint: disable=unused-argument
    if not value or ctx.resilient_parsing:
        return
    info(f"finrouter version {package_version()}")
    ctx.exit()


def edit_config(ctx, param, value):  # pylint: disable=unused-argument
    """Create config file if not existed, then open in editor."""
    if not value or ctx.resilient_parsing:
        return
    config = DEFAULT_CONFIG
    config_file = DEFAULT_CONFIG_FILE
    if not config_file.exists():
        warn("No config file found, creating...")
        config_file.parent.mkdir(parents=True, exist_ok=True)
        with open(config_file, "w", encoding="utf8") as f:
            toml.dump(config, f)
        info(f"Default config file created: {config_file}")
    editor = environ.get("EDITOR", DEFAULT_CONFIG_EDITOR)
    subprocess.call([editor, config_file])
    ctx.exit()


def setup_config() -> EngineConfig:
    """Build the engine config from config file on top of default settings.

    Note `toml` should used as file format.
    Raises:
      SystemExit: if merged config checking failed.
    """
    config = deepcopy(DEFAULT_CONFIG)
    config_file = DEFAULT_CONFIG_FILE
    if config_file.exists():
        warn(f"Found config file: {config_file}")
        with open(config_file, encoding="utf8") as f:
            config.update(toml.load(f))
    try:
        return EngineConfig.from_dict(config)
    except ConfigError as exc:
        warn(f"Invalid config file {config_file}: {exc}")
        sys.exit(1)


def fail(exc: Exception):
    warn(f"{type(exc).__name__}: {exc}")
    sys.exit(1)


@group(context_settings={"help_option_names": ["-h", "--help"]})
@option(
    "-v",
    "--version",
    is_flag=True,
    callback=print_version,
    is_eager=True,
    expose_value=False,
    help="Show version info and exit.",
)
@option(
    "--edit-config",
    is_flag=True,
    callback=edit_config,
    is_eager=True,
    expose_value=False,
    help="Open config file with an editor.",
)
@pass_context
def cli(ctx):  # pylint: disable=unused-argument
    """Route financial analysis tasks to the best scored LLM agent.

    Score agents on golden datasets, then forecast or report:

        finrouter evaluate --offline

        finrouter forecast AAPL --cutoff 2024-04-19 --horizon 7 --offline
    """


@cli.command()
@option("-k", "--task-kind", type=str, default="", help="Only evaluate this kind.")
@option("--json", "as_json", is_flag=True, help="Print scores as JSON.")
@option("--offline", is_flag=True, help="Use mock backends and fixture data.")
def evaluate(task_kind, as_json, offline):
    """Score every agent on the golden datasets and print the ranking."""
    config = setup_config()
    kinds = [task_kind] if task_kind else sorted(config.golden)
    results = {}
    try:
        engine = build_engine(config, offline)
        with yaspin(Spinners.arc, text="Evaluating agents...") as sp:
            for kind in kinds:
                results[kind] = evaluate_task_kind(engine, config, kind)
                sp.write(f"> {kind}: {len(results[kind])} agents scored.")
    except DOMAIN_ERRORS as exc:
        fail(exc)

    if as_json:
        print(
            json.dumps(
                {k: [s.to_dict() for s in v] for k, v in results.items()},
                ensure_ascii=False,
                indent=2,
                sort_keys=True,
            )
        )
        return
    for kind, scores in results.items():
        info(f"[{kind}]")
        ranked = sorted(scores, key=lambda s: (-s.composite, s.agent_id))
        for position, score in enumerate(ranked, 1):
            raw = ", ".join(f"{d}={v:.3f}" for d, v in sorted(score.raw_scores.items()))
            print(f"{position}. {score.agent_id:<20} {score.composite:.4f}  {raw}")


@cli.command()
@argument("task_kind")
@option("--json", "as_json", is_flag=True, help="Print the ranking as JSON.")
@option("--offline", is_flag=True, help="Rank by the scores of offline runs.")
def route(task_kind, as_json, offline):
    """Show which agent a task kind is routed to."""
    config = setup_config()
    try:
        ranking = build_engine(config, offline).scheduler.rank_agents(task_kind)
    except DOMAIN_ERRORS as exc:
        fail(exc)
    if as_json:
        print(
            json.dumps(
                {
                    "task_kind": task_kind,
                    "agent_id": ranking[0][0],
                    "ranking": [{"agent_id": a, "composite": c} for a, c in ranking],
                },
                indent=2,
            )
        )
        return
    info(f"{task_kind} -> {ranking[0][0]}")
    for position, (agent_id, composite) in enumerate(ranking, 1):
        print(f"{position}. {agent_id:<20} {composite:.4f}")


@cli.command()
@argument("symbol")
@option("--cutoff", type=DateTime(formats=["%Y-%m-%d"]), required=True)
@option("--horizon", type=int, default=7, show_default=True, help="Days ahead.")
@option("--lang", type=Choice(["en", "zh"]), default=None, help="Output language.")
@option("--offline", is_flag=True, help="Use mock backends and fixture data.")
def forecast(symbol, cutoff, horizon, lang, offline):
    """Forecast next-period price movement of SYMBOL."""
    config = setup_config()
    cutoff = cutoff.date()
    result = None
    with yaspin(Spinners.arc, text=f"Forecasting {symbol}...") as sp:
        try:
            engine = build_engine(config, offline, cutoff)
            if ensure_scored(engine, config, "forecast"):
                sp.write("> Initial evaluation complete.")
            result = run_forecaster(
                engine, symbol, cutoff, horizon, language=lang or config.language
            )
        except DOMAIN_ERRORS as exc:
            sp.write("> Forecast failed.")
            fail(exc)
        sp.write("> Forecast ready.")
    print(render_forecast(result))
    info(f"Results written under {engine.runs_dir}")


@cli.command()
@argument("doc_path", type=PathType(exists=True, dir_okay=False))
@option("--symbol", type=str, default=None, help="Add peer ratio panels.")
@option("--cutoff", type=DateTime(formats=["%Y-%m-%d"]), default=None)
@option("--lang", type=Choice(["en", "zh"]), default=None, help="Output language.")
@option("--offline", is_flag=True, help="Use mock backends and fixture data.")
def report(doc_path, symbol, cutoff, lang, offline):
    """Analyze the text document DOC_PATH and write a report."""
    config = setup_config()
    cutoff = cutoff.date() if cutoff else None
    document = None
    with yaspin(Spinners.arc, text="Analyzing document...") as sp:
        try:
            engine = build_engine(config, offline, cutoff)
            if ensure_scored(engine, config, "report"):
                sp.write("> Initial evaluation complete.")
            insights = analyze_document(
                engine, LibPath(doc_path), cutoff, language=lang or config.language
            )
            sp.write(f"> {len(insights.indicators)} indicators extracted.")
            document = generate_report(engine, insights, symbol=symbol)
        except DOMAIN_ERRORS as exc:
            sp.write("> Report failed.")
            fail(exc)
        sp.write("> Report ready.")
    for item in insights.discrepancies:
        warn(f"Conflicting values for {item.name}: {', '.join(map(str, item.values))}")
    for failure in insights.failures:
        warn(str(failure))
    print(document.to_markdown())
    info(f"Results written under {engine.runs_dir}")


@cli.command()
def selfcheck():
    """Run the bundled conformance fixtures."""
    from py_finrouter.selfcheck import run_selfcheck

    results = run_selfcheck()
    for result in results:
        if result.passed:
            secho(f"PASS {result.name}", fg="green")
        else:
            secho(f"FAIL {result.name}: {result.detail}", fg="red")
    failed = [r for r in results if not r.passed]
    if failed:
        warn(f"{len(failed)} of {len(results)} checks failed.")
        sys.exit(1)
    info(f"All {len(results)} checks passed.")
