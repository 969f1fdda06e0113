"""Multi-agent financial workflow: perceive, plan, act, finalize.

A run is driven by four roles. The Director routes the task and closes the
run, the Assistant gathers data, the LLM Analyst plans and writes the
qualitative steps and the Financial Analyst computes figures and writes the
quantitative ones. Every action lands in the role trace, which is written
to `<runs_dir>/<task_id>/trace.jsonl` once the run succeeds.
"""
import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from logging import getLogger
from pathlib import Path as LibPath
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from py_finrouter.analytics import (
    AnalyticsError,
    RatioAnomaly,
    RatioPanel,
    log_return,
    normalize_ratio_panel,
    window_log_return,
)
from py_finrouter.clock import SystemClock
from py_finrouter.dataops import (
    BasicFinancials,
    CompanyBundle,
    CompanyProfile,
    DataOpsError,
    EmptyCorpus,
    EmptyQuery,
    NewsItem,
    Passage,
    PriceSeries,
    Provider,
    UnknownSymbol,
    chunk_text,
    company_bundle,
    index_documents,
    retrieve,
)
from py_finrouter.dsl import DslError
from py_finrouter.gateway import ChatExchange, ChatMessage, Gateway, GatewayError
from py_finrouter.prompts import PromptError, PromptStore
from py_finrouter.scheduler import Scheduler, SchedulerError, WorkflowEvaluation
from py_finrouter.tools import (
    NoCallBlock,
    ToolBox,
    ToolCall,
    ToolError,
    ToolParam,
    ToolSchema,
    run_code,
)

LOGGER = getLogger(__name__)

DIRECTOR = "Director"
ASSISTANT = "Assistant"
LLM_ANALYST = "LLM Analyst"
FINANCIAL_ANALYST = "Financial Analyst"

FINANCIAL_ANALYSIS = "financial_analysis"
BUSINESS_SPECIFIC = "business_specific"
MARKET_ANALYSIS = "market_analysis"
VALUATION = "valuation"
STEP_KINDS = (FINANCIAL_ANALYSIS, BUSINESS_SPECIFIC, MARKET_ANALYSIS, VALUATION)
FORECAST_STEPS = STEP_KINDS
REPORT_STEPS = (FINANCIAL_ANALYSIS, BUSINESS_SPECIFIC, VALUATION)
STEP_ROLES = {
    FINANCIAL_ANALYSIS: FINANCIAL_ANALYST,
    BUSINESS_SPECIFIC: LLM_ANALYST,
    MARKET_ANALYSIS: LLM_ANALYST,
    VALUATION: FINANCIAL_ANALYST,
}
# Data blocks shown to each step
STEP_CONTEXT = {
    FINANCIAL_ANALYSIS: ("financials", "passages"),
    BUSINESS_SPECIFIC: ("company", "passages"),
    MARKET_ANALYSIS: ("news",),
    VALUATION: ("prices", "financials", "passages"),
}

REPORT = "report"
LANGUAGES = ("en", "zh")
DEFAULT_QUERY = "revenue growth profit margin risk outlook"
TRACE_FILE = "trace.jsonl"
# Longest lookback a data tool may ask for
MAX_TOOL_DAYS = 3660
MOVEMENT = {
    "en": {"up": "increased", "down": "decreased", "flat": "stayed flat"},
    "zh": {"up": "上涨", "down": "下跌", "flat": "持平"},
}
EMPTY_BLOCK = {"en": "(none)", "zh": "（无）"}


class WorkflowError(Exception):
    pass


class InvalidTask(WorkflowError):
    pass


class InvalidPlan(WorkflowError):
    pass


class EmptyBundle(WorkflowError):
    pass


class StepFailure(WorkflowError):
    def __init__(self, step_index: int, cause: Exception, role: str = ""):
        self.step_index = step_index
        self.cause = cause
        self.role = role
        super().__init__(f"Step {step_index} failed: {cause}")


class ToolValidationFailure(StepFailure):
    pass


class RoleError(WorkflowError):
    def __init__(self, role: str, cause: Exception):
        self.role = role
        self.cause = cause
        super().__init__(f"{role}: {cause}")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-") or "task"


@dataclass(frozen=True)
class Task:
    task_id: str
    task_kind: str
    subject: str
    cutoff_date: date
    horizon_days: int = 7
    instruction_text: str = ""
    language: str = "en"

    def __post_init__(self):
        if self.language not in LANGUAGES:
            raise InvalidTask(f"Unsupported language: {self.language}")
        if self.task_kind != REPORT and self.horizon_days <= 0:
            raise InvalidTask("Forecast tasks need a positive horizon")

    @classmethod
    def create(
        cls,
        task_kind: str,
        subject: str,
        cutoff_date: date,
        horizon_days: int = 7,
        instruction_text: str = "",
        language: str = "en",
    ) -> "Task":
        """Build a task whose id is derived from its content."""
        cutoff = cutoff_date.isoformat()
        fields = [task_kind, subject, cutoff, horizon_days, instruction_text, language]
        digest = hashlib.sha256(json.dumps(fields, ensure_ascii=False).encode("utf8"))
        label = LibPath(subject).stem if task_kind == REPORT else subject
        task_id = f"{task_kind}-{_slug(label)}-{cutoff}-{digest.hexdigest()[:8]}"
        return cls(
            task_id,
            task_kind,
            subject,
            cutoff_date,
            horizon_days,
            instruction_text,
            language,
        )

    def horizon_window(self) -> Tuple[date, date]:
        """First and last business day of the horizon after the cutoff."""
        start = np.busday_offset(
            self.cutoff_date + timedelta(days=1), 0, roll="forward"
        )
        end = np.busday_offset(
            self.cutoff_date + timedelta(days=self.horizon_days), 0, roll="backward"
        )
        return start.item(), max(start, end).item()

    @property
    def acceptance_text(self) -> str:
        if self.task_kind == REPORT:
            return (
                f"A structured report on {self.subject} whose quantitative claims "
                "cite their sources."
            )
        start, end = self.horizon_window()
        return (
            f"A forecast for {self.subject} listing positive developments and "
            f"potential concerns, with a directional prediction for {start} to {end} "
            "and a supporting analysis."
        )


@dataclass(frozen=True)
class PerceptionBundle:
    company: Optional[CompanyBundle]
    retrieved_passages: Tuple[Passage, ...] = ()
    assembled_at: Optional[datetime] = None
    peer_financials: Dict[str, BasicFinancials] = field(default_factory=dict)

    @property
    def has_financials(self) -> bool:
        return bool(self.company and self.company.financials.ratios)

    @property
    def has_profile(self) -> bool:
        return bool(self.company and self.company.profile)

    @property
    def has_news(self) -> bool:
        return bool(self.company and self.company.news)

    @property
    def has_prices(self) -> bool:
        return bool(self.company and self.company.prices.observations)

    def is_empty(self) -> bool:
        no_company = self.company is None or self.company.is_empty()
        return no_company and not self.retrieved_passages


@dataclass(frozen=True)
class CoTStep:
    step_kind: str
    prompt_template_id: str
    depends_on: Tuple[int, ...] = ()


@dataclass(frozen=True)
class CoTPlan:
    steps: Tuple[CoTStep, ...]
    plan_rationale: str = ""

    @property
    def step_kinds(self) -> List[str]:
        return [step.step_kind for step in self.steps]


@dataclass(frozen=True)
class TraceEntry:
    role: str
    action: str
    timestamp: str
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "role": self.role,
            "action": self.action,
            "timestamp": self.timestamp,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class StepOutput:
    index: int
    step_kind: str
    role: str
    output: str
    exchange: ChatExchange
    tool_result: Optional[str] = None
    assessment: Optional[str] = None


@dataclass(frozen=True)
class ActFragment:
    steps: Tuple[StepOutput, ...]
    trace: Tuple[TraceEntry, ...]

    @property
    def outputs(self) -> List[str]:
        return [step.output for step in self.steps]


@dataclass(frozen=True)
class Computations:
    records: Dict[str, float] = field(default_factory=dict)
    anomalies: Tuple[RatioAnomaly, ...] = ()
    inputs: Dict[str, float] = field(default_factory=dict)
    text: str = ""


@dataclass
class ActContext:
    task: Task
    bundle: PerceptionBundle
    gateway: Gateway
    backend_id: str
    prompts: PromptStore
    bindings: Dict[str, str] = field(default_factory=dict)
    toolbox: Optional[ToolBox] = None
    clock: Any = None
    self_assess: bool = True
    on_step: Optional[Callable[[StepOutput], None]] = None


@dataclass(frozen=True)
class WorkflowResult:
    task_id: str
    agent_id: str
    plan: CoTPlan
    steps: Tuple[StepOutput, ...]
    final_output: str
    role_trace: Tuple[TraceEntry, ...]
    bundle: PerceptionBundle = field(compare=False, repr=False, default=None)
    computations: Computations = field(compare=False, repr=False, default=None)
    evaluation: Optional[WorkflowEvaluation] = None


# Data blocks


def describe_company(
    profile: Optional[CompanyProfile], prompts: PromptStore, language: str
) -> str:
    if profile is None:
        return ""
    return prompts.render(
        "block_company",
        {
            "name": profile.name or profile.symbol,
            "symbol": profile.symbol,
            "industry": profile.industry,
            "exchange": profile.exchange,
            "ipo": profile.ipo.isoformat() if profile.ipo else "-",
            "market_cap": str(profile.market_cap),
            "currency": profile.currency,
            "description": profile.description,
        },
        language,
    ).strip()


def describe_prices(prices: PriceSeries, prompts: PromptStore, language: str) -> str:
    if not prices.observations:
        return ""
    (start, first), (end, last) = prices.observations[0], prices.observations[-1]
    movement = "up" if last > first else "down" if last < first else "flat"
    return prompts.render(
        "block_prices",
        {
            "symbol": prices.symbol,
            "start": start.isoformat(),
            "end": end.isoformat(),
            "first": str(first),
            "last": str(last),
            "movement": MOVEMENT[language][movement],
        },
        language,
    ).strip()


def describe_news(news: Sequence[NewsItem]) -> str:
    return "\n\n".join(
        f"[{item.dated.isoformat()}] {item.headline}\n{item.summary}".strip()
        for item in news
    )


def describe_financials(
    symbol: str, financials: BasicFinancials, prompts: PromptStore, language: str
) -> str:
    if not financials.ratios:
        return ""
    lines = "\n".join(
        f"{name}: {value:g}" for name, value in sorted(financials.ratios.items())
    )
    return prompts.render(
        "block_financials",
        {
            "symbol": symbol,
            "period": financials.period.isoformat() if financials.period else "-",
            "ratios": lines,
        },
        language,
    ).strip()


def describe_passages(passages: Sequence[Passage]) -> str:
    return "\n\n".join(f"[ref:{p.source_id}] {p.text.strip()}" for p in passages)


def data_blocks(
    task: Task, bundle: PerceptionBundle, prompts: PromptStore
) -> Dict[str, str]:
    company = bundle.company
    language = task.language
    if company is None:
        blocks = {"company": "", "prices": "", "news": "", "financials": ""}
    else:
        blocks = {
            "company": describe_company(company.profile, prompts, language),
            "prices": describe_prices(company.prices, prompts, language),
            "news": describe_news(company.news),
            "financials": describe_financials(
                company.symbol, company.financials, prompts, language
            ),
        }
    blocks["passages"] = describe_passages(bundle.retrieved_passages)
    return blocks


# Perception


def read_document(path: LibPath) -> str:
    with open(path, encoding="utf8") as f:
        return f.read()


def perceive(
    task: Task,
    provider: Optional[Provider],
    clock=None,
    lookback_days: int = 28,
    max_news: int = 5,
    query: Optional[str] = None,
    k: int = 5,
    symbol: Optional[str] = None,
) -> PerceptionBundle:
    """Gather the task's data, keeping only what is dated before the cutoff.

    Forecast tasks get the company bundle and peer financials of
    `task.subject`. Report tasks retrieve passages from the document at
    `task.subject`, plus the company bundle of `symbol` when given.
    """
    clock = clock or SystemClock()
    passages: Tuple[Passage, ...] = ()
    if task.task_kind == REPORT:
        try:
            path = LibPath(task.subject)
            index = index_documents(chunk_text(read_document(path), path.name))
            query = query or task.instruction_text or DEFAULT_QUERY
            passages = tuple(retrieve(index, query, k))
        except (EmptyCorpus, EmptyQuery, OSError, UnicodeDecodeError) as exc:
            raise EmptyBundle(f"No usable passages in {task.subject}: {exc}") from exc
    else:
        symbol = task.subject

    company = None
    peers: Dict[str, BasicFinancials] = {}
    if symbol and provider is not None:
        company = company_bundle(
            provider, symbol, task.cutoff_date, lookback_days, max_news
        )
        as_of = task.cutoff_date - timedelta(days=1)
        for peer in provider.get_peers(symbol):
            if peer == symbol:
                continue
            try:
                peers[peer] = provider.get_basic_financials(peer, as_of)
            except UnknownSymbol:
                LOGGER.debug("No financials for peer %s", peer)

    bundle = PerceptionBundle(company, passages, clock.now(), peers)
    if bundle.is_empty():
        raise EmptyBundle(f"No data for {task.subject} before {task.cutoff_date}")
    return bundle


# Planning


def _requirements(task: Task, bundle: PerceptionBundle) -> Dict[str, Tuple[bool, str]]:
    passages = bool(bundle.retrieved_passages)
    return {
        FINANCIAL_ANALYSIS: (
            bundle.has_financials or (task.task_kind == REPORT and passages),
            "no basic financials",
        ),
        BUSINESS_SPECIFIC: (bundle.has_profile or passages, "no company profile"),
        MARKET_ANALYSIS: (bundle.has_news, "no recent news"),
        VALUATION: (
            bundle.has_prices
            or bundle.has_financials
            or (task.task_kind == REPORT and passages),
            "no prices or financials",
        ),
    }


def plan_cot(task: Task, bundle: PerceptionBundle) -> CoTPlan:
    """Default step sequence for the task kind, pruned for missing data."""
    if bundle is None or bundle.is_empty():
        raise EmptyBundle(f"Nothing to plan for {task.task_id}")
    kinds = REPORT_STEPS if task.task_kind == REPORT else FORECAST_STEPS
    requirements = _requirements(task, bundle)
    steps: List[CoTStep] = []
    notes = []
    for kind in kinds:
        satisfied, reason = requirements[kind]
        if not satisfied:
            notes.append(
                f"pruned {kind}: {reason} before {task.cutoff_date.isoformat()}"
            )
            continue
        depends_on = (len(steps) - 1,) if steps else ()
        steps.append(CoTStep(kind, f"cot_{kind}", depends_on))
    if not steps:
        raise EmptyBundle(f"Every step was pruned for {task.task_id}")
    rationale = f"{task.task_kind} plan: {' -> '.join(s.step_kind for s in steps)}"
    if notes:
        rationale += "; " + "; ".join(notes)
    return CoTPlan(tuple(steps), rationale)


def validate_plan(plan: CoTPlan) -> None:
    if not plan.steps:
        raise InvalidPlan("Plan has no steps")
    for index, step in enumerate(plan.steps):
        if step.step_kind not in STEP_KINDS:
            raise InvalidPlan(f"Step {index} has unknown kind {step.step_kind}")
        for dependency in step.depends_on:
            if not 0 <= dependency < index:
                raise InvalidPlan(f"Step {index} depends on step {dependency}")


# Financial Analyst figures


def _identifier(name: str) -> str:
    ident = re.sub(r"\W", "_", name)
    return f"_{ident}" if ident[:1].isdigit() else ident


def financial_computations(bundle: PerceptionBundle) -> Computations:
    """Log-returns of the price window and peer z-scores of every ratio."""
    company = bundle.company
    if company is None:
        return Computations()
    records: Dict[str, float] = {}
    inputs: Dict[str, float] = {}
    anomalies: List[RatioAnomaly] = []
    lines: List[str] = []

    prices = company.prices
    if len(prices) >= 2:
        daily = log_return(prices, 1)
        window = window_log_return(prices)
        records["return:window"] = window
        inputs["window_return"] = window
        inputs["last_close"] = float(prices.observations[-1][1])
        inputs["first_close"] = float(prices.observations[0][1])
        lines.append(
            f"[ref:return:window] log-return {prices.dates[0].isoformat()} to "
            f"{prices.dates[-1].isoformat()}: {window:.6f}"
        )
        lines.append(
            "one-day log-returns: "
            + ", ".join(f"{day.isoformat()} {value:.6f}" for day, value in daily)
        )

    for name, value in sorted(company.financials.ratios.items()):
        inputs[_identifier(name)] = float(value)
        values = {company.symbol: float(value)}
        values.update(
            (peer, float(fin.ratios[name]))
            for peer, fin in sorted(bundle.peer_financials.items())
            if name in fin.ratios
        )
        if len(values) < 2:
            continue
        try:
            anomaly = normalize_ratio_panel(RatioPanel(name, values, company.symbol))
        except AnalyticsError as exc:
            LOGGER.debug("Skip ratio %s: %s", name, exc)
            continue
        anomalies.append(anomaly)
        if anomaly.zscore is None:
            lines.append(
                f"[ref:{anomaly.record_id}] {name} = {value:g}, peers identical"
            )
            continue
        records[anomaly.record_id] = anomaly.zscore
        inputs[f"{_identifier(name)}_z"] = anomaly.zscore
        lines.append(
            f"[ref:{anomaly.record_id}] {name} = {value:g}, peer z-score "
            f"{anomaly.zscore:.3f} ({anomaly.flag}, {anomaly.peer_count} companies)"
        )
    return Computations(records, tuple(anomalies), inputs, "\n".join(lines))


# Tools


def make_toolbox(
    task: Task, provider: Optional[Provider], inputs: Mapping[str, float]
) -> ToolBox:
    """Built-in tools; every data tool is clipped to the task cutoff."""
    toolbox = ToolBox()
    last_day = task.cutoff_date - timedelta(days=1)

    def window_start(days: int) -> date:
        return task.cutoff_date - timedelta(days=min(max(days, 1), MAX_TOOL_DAYS))

    def get_price_window(symbol: str, days: int) -> str:
        try:
            series = provider.get_price_window(symbol, window_start(days), last_day)
        except DataOpsError as exc:
            return f"error: {exc}"
        closes = ", ".join(f"{d.isoformat()} {p}" for d, p in series.observations)
        return closes or "no prices"

    def get_news(symbol: str, days: int) -> str:
        try:
            news = provider.get_news(symbol, window_start(days), last_day)
        except DataOpsError as exc:
            return f"error: {exc}"
        headlines = "\n".join(f"[{n.dated.isoformat()}] {n.headline}" for n in news)
        return headlines or "no news"

    def compute(expression: str) -> str:
        artifact = run_code(expression, inputs)
        if artifact.error:
            return f"error: {artifact.error}"
        return f"{artifact.result:.6g}"

    if provider is not None:
        toolbox.register(
            ToolSchema(
                "get_price_window",
                "daily closes of a symbol over the last days before the cutoff",
                (ToolParam("symbol", "string"), ToolParam("days", "integer")),
            ),
            get_price_window,
        )
        toolbox.register(
            ToolSchema(
                "get_news",
                "headlines about a symbol over the last days before the cutoff",
                (ToolParam("symbol", "string"), ToolParam("days", "integer")),
            ),
            get_news,
        )
    variables = ", ".join(sorted(inputs)) or "none"
    toolbox.register(
        ToolSchema(
            "compute",
            f"evaluate an arithmetic expression; variables: {variables}",
            (ToolParam("expression", "string"),),
        ),
        compute,
    )
    return toolbox


def _jsonable(arguments: Mapping[str, Any]) -> Dict[str, Any]:
    return {
        k: v.isoformat() if isinstance(v, date) else v for k, v in arguments.items()
    }


# Action


def act(plan: CoTPlan, context: ActContext) -> ActFragment:
    """Run the plan's steps in order, threading outputs to dependents."""
    validate_plan(plan)
    clock = context.clock or SystemClock()
    language = context.task.language
    empty = EMPTY_BLOCK[language]
    toolbox = context.toolbox or ToolBox()
    outputs: List[StepOutput] = []
    trace: List[TraceEntry] = []

    def note(role: str, action: str, **detail):
        trace.append(TraceEntry(role, action, clock.now().isoformat(), detail))

    for index, step in enumerate(plan.steps):
        role = STEP_ROLES[step.step_kind]
        bindings = dict(context.bindings)
        bindings["context"] = "\n\n".join(
            context.bindings[block]
            for block in STEP_CONTEXT[step.step_kind]
            if context.bindings.get(block)
        ) or empty
        bindings["previous"] = "\n\n".join(
            f"[{outputs[i].step_kind}]\n{outputs[i].output}" for i in step.depends_on
        ) or empty
        bindings["tool_results"] = "\n".join(
            outputs[i].tool_result
            for i in step.depends_on
            if outputs[i].tool_result
        ) or empty
        bindings["tools"] = toolbox.describe() or empty
        bindings["role"] = role
        try:
            system = context.prompts.render("cot_system", bindings, language)
            user = context.prompts.render(step.prompt_template_id, bindings, language)
            messages = [ChatMessage("system", system), ChatMessage("user", user)]
            note(role, "prompt", step=index, step_kind=step.step_kind, prompt=user)
            exchange = context.gateway.chat(context.backend_id, messages)
        except (GatewayError, PromptError) as exc:
            raise StepFailure(index, exc, role) from exc
        reply = exchange.response_text
        note(
            role,
            "reply",
            step=index,
            step_kind=step.step_kind,
            attempts=exchange.attempt_count,
            text=reply,
        )

        tool_result = None
        try:
            call: Optional[ToolCall] = toolbox.parse(reply)
        except NoCallBlock:
            call = None
        except ToolError as exc:
            raise ToolValidationFailure(index, exc, role) from exc
        if call is not None:
            try:
                result = toolbox.execute(call)
            except (ToolError, DslError, DataOpsError) as exc:
                raise ToolValidationFailure(index, exc, role) from exc
            tool_result = f"{call.tool_name}: {result}"
            note(
                role,
                "tool_call",
                step=index,
                tool=call.tool_name,
                args=_jsonable(call.arguments),
                result=result,
            )

        assessment = None
        if context.self_assess:
            try:
                prompt = context.prompts.render(
                    "self_assess",
                    {"step_kind": step.step_kind, "output": reply, "role": role},
                    language,
                )
                assessment = context.gateway.chat(
                    context.backend_id, [ChatMessage("user", prompt)]
                ).response_text
            except (GatewayError, PromptError) as exc:
                raise StepFailure(index, exc, role) from exc
            note(role, "self_assess", step=index, text=assessment)

        output = StepOutput(
            index, step.step_kind, role, reply, exchange, tool_result, assessment
        )
        outputs.append(output)
        if context.on_step is not None:
            context.on_step(output)
    return ActFragment(tuple(outputs), tuple(trace))


# Orchestration

Synthesizer = Callable[
    [Task, PerceptionBundle, Sequence[StepOutput], Computations], List[ChatMessage]
]


class WorkflowEngine:
    """Runs tasks end to end over a gateway, scheduler and data provider."""

    def __init__(
        self,
        gateway: Gateway,
        scheduler: Scheduler,
        provider: Optional[Provider] = None,
        prompts: Optional[PromptStore] = None,
        runs_dir: LibPath = LibPath("runs"),
        clock=None,
        lookback_days: int = 28,
        max_news: int = 5,
        retrieval_k: int = 5,
        self_assess: bool = True,
    ):
        self.gateway = gateway
        self.scheduler = scheduler
        self.provider = provider
        self.prompts = prompts or PromptStore()
        self.runs_dir = LibPath(runs_dir)
        self.clock = clock or SystemClock()
        self.lookback_days = lookback_days
        self.max_news = max_news
        self.retrieval_k = retrieval_k
        self.self_assess = self_assess

    def run_dir(self, task: Task) -> LibPath:
        return self.runs_dir / task.task_id

    def perceive(
        self, task: Task, query: Optional[str] = None, symbol: Optional[str] = None
    ) -> PerceptionBundle:
        return perceive(
            task,
            self.provider,
            self.clock,
            self.lookback_days,
            self.max_news,
            query=query,
            k=self.retrieval_k,
            symbol=symbol,
        )

    def run_workflow(
        self,
        task: Task,
        synthesizer: Optional[Synthesizer] = None,
        query: Optional[str] = None,
        symbol: Optional[str] = None,
        persist: bool = True,
    ) -> WorkflowResult:
        """Route, perceive, plan, act and finalize one task.

        With `persist`, the role trace is written once the run succeeds;
        callers that post-process the output write it themselves.
        """
        trace: List[TraceEntry] = []

        def note(role: str, action: str, **detail):
            trace.append(TraceEntry(role, action, self.clock.now().isoformat(), detail))

        try:
            agent_id = self.scheduler.route(task)
            backend_id = self.scheduler.get_agent(agent_id).backend_id
        except SchedulerError as exc:
            raise RoleError(DIRECTOR, exc) from exc
        note(
            DIRECTOR,
            "route",
            task_id=task.task_id,
            task_kind=task.task_kind,
            agent_id=agent_id,
            ranking=[[a, c] for a, c in self.scheduler.last_ranking],
        )
        self.scheduler.begin_workflow(
            task.task_id, task, agent_id, task.acceptance_text
        )

        try:
            bundle = self.perceive(task, query=query, symbol=symbol)
        except (WorkflowError, DataOpsError) as exc:
            raise RoleError(ASSISTANT, exc) from exc
        note(
            ASSISTANT,
            "perceive",
            prices=len(bundle.company.prices) if bundle.company else 0,
            news=len(bundle.company.news) if bundle.company else 0,
            ratios=len(bundle.company.financials.ratios) if bundle.company else 0,
            peers=sorted(bundle.peer_financials),
            passages=[[p.source_id, p.score] for p in bundle.retrieved_passages],
        )

        try:
            plan = plan_cot(task, bundle)
        except WorkflowError as exc:
            raise RoleError(LLM_ANALYST, exc) from exc
        note(LLM_ANALYST, "plan", steps=plan.step_kinds, rationale=plan.plan_rationale)

        computations = financial_computations(bundle)
        note(FINANCIAL_ANALYST, "compute", records=computations.records)

        bindings = data_blocks(task, bundle, self.prompts)
        bindings.update(
            {
                "subject": task.subject,
                "cutoff": task.cutoff_date.isoformat(),
                "instruction": task.instruction_text or task.acceptance_text,
                "computations": computations.text or EMPTY_BLOCK[task.language],
            }
        )

        def on_step(output: StepOutput):
            self.scheduler.record_step(
                task.task_id, output.index, output.step_kind, output.output
            )
            if output.assessment is not None:
                self.scheduler.record_reflection(
                    agent_id, task.task_id, output.assessment
                )

        context = ActContext(
            task=task,
            bundle=bundle,
            gateway=self.gateway,
            backend_id=backend_id,
            prompts=self.prompts,
            bindings=bindings,
            toolbox=make_toolbox(task, self.provider, computations.inputs),
            clock=self.clock,
            self_assess=self.self_assess,
            on_step=on_step,
        )
        try:
            fragment = act(plan, context)
        except StepFailure as exc:
            raise RoleError(exc.role or LLM_ANALYST, exc) from exc
        except WorkflowError as exc:
            raise RoleError(LLM_ANALYST, exc) from exc
        trace.extend(fragment.trace)

        if synthesizer is None:
            final_output = "\n\n".join(
                f"[{step.step_kind}]\n{step.output}" for step in fragment.steps
            )
        else:
            try:
                messages = synthesizer(task, bundle, fragment.steps, computations)
                note(
                    LLM_ANALYST, "prompt", step="synthesis", prompt=messages[-1].content
                )
                exchange = self.gateway.chat(backend_id, messages)
            except (GatewayError, PromptError, WorkflowError) as exc:
                raise RoleError(LLM_ANALYST, exc) from exc
            final_output = exchange.response_text
            note(
                LLM_ANALYST,
                "reply",
                step="synthesis",
                attempts=exchange.attempt_count,
                text=final_output,
            )

        self.scheduler.complete_workflow(task.task_id, final_output)
        try:
            evaluation = self.scheduler.finalize_workflow(task.task_id)
        except SchedulerError as exc:
            raise RoleError(DIRECTOR, exc) from exc
        note(
            DIRECTOR,
            "finalize",
            grade=evaluation.grade,
            mean_self_score=evaluation.mean_self_score,
            reflections=evaluation.reflection_count,
        )

        result = WorkflowResult(
            task_id=task.task_id,
            agent_id=agent_id,
            plan=plan,
            steps=fragment.steps,
            final_output=final_output,
            role_trace=tuple(trace),
            bundle=bundle,
            computations=computations,
            evaluation=evaluation,
        )
        if persist:
            self.write_trace(task, result.role_trace)
        return result

    def write_trace(self, task: Task, trace: Sequence[TraceEntry]) -> LibPath:
        run_dir = self.run_dir(task)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / TRACE_FILE
        with open(path, "w", encoding="utf8") as f:
            for entry in trace:
                line = json.dumps(entry.to_dict(), ensure_ascii=False, sort_keys=True)
                f.write(line + "\n")
        LOGGER.debug("Trace of %s written to %s", task.task_id, path)
        return path
