"""The market forecaster and the document analysis / report generator."""
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime
from decimal import Decimal
from logging import getLogger
from pathlib import Path as LibPath
from typing import Dict, List, Optional, Sequence, Tuple

import toml

from py_finrouter.dataops import (
    CompanyBundle,
    EmptyCorpus,
    EmptyQuery,
    Passage,
    chunk_text,
    index_documents,
    retrieve,
    tokenize,
)
from py_finrouter.gateway import ChatMessage, GatewayError
from py_finrouter.prompts import PromptError, PromptStore
from py_finrouter.scheduler import SchedulerError
from py_finrouter.tools import (
    NoCallBlock,
    ToolError,
    ToolParam,
    ToolSchema,
    text2params,
)
from py_finrouter.workflow import (
    ASSISTANT,
    DIRECTOR,
    EMPTY_BLOCK,
    FINANCIAL_ANALYST,
    LLM_ANALYST,
    REPORT,
    Computations,
    PerceptionBundle,
    RoleError,
    StepOutput,
    Task,
    TraceEntry,
    WorkflowEngine,
    describe_company,
    describe_financials,
    describe_news,
    describe_passages,
    describe_prices,
    read_document,
)

LOGGER = getLogger(__name__)

HEADER_TABLE_FILE = LibPath(__file__).parent / "data" / "forecast_headers.toml"
SECTION_ORDER = ("positive", "concerns", "prediction")
MAX_ITEMS = 4
NUMBER = r"\d+(?:\.\d+)?"
ITEM = re.compile(r"^\s*(?:\d+\s*[.)、．]|[-*•])\s*(?P<text>.+?)\s*$")
TAG = re.compile(r"\s*[(（]\s*(?P<tag>[^()（）]+?)\s*[)）]\s*[.。]?\s*$")
REF = re.compile(r"\[ref:([^\]\s]+)\]")
FORECAST_FILE = "forecast.json"
REPORT_MD_FILE = "report.md"
REPORT_TXT_FILE = "report.txt"
STAGES = {
    DIRECTOR: "route",
    ASSISTANT: "perceive",
    LLM_ANALYST: "analyze",
    FINANCIAL_ANALYST: "analyze",
}

DEFAULT_TOPICS = (
    "revenue",
    "net income",
    "gross margin",
    "operating cash flow",
    "total debt",
)
UNIT_MULTIPLIERS = {
    "unit": Decimal(1),
    "thousand": Decimal(10) ** 3,
    "million": Decimal(10) ** 6,
    "billion": Decimal(10) ** 9,
    "percent": Decimal("0.01"),
}
DISCREPANCY_TOLERANCE = 0.01
RECORD_INDICATOR = ToolSchema(
    "record_indicator",
    "record one financial indicator stated in the passage",
    (
        ToolParam("name", "string"),
        ToolParam("value", "number"),
        ToolParam("unit", "enum", required=False, values=tuple(UNIT_MULTIPLIERS)),
    ),
)


class AppError(Exception):
    pass


class IncompleteBundle(AppError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"Company bundle is missing {block}")


class EmptyOutput(AppError):
    pass


class MissingSection(AppError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Missing section: {name}")


class MalformedSection(AppError):
    def __init__(self, name: str, reason: str):
        self.name = name
        self.reason = reason
        super().__init__(f"Section {name}: {reason}")


class UnparseablePrediction(AppError):
    def __init__(self, text: str):
        self.text = text
        super().__init__(f"No prediction found in: {text[:80]!r}")


class UnreadableDocument(AppError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"Cannot read {path}: {reason}")


class ExtractionFailure(AppError):
    def __init__(self, topic: str, cause: Exception):
        self.topic = topic
        self.cause = cause
        super().__init__(f"Extraction failed for {topic}: {cause}")


class EmptyInsights(AppError):
    pass


class InvalidOutline(AppError):
    pass


class StageError(AppError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


# Header and tag tables


def _alternation(words: Sequence[str]) -> str:
    return "|".join(re.escape(w) for w in sorted(set(words), key=len, reverse=True))


class HeaderTable:
    """Bilingual section, tag and direction vocabulary of the parser."""

    def __init__(self, data: Dict):
        self.data = data
        self.section_names = {
            key: data["sections"][key]["name"] for key in SECTION_ORDER
        }
        self._aliases = {
            alias.casefold(): key
            for key in SECTION_ORDER
            for alias in data["sections"][key]["aliases"]
        }
        self._tags = {
            alias.casefold(): tag
            for tag, aliases in data["tags"].items()
            for alias in aliases
        }
        self._directions = {
            alias.casefold(): direction
            for direction, aliases in data["directions"].items()
            for alias in aliases
        }
        self.header = re.compile(
            r"^[ \t]*[*#]*[ \t]*(?P<open>[\[【])?[ \t]*"
            rf"(?P<name>{_alternation(list(self._aliases))})"
            r"[ \t]*(?P<close>[\]】])?[ \t]*[:：]?[ \t]*\**[ \t]*(?P<rest>.*)$",
            re.IGNORECASE | re.MULTILINE,
        )
        self.prediction = re.compile(
            rf"(?<![A-Za-z])(?P<direction>{_alternation(list(self._directions))})"
            rf"\s*(?:by\s+)?(?P<low>{NUMBER})\s*[%％]?"
            rf"(?:\s*(?:-|–|—|~|to|至|到)\s*(?P<high>{NUMBER}))?\s*[%％]",
            re.IGNORECASE,
        )
        self.labels = {
            kind: re.compile(
                rf"^\s*(?:{_alternation(words)})\s*[:：]\s*", re.IGNORECASE
            )
            for kind, words in data["labels"].items()
        }

    @classmethod
    def load(cls, path: LibPath = HEADER_TABLE_FILE) -> "HeaderTable":
        with open(path, encoding="utf8") as f:
            return cls(toml.load(f))

    def section_key(self, alias: str) -> str:
        return self._aliases[alias.casefold()]

    def tag(self, text: str) -> Optional[str]:
        return self._tags.get(text.casefold())

    def direction(self, text: str) -> str:
        return self._directions[text.casefold()]

    def render(self, language: str) -> Dict[str, str]:
        return self.data["render"].get(language, self.data["render"]["en"])

    def period(self, language: str, horizon_days: int) -> str:
        period = self.data["period"].get(language, self.data["period"]["en"])
        if horizon_days == 7:
            return period["week"]
        return period["days"].format(days=horizon_days)


_TABLE: Optional[HeaderTable] = None


def header_table() -> HeaderTable:
    global _TABLE
    if _TABLE is None:
        _TABLE = HeaderTable.load()
    return _TABLE


# Forecasts


@dataclass(frozen=True)
class ForecastItem:
    text: str
    evidence_tag: Optional[str] = None
    # Tag text that is not in the tag table, kept as written
    other_tag: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            "text": self.text,
            "evidence_tag": self.evidence_tag,
            "other_tag": self.other_tag,
        }


@dataclass(frozen=True)
class ForecastResult:
    symbol: str
    as_of: Optional[date]
    horizon_start: Optional[date]
    horizon_end: Optional[date]
    positive_developments: Tuple[ForecastItem, ...]
    potential_concerns: Tuple[ForecastItem, ...]
    direction: str
    move_low_pct: float
    move_high_pct: float
    analysis_text: str
    language: str = "en"

    def to_dict(self) -> Dict:
        def iso(day: Optional[date]) -> Optional[str]:
            return day.isoformat() if day else None

        return {
            "symbol": self.symbol,
            "as_of": iso(self.as_of),
            "horizon_start": iso(self.horizon_start),
            "horizon_end": iso(self.horizon_end),
            "positive_developments": [i.to_dict() for i in self.positive_developments],
            "potential_concerns": [i.to_dict() for i in self.potential_concerns],
            "direction": self.direction,
            "move_low_pct": self.move_low_pct,
            "move_high_pct": self.move_high_pct,
            "analysis_text": self.analysis_text,
            "language": self.language,
        }


def forecast_instruction(
    symbol: str,
    cutoff: date,
    horizon: Tuple[date, date],
    language: str = "en",
    horizon_days: int = 7,
    prompts: Optional[PromptStore] = None,
) -> str:
    prompts = prompts or PromptStore()
    return prompts.render(
        "forecast_instruction",
        {
            "symbol": symbol,
            "cutoff": cutoff.isoformat(),
            "start": horizon[0].isoformat(),
            "end": horizon[1].isoformat(),
            "period": header_table().period(language, horizon_days),
        },
        language,
    ).strip()


def build_forecast_prompt(
    bundle: CompanyBundle,
    cutoff: date,
    horizon: Tuple[date, date],
    language: str = "en",
    prompts: Optional[PromptStore] = None,
    notes: str = "",
    horizon_days: int = 7,
) -> List[ChatMessage]:
    """System instruction plus the information blocks a-d and the dated ask."""
    prompts = prompts or PromptStore()
    if bundle.profile is None:
        raise IncompleteBundle("company_introduction")
    if not bundle.prices.observations:
        raise IncompleteBundle("stock_price_changes")
    if not bundle.news:
        raise IncompleteBundle("recent_news")
    if not bundle.financials.ratios:
        raise IncompleteBundle("basic_financials")
    notes_block = ""
    if notes:
        notes_block = "\n" + prompts.render(
            "forecast_notes", {"notes": notes}, language
        )
    user = prompts.render(
        "forecast_user",
        {
            "company": describe_company(bundle.profile, prompts, language),
            "prices": describe_prices(bundle.prices, prompts, language),
            "news": describe_news(bundle.news),
            "financials": describe_financials(
                bundle.symbol, bundle.financials, prompts, language
            ),
            "notes": notes_block,
            "instruction": forecast_instruction(
                bundle.symbol, cutoff, horizon, language, horizon_days, prompts
            ),
        },
        language,
    )
    system = prompts.render("forecast_system", {}, language)
    return [ChatMessage("system", system.strip()), ChatMessage("user", user.strip())]


def _sections(text: str, table: HeaderTable) -> Dict[str, str]:
    found: List[Tuple[str, int, int]] = []
    for match in table.header.finditer(text):
        if not match.group("open") and match.group("rest").strip():
            continue
        key = table.section_key(match.group("name"))
        if key not in (k for k, _, _ in found):
            found.append((key, match.start(), match.start("rest")))
    found.sort(key=lambda item: item[1])
    sections = {}
    for position, (key, _, body_start) in enumerate(found):
        end = found[position + 1][1] if position + 1 < len(found) else len(text)
        sections[key] = text[body_start:end]
    return sections


def _items(body: str, name: str, table: HeaderTable) -> Tuple[ForecastItem, ...]:
    texts: List[str] = []
    for line in body.splitlines():
        match = ITEM.match(line)
        if match:
            texts.append(match.group("text"))
        elif texts and line.strip():
            texts[-1] = f"{texts[-1]} {line.strip()}"
    if not texts:
        raise MalformedSection(name, "no items")
    if len(texts) > MAX_ITEMS:
        LOGGER.warning(
            "%s has %d items, keeping the first %d", name, len(texts), MAX_ITEMS
        )
        texts = texts[:MAX_ITEMS]
    items = []
    for text in texts:
        match = TAG.search(text)
        if not match:
            items.append(ForecastItem(text.strip()))
            continue
        raw = match.group("tag")
        tag = table.tag(raw)
        items.append(
            ForecastItem(text[: match.start()].strip(), tag, None if tag else raw)
        )
    return tuple(items)


def parse_forecast(
    model_text: str,
    language: str = "en",
    symbol: str = "",
    as_of: Optional[date] = None,
    horizon: Optional[Tuple[date, date]] = None,
) -> ForecastResult:
    if not model_text or not model_text.strip():
        raise EmptyOutput("Forecast text is empty")
    table = header_table()
    sections = _sections(model_text, table)
    for key in SECTION_ORDER:
        if key not in sections:
            raise MissingSection(table.section_names[key])

    prediction = None
    analysis_lines = []
    for line in sections["prediction"].splitlines():
        line = line.strip()
        if not line:
            continue
        if prediction is None:
            prediction = table.prediction.search(line)
            if prediction is not None:
                continue
        analysis_lines.append(table.labels["analysis"].sub("", line, count=1))
    if prediction is None:
        raise UnparseablePrediction(sections["prediction"].strip())
    low = float(prediction.group("low"))
    high = float(prediction.group("high") or low)
    if low > high:
        LOGGER.warning("Prediction bounds reversed (%s, %s), swapping", low, high)
        low, high = high, low

    return ForecastResult(
        symbol=symbol,
        as_of=as_of,
        horizon_start=horizon[0] if horizon else None,
        horizon_end=horizon[1] if horizon else None,
        positive_developments=_items(
            sections["positive"], table.section_names["positive"], table
        ),
        potential_concerns=_items(
            sections["concerns"], table.section_names["concerns"], table
        ),
        direction=table.direction(prediction.group("direction")),
        move_low_pct=low,
        move_high_pct=high,
        analysis_text="\n".join(analysis_lines),
        language=language,
    )


def _number(value: float) -> str:
    return f"{value:g}"


def render_forecast(result: ForecastResult) -> str:
    """Canonical text of a forecast in its own language."""
    words = header_table().render(result.language)

    def items(values: Sequence[ForecastItem]) -> List[str]:
        lines = []
        for index, item in enumerate(values, 1):
            tag = item.evidence_tag or item.other_tag
            lines.append(f"{index}. {item.text}" + (f" ({tag})" if tag else ""))
        return lines

    lines = [words["positive"], *items(result.positive_developments), ""]
    lines += [words["concerns"], *items(result.potential_concerns), ""]
    lines += [
        words["prediction"],
        words["prediction_line"].format(
            direction=words[result.direction],
            low=_number(result.move_low_pct),
            high=_number(result.move_high_pct),
        ),
    ]
    if result.analysis_text:
        lines.append(words["analysis_line"].format(analysis=result.analysis_text))
    return "\n".join(lines) + "\n"


def _stage_error(exc: RoleError) -> StageError:
    return StageError(STAGES.get(exc.role, "analyze"), exc.cause)


def _write_json(path: LibPath, data: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf8") as f:
        f.write(json.dumps(data, ensure_ascii=False, sort_keys=True, indent=2) + "\n")


def run_forecaster(
    engine: WorkflowEngine,
    symbol: str,
    cutoff: date,
    horizon_days: int = 7,
    task_kind: str = "forecast",
    language: str = "en",
) -> ForecastResult:
    """Perceive, analyze, prompt, parse; persist forecast.json and the trace."""
    draft = Task.create(task_kind, symbol, cutoff, horizon_days, "", language)
    window = draft.horizon_window()
    instruction = forecast_instruction(
        symbol, cutoff, window, language, horizon_days, engine.prompts
    )
    task = Task.create(task_kind, symbol, cutoff, horizon_days, instruction, language)

    def synthesize(
        task: Task,
        bundle: PerceptionBundle,
        steps: Sequence[StepOutput],
        computations: Computations,
    ) -> List[ChatMessage]:
        notes = "\n\n".join(f"[{s.step_kind}]\n{s.output.strip()}" for s in steps)
        if computations.text:
            notes = f"{computations.text}\n\n{notes}"
        try:
            return build_forecast_prompt(
                bundle.company,
                cutoff,
                window,
                language,
                engine.prompts,
                notes,
                horizon_days,
            )
        except AppError as exc:
            raise StageError("prompt", exc) from exc

    try:
        result = engine.run_workflow(task, synthesize, persist=False)
    except RoleError as exc:
        raise _stage_error(exc) from exc
    try:
        forecast = parse_forecast(result.final_output, language, symbol, cutoff, window)
    except AppError as exc:
        raise StageError("parse", exc) from exc

    run_dir = engine.run_dir(task)
    _write_json(run_dir / FORECAST_FILE, forecast.to_dict())
    engine.write_trace(task, result.role_trace)
    LOGGER.info("Forecast for %s written to %s", symbol, run_dir)
    return forecast


# Document analysis


@dataclass(frozen=True)
class Mention:
    value: float
    unit: str
    source_id: str


@dataclass(frozen=True)
class Discrepancy:
    name: str
    values: Tuple[float, ...]
    source_ids: Tuple[str, ...]


@dataclass(frozen=True)
class DocumentInsights:
    doc_path: str
    cutoff: date
    language: str
    agent_id: str
    indicators: Dict[str, float]
    mentions: Dict[str, Tuple[Mention, ...]]
    highlighted: Tuple[Passage, ...]
    discrepancies: Tuple[Discrepancy, ...] = ()
    failures: Tuple[ExtractionFailure, ...] = field(default=(), compare=False)

    def is_empty(self) -> bool:
        return not self.indicators and not self.highlighted


def indicator_name(text: str) -> str:
    return "_".join(tokenize(text)) or text.strip().lower()


def find_discrepancies(mentions: Dict[str, Sequence[Mention]]) -> List[Discrepancy]:
    """One record per indicator whose values differ by more than 1% relative."""
    found = []
    for name, items in mentions.items():
        base = items[0].value
        conflicting = any(
            abs(m.value - base) > DISCREPANCY_TOLERANCE * max(abs(m.value), abs(base))
            for m in items[1:]
        )
        if conflicting:
            found.append(
                Discrepancy(
                    name,
                    tuple(m.value for m in items),
                    tuple(m.source_id for m in items),
                )
            )
    return found


def _load_document(doc_path: LibPath) -> str:
    try:
        text = read_document(doc_path)
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableDocument(doc_path, str(exc)) from exc
    if not text.strip():
        raise UnreadableDocument(doc_path, "document is empty")
    return text


def analyze_document(
    engine: WorkflowEngine,
    doc_path: LibPath,
    cutoff: Optional[date] = None,
    topics: Sequence[str] = DEFAULT_TOPICS,
    language: str = "en",
    k: int = 3,
) -> DocumentInsights:
    """Extract key indicators topic by topic from retrieved passages.

    Each retrieved passage is shown to the routed agent, which answers with
    one `record_indicator` tool block or with plain text when the passage
    states nothing about the topic.
    """
    doc_path = LibPath(doc_path)
    text = _load_document(doc_path)
    cutoff = cutoff or engine.clock.now().date()
    try:
        index = index_documents(chunk_text(text, doc_path.name))
    except EmptyCorpus as exc:
        raise UnreadableDocument(doc_path, str(exc)) from exc
    task = Task.create(REPORT, str(doc_path), cutoff, 0, "", language)
    try:
        agent_id = engine.scheduler.route(task)
        backend_id = engine.scheduler.get_agent(agent_id).backend_id
    except SchedulerError as exc:
        raise StageError("route", exc) from exc

    mentions: Dict[str, List[Mention]] = {}
    highlighted: Dict[str, Passage] = {}
    failures: List[ExtractionFailure] = []
    for topic in topics:
        try:
            passages = retrieve(index, topic, k)
        except EmptyQuery:
            continue
        for passage in passages:
            highlighted.setdefault(passage.source_id, passage)
            try:
                prompt = engine.prompts.render(
                    "extract_indicator",
                    {
                        "topic": topic,
                        "passage": passage.text,
                        "source_id": passage.source_id,
                        "tools": f"- {RECORD_INDICATOR.describe()}",
                    },
                    language,
                )
                reply = engine.gateway.chat(backend_id, [ChatMessage("user", prompt)])
                call = text2params(reply.response_text, [RECORD_INDICATOR])
            except NoCallBlock:
                continue
            except (GatewayError, ToolError, PromptError) as exc:
                LOGGER.warning(
                    "Extraction of %s failed on %s: %s", topic, passage.source_id, exc
                )
                failures.append(ExtractionFailure(topic, exc))
                break
            unit = call.arguments.get("unit", "unit")
            scaled = Decimal(str(call.arguments["value"])) * UNIT_MULTIPLIERS[unit]
            name = indicator_name(call.arguments["name"])
            mentions.setdefault(name, []).append(
                Mention(float(scaled), unit, passage.source_id)
            )

    discrepancies = find_discrepancies(mentions)
    for item in discrepancies:
        LOGGER.warning("Conflicting values for %s: %s", item.name, item.values)
    return DocumentInsights(
        doc_path=str(doc_path),
        cutoff=cutoff,
        language=language,
        agent_id=agent_id,
        indicators={name: items[0].value for name, items in mentions.items()},
        mentions={name: tuple(items) for name, items in mentions.items()},
        highlighted=tuple(highlighted.values()),
        discrepancies=tuple(discrepancies),
        failures=tuple(failures),
    )


# Report generation


@dataclass(frozen=True)
class OutlineSection:
    section_id: str
    heading: str
    brief: str


@dataclass(frozen=True)
class ReportSection:
    section_id: str
    heading: str
    body: str
    refs: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ReportDocument:
    title: str
    sections: Tuple[ReportSection, ...]
    generated_at: datetime
    workflow_id: str

    def to_markdown(self) -> str:
        stamp = self.generated_at.isoformat()
        parts = [f"# {self.title}", "", f"_Generated at {stamp}_", ""]
        for section in self.sections:
            parts += [f"## {section.heading}", "", section.body.strip(), ""]
        return "\n".join(parts)

    def to_text(self) -> str:
        stamp = self.generated_at.isoformat()
        parts = [self.title, "=" * len(self.title), "", f"Generated at {stamp}", ""]
        for section in self.sections:
            underline = "-" * len(section.heading)
            parts += [section.heading, underline, section.body.strip(), ""]
        return "\n".join(parts)


def load_outline(
    prompts: PromptStore, template_id: str, language: str = "en"
) -> Tuple[str, List[OutlineSection]]:
    """Parse `title: ...` and `id | heading | brief` lines of an outline."""
    title = "{subject}"
    sections = []
    for line in prompts.get(template_id, language).splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.lower().startswith("title:"):
            title = line.split(":", 1)[1].strip()
            continue
        parts = [part.strip() for part in line.split("|")]
        if len(parts) != 3 or not all(parts[:2]):
            raise InvalidOutline(f"{template_id}: cannot read line {line!r}")
        sections.append(OutlineSection(*parts))
    if not sections:
        raise InvalidOutline(f"{template_id} has no sections")
    return title, sections


def _lines_or_empty(lines: Sequence[str], language: str) -> str:
    return "\n".join(lines) if lines else EMPTY_BLOCK[language]


def _cite(
    body: str, known: Sequence[str], supporting: Sequence[str]
) -> Tuple[str, Tuple[str, ...]]:
    """Keep known refs; cite the supporting ones on uncited numeric bodies."""
    cited = [ref for ref in dict.fromkeys(REF.findall(body)) if ref in known]
    if not cited and re.search(r"\d", REF.sub("", body)):
        if supporting:
            sources = " ".join(f"[ref:{r}]" for r in supporting)
            body = f"{body.rstrip()}\n\nSources: {sources}"
            cited = list(supporting)
        else:
            LOGGER.warning("Numeric section without any source to cite")
    return body, tuple(cited)


def generate_report(
    engine: WorkflowEngine,
    insights: DocumentInsights,
    template_id: str = "annual_report",
    symbol: Optional[str] = None,
    max_workers: int = 4,
) -> ReportDocument:
    """Run the report workflow, then write each outline section.

    Sections are generated concurrently and assembled in outline order;
    any failing section fails the report.
    """
    if insights.is_empty():
        raise EmptyInsights(f"Nothing was extracted from {insights.doc_path}")
    language = insights.language
    title_template, outline = load_outline(engine.prompts, template_id, language)
    task = Task.create(REPORT, insights.doc_path, insights.cutoff, 0, "", language)
    generated_at = engine.clock.now()
    try:
        result = engine.run_workflow(task, symbol=symbol, persist=False)
    except RoleError as exc:
        raise _stage_error(exc) from exc
    backend_id = engine.scheduler.get_agent(result.agent_id).backend_id

    seen = insights.highlighted + result.bundle.retrieved_passages
    passages = list({p.source_id: p for p in seen}.values())
    computations = result.computations
    known = [p.source_id for p in passages]
    known += list(computations.records) + [a.record_id for a in computations.anomalies]
    indicator_lines = [
        f"{name} = {items[0].value:g} [ref:{items[0].source_id}]"
        for name, items in insights.mentions.items()
    ]
    discrepancy_lines = [
        f"{d.name}: "
        + ", ".join(f"{v:g} [ref:{s}]" for v, s in zip(d.values, d.source_ids))
        for d in insights.discrepancies
    ]
    company = result.bundle.company
    subject = company.profile.name if company and company.profile else ""
    subject = subject or LibPath(insights.doc_path).stem
    bindings = {
        "subject": subject,
        "indicators": _lines_or_empty(indicator_lines, language),
        "passages": describe_passages(passages) or EMPTY_BLOCK[language],
        "computations": computations.text or EMPTY_BLOCK[language],
        "discrepancies": _lines_or_empty(discrepancy_lines, language),
        "notes": result.final_output,
    }
    supporting = list(
        dict.fromkeys(
            ref
            for text in (bindings["indicators"], bindings["computations"])
            for ref in REF.findall(text)
            if ref in known
        )
    )

    def write_section(section: OutlineSection) -> ReportSection:
        section_bindings = dict(bindings, heading=section.heading, brief=section.brief)
        try:
            prompt = engine.prompts.render("report_section", section_bindings, language)
            exchange = engine.gateway.chat(
                backend_id,
                [
                    ChatMessage(
                        "system",
                        engine.prompts.render(
                            "report_system", section_bindings, language
                        ),
                    ),
                    ChatMessage("user", prompt),
                ],
            )
        except (GatewayError, PromptError) as exc:
            raise StageError(f"section:{section.section_id}", exc) from exc
        body, refs = _cite(exchange.response_text.strip(), known, supporting)
        return ReportSection(section.section_id, section.heading, body, refs)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        sections = list(pool.map(write_section, outline))

    document = ReportDocument(
        title=title_template.replace("{subject}", subject),
        sections=tuple(sections),
        generated_at=generated_at,
        workflow_id=task.task_id,
    )
    run_dir = engine.run_dir(task)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / REPORT_MD_FILE, "w", encoding="utf8") as f:
        f.write(document.to_markdown())
    with open(run_dir / REPORT_TXT_FILE, "w", encoding="utf8") as f:
        f.write(document.to_text())
    trace = list(result.role_trace) + [
        TraceEntry(
            LLM_ANALYST,
            "section",
            generated_at.isoformat(),
            {"section": s.section_id, "refs": list(s.refs)},
        )
        for s in sections
    ]
    engine.write_trace(task, trace)
    return document
