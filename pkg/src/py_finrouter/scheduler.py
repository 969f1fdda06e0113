"""Smart scheduler: agent registry, golden-set scoring, ranking and routing.

Scores, reflections and workflow evaluations are append-only JSON-lines
files under the state directory. The latest TaskScore per
(agent, task_kind) is the one routing sees.
"""
import json
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from logging import getLogger
from pathlib import Path as LibPath
from threading import Lock
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from py_finrouter.clock import SystemClock
from py_finrouter.gateway import ChatMessage, Gateway, GatewayError
from py_finrouter.prompts import PromptStore

LOGGER = getLogger(__name__)

EXACT_MATCH = "exact_match"
TOKEN_F1 = "token_f1"
BUILTIN_DIMENSIONS = (EXACT_MATCH, TOKEN_F1)
WEIGHT_TOLERANCE = 1e-9
MAX_EXCLUDED_SHARE = 0.2
SCORE_PATTERN = re.compile(r"score\s*:\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+))", re.IGNORECASE)

SCORES_FILE = "task_scores.jsonl"
REFLECTIONS_FILE = "reflections.jsonl"
EVALUATIONS_FILE = "evaluations.jsonl"


class SchedulerError(Exception):
    pass


class DuplicateAgent(SchedulerError):
    def __init__(self, agent_id: str):
        self.agent_id = agent_id
        super().__init__(f"Agent already registered: {agent_id}")


class UnknownAgent(SchedulerError):
    def __init__(self, agent_id: str):
        self.agent_id = agent_id
        super().__init__(f"Unknown agent: {agent_id}")


class UnknownTask(SchedulerError):
    def __init__(self, task_id: str):
        self.task_id = task_id
        super().__init__(f"Unknown task: {task_id}")


class UnknownWorkflow(SchedulerError):
    pass


class InvalidProfile(SchedulerError):
    pass


class EmptyInput(SchedulerError):
    pass


class MissingDimension(SchedulerError):
    def __init__(self, agent_id: str, dimensions: Sequence[str]):
        self.agent_id = agent_id
        self.dimensions = list(dimensions)
        super().__init__(f"{agent_id} is missing dimensions: {', '.join(dimensions)}")


class InvalidScore(SchedulerError):
    pass


class WeightSumInvalid(SchedulerError):
    pass


class DimensionMismatch(SchedulerError):
    pass


class EmptyDataset(SchedulerError):
    pass


class InvalidDataset(SchedulerError):
    pass


class UnknownDimension(SchedulerError):
    pass


class GatewayFailure(SchedulerError):
    def __init__(self, record_id: str, cause: Exception):
        self.record_id = record_id
        self.cause = cause
        super().__init__(f"Gateway failed on record {record_id}: {cause}")


class GradeParseFailure(SchedulerError):
    def __init__(self, excluded: int, total: int):
        self.excluded = excluded
        self.total = total
        super().__init__(f"{excluded} of {total} records could not be graded")


class NoScoredAgents(SchedulerError):
    def __init__(self, task_kind: str):
        self.task_kind = task_kind
        super().__init__(f"No scored agents for task kind: {task_kind}")


class WorkflowNotComplete(SchedulerError):
    def __init__(self, workflow_id: str):
        self.workflow_id = workflow_id
        super().__init__(f"Workflow is not complete: {workflow_id}")


def _timestamp(value: Optional[datetime]) -> Optional[str]:
    return value.isoformat() if value else None


def _parse_timestamp(value: Optional[str]) -> Optional[datetime]:
    return datetime.fromisoformat(value) if value else None


@dataclass(frozen=True)
class AgentProfile:
    agent_id: str
    backend_id: str
    task_kinds: FrozenSet[str]
    adaptor_prompt_id: str = "adaptor"
    registered_at: Optional[datetime] = None

    def __post_init__(self):
        if not self.task_kinds:
            raise InvalidProfile(f"{self.agent_id}: task_kinds must not be empty")
        object.__setattr__(self, "task_kinds", frozenset(self.task_kinds))

    @classmethod
    def from_dict(cls, data: Dict) -> "AgentProfile":
        try:
            return cls(
                agent_id=data["agent_id"],
                backend_id=data["backend_id"],
                task_kinds=frozenset(data["task_kinds"]),
                adaptor_prompt_id=data.get("adaptor_prompt_id", "adaptor"),
            )
        except KeyError as exc:
            raise InvalidProfile(f"Agent field missing: {exc.args[0]}") from exc


@dataclass(frozen=True)
class GoldenRecord:
    record_id: str
    task_kind: str
    input_text: str
    reference_answer: str
    dimension_labels: Tuple[str, ...] = BUILTIN_DIMENSIONS

    @classmethod
    def from_dict(cls, data: Dict) -> "GoldenRecord":
        return cls(
            record_id=str(data["record_id"]),
            task_kind=data["task_kind"],
            input_text=data["input_text"],
            reference_answer=data["reference_answer"],
            dimension_labels=tuple(data.get("dimension_labels", BUILTIN_DIMENSIONS)),
        )


def load_golden(path: LibPath) -> List[GoldenRecord]:
    with open(path, encoding="utf8") as f:
        return [GoldenRecord.from_dict(json.loads(line)) for line in f if line.strip()]


@dataclass(frozen=True)
class TaskScore:
    agent_id: str
    task_kind: str
    raw_scores: Dict[str, float]
    normalized_scores: Dict[str, float]
    weights: Dict[str, float]
    composite: float
    evaluated_at: Optional[datetime] = None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["evaluated_at"] = _timestamp(self.evaluated_at)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TaskScore":
        return cls(
            agent_id=data["agent_id"],
            task_kind=data["task_kind"],
            raw_scores=data["raw_scores"],
            normalized_scores=data["normalized_scores"],
            weights=data["weights"],
            composite=data["composite"],
            evaluated_at=_parse_timestamp(data.get("evaluated_at")),
        )


@dataclass(frozen=True)
class Reflection:
    agent_id: str
    task_id: str
    self_score: Optional[float]
    notes: str
    created_at: Optional[datetime] = None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["created_at"] = _timestamp(self.created_at)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "Reflection":
        return cls(
            agent_id=data["agent_id"],
            task_id=data["task_id"],
            self_score=data.get("self_score"),
            notes=data.get("notes", ""),
            created_at=_parse_timestamp(data.get("created_at")),
        )


@dataclass(frozen=True)
class WorkflowEvaluation:
    workflow_id: str
    task_id: str
    agent_id: str
    grade: Optional[float]
    mean_self_score: Optional[float]
    reflection_count: int
    feedback: str
    created_at: Optional[datetime] = None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["created_at"] = _timestamp(self.created_at)
        return data


@dataclass
class WorkflowRecord:
    workflow_id: str
    task_id: str
    agent_id: str
    acceptance_text: str
    steps: Dict[int, Tuple[str, str]] = field(default_factory=dict)
    reflections: List[Reflection] = field(default_factory=list)
    final_output: Optional[str] = None

    @property
    def completed(self) -> bool:
        return self.final_output is not None


def parse_score(text: str) -> Optional[float]:
    """First `score: <decimal>` in the text, clipped to [0, 1]."""
    match = SCORE_PATTERN.search(text or "")
    if not match:
        return None
    return min(1.0, max(0.0, float(match.group(1))))


def _normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def exact_match(response: str, reference: str) -> float:
    return 1.0 if _normalize_text(response) == _normalize_text(reference) else 0.0


def token_f1(response: str, reference: str) -> float:
    predicted = _normalize_text(response).split()
    expected = _normalize_text(reference).split()
    if not predicted and not expected:
        return 1.0
    common = sum((Counter(predicted) & Counter(expected)).values())
    if not common:
        return 0.0
    precision = common / len(predicted)
    recall = common / len(expected)
    return 2 * precision * recall / (precision + recall)


def normalize_scores(
    raw: Mapping[str, Mapping[str, float]]
) -> Dict[str, Dict[str, float]]:
    """Min-max normalize each dimension across agents.

    A dimension where every agent scored the same maps to 1.0 for all.
    """
    if not raw:
        raise EmptyInput("No agents to normalize")
    agents = list(raw)
    dimensions = list(raw[agents[0]])
    for agent_id in agents:
        missing = [d for d in dimensions if d not in raw[agent_id]]
        missing += [d for d in raw[agent_id] if d not in dimensions]
        if missing:
            raise MissingDimension(agent_id, missing)
    matrix = np.array(
        [[float(raw[a][d]) for d in dimensions] for a in agents], dtype=float
    ).reshape(len(agents), len(dimensions))
    if (matrix < 0).any() or not np.isfinite(matrix).all():
        raise InvalidScore("Raw scores must be finite and non-negative")
    low = matrix.min(axis=0, initial=np.inf)
    span = matrix.max(axis=0, initial=-np.inf) - low
    safe_span = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, (matrix - low) / safe_span, 1.0)
    normalized = np.clip(normalized, 0.0, 1.0)
    return {
        agent_id: {d: float(normalized[i, j]) for j, d in enumerate(dimensions)}
        for i, agent_id in enumerate(agents)
    }


def validate_weights(weights: Mapping[str, float]) -> None:
    if any(w < 0 for w in weights.values()):
        raise WeightSumInvalid("Weights must be non-negative")
    total = math.fsum(weights.values())
    if abs(total - 1) > WEIGHT_TOLERANCE:
        raise WeightSumInvalid(f"Weights sum to {total}, expected 1")


def composite_score(
    normalized: Mapping[str, float], weights: Mapping[str, float]
) -> float:
    if set(normalized) != set(weights):
        raise DimensionMismatch(
            f"Dimensions {sorted(normalized)} do not match weights {sorted(weights)}"
        )
    validate_weights(weights)
    dimensions = list(weights)
    value = np.dot(
        np.array([normalized[d] for d in dimensions], dtype=float),
        np.array([weights[d] for d in dimensions], dtype=float),
    )
    return float(np.clip(value, 0.0, 1.0))


def uniform_weights(dimensions: Sequence[str]) -> Dict[str, float]:
    return {d: 1 / len(dimensions) for d in dimensions}


def _ranking_key(score: TaskScore):
    return (-score.composite, score.agent_id)


class ScoreStore:
    """Append-only JSON-lines store for scores, reflections and evaluations."""

    def __init__(self, state_dir: LibPath):
        self.state_dir = LibPath(state_dir)
        self._lock = Lock()

    def _path(self, name: str) -> LibPath:
        return self.state_dir / name

    def _append(self, name: str, record: Dict) -> None:
        with self._lock:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            with open(self._path(name), "a", encoding="utf8") as f:
                f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def _read(self, name: str) -> List[Dict]:
        path = self._path(name)
        with self._lock:
            if not path.exists():
                return []
            with open(path, encoding="utf8") as f:
                return [json.loads(line) for line in f if line.strip()]

    def append_score(self, score: TaskScore) -> None:
        self._append(SCORES_FILE, score.to_dict())

    def scores(self) -> List[TaskScore]:
        return [TaskScore.from_dict(item) for item in self._read(SCORES_FILE)]

    def latest_scores(self, task_kind: str) -> Dict[str, TaskScore]:
        latest: Dict[str, TaskScore] = {}
        for score in self.scores():
            if score.task_kind == task_kind:
                latest[score.agent_id] = score
        return latest

    def append_reflection(self, reflection: Reflection) -> None:
        self._append(REFLECTIONS_FILE, reflection.to_dict())

    def reflections(self) -> List[Reflection]:
        return [Reflection.from_dict(item) for item in self._read(REFLECTIONS_FILE)]

    def append_evaluation(self, evaluation: WorkflowEvaluation) -> None:
        self._append(EVALUATIONS_FILE, evaluation.to_dict())

    def evaluations(self) -> List[Dict]:
        return self._read(EVALUATIONS_FILE)


class Scheduler:
    """Scores agents against golden datasets and routes tasks to the best one.

    Attributes:
        weights: Per task kind, dimension name to weight. Kinds without an
            entry use uniform weights over the dataset's dimensions.
        dimensions: Judged dimension definitions, name to {"template": id}.
    """

    def __init__(
        self,
        gateway: Gateway,
        store: ScoreStore,
        prompts: PromptStore = None,
        weights: Optional[Mapping[str, Mapping[str, float]]] = None,
        dimensions: Optional[Mapping[str, Mapping[str, str]]] = None,
        clock=None,
        max_workers: int = 4,
    ):
        self.gateway = gateway
        self.store = store
        self.prompts = prompts or PromptStore()
        self.weights = {k: dict(v) for k, v in (weights or {}).items()}
        self.dimensions = {k: dict(v) for k, v in (dimensions or {}).items()}
        self.clock = clock or SystemClock()
        self.max_workers = max_workers
        self.last_ranking: List[Tuple[str, float]] = []
        self._agents: Dict[str, AgentProfile] = {}
        self._tasks: Dict[str, object] = {}
        self._workflows: Dict[str, WorkflowRecord] = {}
        for weights_ in self.weights.values():
            validate_weights(weights_)

    # Registration

    def register_agent(self, profile: AgentProfile) -> str:
        if profile.agent_id in self._agents:
            raise DuplicateAgent(profile.agent_id)
        self.gateway.get_backend(profile.backend_id)
        if profile.registered_at is None:
            profile = AgentProfile(
                agent_id=profile.agent_id,
                backend_id=profile.backend_id,
                task_kinds=profile.task_kinds,
                adaptor_prompt_id=profile.adaptor_prompt_id,
                registered_at=self.clock.now(),
            )
        self._agents[profile.agent_id] = profile
        LOGGER.debug("Registered agent %s on %s", profile.agent_id, profile.backend_id)
        return profile.agent_id

    def get_agent(self, agent_id: str) -> AgentProfile:
        try:
            return self._agents[agent_id]
        except KeyError:
            raise UnknownAgent(agent_id) from None

    def roster(self, task_kind: str) -> List[AgentProfile]:
        return [a for a in self._agents.values() if task_kind in a.task_kinds]

    def register_task(self, task) -> str:
        self._tasks[task.task_id] = task
        return task.task_id

    # Scoring

    def weights_for(
        self, task_kind: str, dimensions: Sequence[str]
    ) -> Dict[str, float]:
        if task_kind in self.weights:
            return dict(self.weights[task_kind])
        return uniform_weights(dimensions)

    def _judge(
        self, agent: AgentProfile, dimension: str, record: GoldenRecord, response: str
    ):
        try:
            template_id = self.dimensions[dimension]["template"]
        except KeyError:
            raise UnknownDimension(
                f"No grading rule for dimension {dimension}"
            ) from None
        prompt = self.prompts.render(
            template_id,
            {
                "dimension": dimension,
                "input": record.input_text,
                "reference": record.reference_answer,
                "response": response,
            },
        )
        exchange = self.gateway.chat(agent.backend_id, [ChatMessage("user", prompt)])
        return parse_score(exchange.response_text)

    def _grade(
        self, agent: AgentProfile, record: GoldenRecord, response: str
    ) -> Optional[Dict[str, float]]:
        grades = {}
        for dimension in record.dimension_labels:
            if dimension == EXACT_MATCH:
                grades[dimension] = exact_match(response, record.reference_answer)
            elif dimension == TOKEN_F1:
                grades[dimension] = token_f1(response, record.reference_answer)
            else:
                score = self._judge(agent, dimension, record, response)
                if score is None:
                    return None
                grades[dimension] = score
        return grades

    def raw_scores(
        self, agent_id: str, dataset: Sequence[GoldenRecord]
    ) -> Dict[str, float]:
        """Average per-dimension grades of one agent over a dataset."""
        agent = self.get_agent(agent_id)
        graded: List[Dict[str, float]] = []
        excluded = 0
        for record in dataset:
            prompt = self.prompts.render(
                agent.adaptor_prompt_id,
                {"input": record.input_text, "task_kind": record.task_kind},
            )
            try:
                exchange = self.gateway.chat(
                    agent.backend_id, [ChatMessage("user", prompt)]
                )
                grades = self._grade(agent, record, exchange.response_text)
            except GatewayError as exc:
                raise GatewayFailure(record.record_id, exc) from exc
            if grades is None:
                LOGGER.warning("Record %s excluded for %s", record.record_id, agent_id)
                excluded += 1
                continue
            graded.append(grades)
        if excluded > MAX_EXCLUDED_SHARE * len(dataset) or not graded:
            raise GradeParseFailure(excluded, len(dataset))
        dimensions = dataset[0].dimension_labels
        return {
            d: float(np.mean([grades[d] for grades in graded])) for d in dimensions
        }

    def _check_dataset(
        self, dataset: Sequence[GoldenRecord]
    ) -> Tuple[str, Tuple[str, ...]]:
        if not dataset:
            raise EmptyDataset("Golden dataset is empty")
        task_kind = dataset[0].task_kind
        dimensions = dataset[0].dimension_labels
        for record in dataset:
            if record.task_kind != task_kind:
                raise InvalidDataset(
                    f"Mixed task kinds: {task_kind}, {record.task_kind}"
                )
            if record.dimension_labels != dimensions:
                raise InvalidDataset(f"Record {record.record_id} has other dimensions")
        return task_kind, dimensions

    def _persist(
        self,
        task_kind: str,
        raw: Mapping[str, Mapping[str, float]],
        weights: Mapping[str, float],
    ) -> Dict[str, TaskScore]:
        normalized = normalize_scores(raw)
        evaluated_at = self.clock.now()
        scores = {}
        for agent_id in raw:
            score = TaskScore(
                agent_id=agent_id,
                task_kind=task_kind,
                raw_scores=dict(raw[agent_id]),
                normalized_scores=normalized[agent_id],
                weights=dict(weights),
                composite=composite_score(normalized[agent_id], weights),
                evaluated_at=evaluated_at,
            )
            self.store.append_score(score)
            scores[agent_id] = score
        return scores

    def evaluate_agent(
        self,
        agent_id: str,
        dataset: Sequence[GoldenRecord],
        weights: Optional[Mapping[str, float]] = None,
    ) -> TaskScore:
        """Score one agent and refresh its peers against the new roster range."""
        task_kind, dimensions = self._check_dataset(dataset)
        agent = self.get_agent(agent_id)
        if task_kind not in agent.task_kinds:
            raise InvalidProfile(f"{agent_id} does not handle {task_kind}")
        weights = dict(weights) if weights else self.weights_for(task_kind, dimensions)
        validate_weights(weights)
        raw = {agent_id: self.raw_scores(agent_id, dataset)}
        for peer_id, peer in self.store.latest_scores(task_kind).items():
            if peer_id == agent_id or peer_id not in self._agents:
                continue
            if set(peer.raw_scores) == set(dimensions):
                raw[peer_id] = peer.raw_scores
        return self._persist(task_kind, raw, weights)[agent_id]

    def evaluate_roster(
        self,
        task_kind: str,
        dataset: Sequence[GoldenRecord],
        weights: Optional[Mapping[str, float]] = None,
    ) -> List[TaskScore]:
        """Score every agent of a task kind; raw scoring runs concurrently."""
        kind, dimensions = self._check_dataset(dataset)
        if kind != task_kind:
            raise InvalidDataset(f"Dataset is for {kind}, not {task_kind}")
        roster = [agent.agent_id for agent in self.roster(task_kind)]
        if not roster:
            raise NoScoredAgents(task_kind)
        weights = dict(weights) if weights else self.weights_for(task_kind, dimensions)
        validate_weights(weights)
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            results = list(pool.map(lambda a: self.raw_scores(a, dataset), roster))
        scores = self._persist(task_kind, dict(zip(roster, results)), weights)
        return [scores[agent_id] for agent_id in roster]

    # Routing

    def rank_agents(self, task_kind: str) -> List[Tuple[str, float]]:
        latest = self.store.latest_scores(task_kind)
        scored = [
            score
            for agent_id, score in latest.items()
            if agent_id in self._agents
            and task_kind in self._agents[agent_id].task_kinds
        ]
        if not scored:
            raise NoScoredAgents(task_kind)
        return [(s.agent_id, s.composite) for s in sorted(scored, key=_ranking_key)]

    def route(self, task) -> str:
        ranking = self.rank_agents(task.task_kind)
        self.last_ranking = ranking
        LOGGER.info(
            "Route %s (%s) to %s, ranking: %s",
            task.task_id,
            task.task_kind,
            ranking[0][0],
            ", ".join(f"{a}={c:.6f}" for a, c in ranking),
        )
        return ranking[0][0]

    # Reflection and evaluation

    def record_reflection(
        self, agent_id: str, task_id: str, self_assessment_text: str
    ) -> Reflection:
        self.get_agent(agent_id)
        if task_id not in self._tasks:
            raise UnknownTask(task_id)
        reflection = Reflection(
            agent_id=agent_id,
            task_id=task_id,
            self_score=parse_score(self_assessment_text),
            notes=self_assessment_text,
            created_at=self.clock.now(),
        )
        self.store.append_reflection(reflection)
        for workflow in self._workflows.values():
            if workflow.task_id == task_id and not workflow.completed:
                workflow.reflections.append(reflection)
        return reflection

    def reflections(
        self, agent_id: Optional[str] = None, task_id: Optional[str] = None
    ) -> List[Reflection]:
        return [
            r
            for r in self.store.reflections()
            if (agent_id is None or r.agent_id == agent_id)
            and (task_id is None or r.task_id == task_id)
        ]

    def begin_workflow(
        self, workflow_id: str, task, agent_id: str, acceptance_text: str = ""
    ) -> None:
        self.register_task(task)
        self._workflows[workflow_id] = WorkflowRecord(
            workflow_id=workflow_id,
            task_id=task.task_id,
            agent_id=agent_id,
            acceptance_text=acceptance_text,
        )

    def _workflow(self, workflow_id: str) -> WorkflowRecord:
        try:
            return self._workflows[workflow_id]
        except KeyError:
            raise UnknownWorkflow(f"Unknown workflow: {workflow_id}") from None

    def record_step(
        self, workflow_id: str, step_index: int, step_kind: str, output: str
    ) -> None:
        self._workflow(workflow_id).steps[step_index] = (step_kind, output)

    def complete_workflow(self, workflow_id: str, final_output: str) -> None:
        self._workflow(workflow_id).final_output = final_output

    def finalize_workflow(self, workflow_id: str) -> WorkflowEvaluation:
        workflow = self._workflow(workflow_id)
        if not workflow.completed:
            raise WorkflowNotComplete(workflow_id)
        agent = self.get_agent(workflow.agent_id)
        prompt = self.prompts.render(
            "judge",
            {
                "acceptance": workflow.acceptance_text,
                "output": workflow.final_output,
            },
        )
        try:
            exchange = self.gateway.chat(
                agent.backend_id, [ChatMessage("user", prompt)]
            )
        except GatewayError as exc:
            raise GatewayFailure(workflow_id, exc) from exc
        present = [
            r.self_score for r in workflow.reflections if r.self_score is not None
        ]
        evaluation = WorkflowEvaluation(
            workflow_id=workflow_id,
            task_id=workflow.task_id,
            agent_id=workflow.agent_id,
            grade=parse_score(exchange.response_text),
            mean_self_score=float(np.mean(present)) if present else None,
            reflection_count=len(workflow.reflections),
            feedback=exchange.response_text.strip(),
            created_at=self.clock.now(),
        )
        self.store.append_evaluation(evaluation)
        LOGGER.info(
            "Workflow %s evaluated: grade=%s, mean self-score=%s",
            workflow_id,
            evaluation.grade,
            evaluation.mean_self_score,
        )
        return evaluation
