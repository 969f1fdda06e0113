import json
import random
from datetime import date

import pytest

from py_finrouter.prompts import PromptStore
from py_finrouter.scheduler import (
    AgentProfile,
    DimensionMismatch,
    DuplicateAgent,
    EmptyDataset,
    EmptyInput,
    GatewayFailure,
    GoldenRecord,
    GradeParseFailure,
    InvalidDataset,
    InvalidProfile,
    InvalidScore,
    MissingDimension,
    NoScoredAgents,
    Scheduler,
    ScoreStore,
    TaskScore,
    UnknownTask,
    WeightSumInvalid,
    WorkflowNotComplete,
    composite_score,
    exact_match,
    load_golden,
    normalize_scores,
    parse_score,
    token_f1,
)
from py_finrouter.workflow import Task

DATASET = [
    GoldenRecord("q1", "forecast", "AAPL rose five days, up or down?", "Up"),
    GoldenRecord("q2", "forecast", "NVDA fell 10%, up or down?", "Down"),
]
RIGHT = [
    {"match": "Grading dimension:", "reply": "score: 0.9 close enough"},
    {"match": "AAPL rose", "reply": "Up"},
    {"match": "NVDA fell", "reply": "Down"},
]
WRONG = [
    {"match": "Grading dimension:", "reply": "score: 0.2 off"},
    {"match": "", "reply": "No idea at all"},
]


@pytest.fixture
def make_scheduler(tmp_path, clock):
    def make(gateway, **kwargs):
        scheduler = Scheduler(
            gateway,
            ScoreStore(tmp_path / "state"),
            PromptStore(),
            clock=clock,
            **kwargs,
        )
        for backend_id in gateway.list_backends():
            scheduler.register_agent(
                AgentProfile(f"agent-{backend_id}", backend_id, {"forecast", "report"})
            )
        return scheduler

    return make


class TestNormalize:
    @pytest.mark.parametrize(
        "raw, expected",
        (
            ({"a": {"x": 0.2}, "b": {"x": 0.6}, "c": {"x": 1.0}}, [0.0, 0.5, 1.0]),
            ({"a": {"x": 3.0}, "b": {"x": 3.0}}, [1.0, 1.0]),
            ({"solo": {"x": 0.4}}, [1.0]),
        ),
    )
    def test_examples(self, raw, expected):
        normalized = normalize_scores(raw)
        assert [normalized[a]["x"] for a in raw] == pytest.approx(expected)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            normalize_scores({})

    def test_missing_dimension(self):
        with pytest.raises(MissingDimension) as excinfo:
            normalize_scores({"a": {"x": 1, "y": 2}, "b": {"x": 1}})
        assert excinfo.value.agent_id == "b"
        assert excinfo.value.dimensions == ["y"]

    @pytest.mark.parametrize("value", (-0.1, float("nan"), float("inf")))
    def test_invalid_score(self, value):
        with pytest.raises(InvalidScore):
            normalize_scores({"a": {"x": value}, "b": {"x": 1}})

    def test_random_bounds(self):
        rng = random.Random(11)
        for _ in range(200):
            agents = [f"a{i}" for i in range(rng.randint(1, 6))]
            dims = [f"d{j}" for j in range(rng.randint(1, 4))]
            raw = {a: {d: rng.uniform(0, 10) for d in dims} for a in agents}
            normalized = normalize_scores(raw)
            for d in dims:
                values = [normalized[a][d] for a in agents]
                assert all(0.0 <= v <= 1.0 for v in values)
                best = max(agents, key=lambda a: raw[a][d])
                assert normalized[best][d] == 1.0

    def test_affine_invariance(self):
        rng = random.Random(5)
        for _ in range(100):
            agents = [f"a{i}" for i in range(rng.randint(2, 5))]
            raw = {a: {"x": rng.uniform(0, 1), "y": rng.uniform(0, 1)} for a in agents}
            scale, shift = rng.uniform(0.1, 10), rng.uniform(0, 5)
            moved = {
                a: {d: v * scale + shift for d, v in dims.items()}
                for a, dims in raw.items()
            }
            before, after = normalize_scores(raw), normalize_scores(moved)
            for a in agents:
                assert after[a] == pytest.approx(before[a], abs=1e-9)


class TestComposite:
    def test_weighted_sum(self):
        weights = {"x": 0.5, "y": 0.3, "z": 0.2}
        value = composite_score({"x": 1, "y": 0.5, "z": 0}, weights)
        assert value == pytest.approx(0.65)

    @pytest.mark.parametrize(
        "weights", ({"x": 0.5, "y": 0.6}, {"x": 1.5, "y": -0.5}, {"x": 0.2, "y": 0.2})
    )
    def test_invalid_weights(self, weights):
        with pytest.raises(WeightSumInvalid):
            composite_score({"x": 1, "y": 1}, weights)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            composite_score({"x": 1, "y": 1}, {"x": 1.0})

    def test_random_bounds(self):
        rng = random.Random(2)
        for _ in range(200):
            dims = [f"d{j}" for j in range(rng.randint(1, 5))]
            cuts = sorted(rng.random() for _ in range(len(dims) - 1))
            weights = dict(zip(dims, [b - a for a, b in zip([0] + cuts, cuts + [1])]))
            normalized = {d: rng.random() for d in dims}
            value = composite_score(normalized, weights)
            assert 0.0 <= value <= 1.0
            low, high = min(normalized.values()), max(normalized.values())
            assert low - 1e-9 <= value <= high + 1e-9


class TestGrading:
    @pytest.mark.parametrize(
        "text, expected",
        (
            ("score: 0.8 good", 0.8),
            ("Score : .5", 0.5),
            ("score: 1.7", 1.0),
            ("score: -2", 0.0),
            ("first score: 0.3 then score: 0.9", 0.3),
            ("no grade here", None),
            ("", None),
        ),
    )
    def test_parse_score(self, text, expected):
        assert parse_score(text) == expected

    def test_exact_match_normalizes_whitespace_and_case(self):
        assert exact_match("  up ", "Up") == 1.0
        assert exact_match("Up by 1%", "Up") == 0.0

    @pytest.mark.parametrize(
        "response, reference, expected",
        (
            ("Basic Financials", "Basic Financials", 1.0),
            ("Basic", "Basic Financials", pytest.approx(2 / 3)),
            ("News", "Basic Financials", 0.0),
            ("", "", 1.0),
        ),
    )
    def test_token_f1(self, response, reference, expected):
        assert token_f1(response, reference) == expected

    def test_load_golden(self, tmp_path):
        path = tmp_path / "golden.jsonl"
        path.write_text(
            json.dumps(
                {
                    "record_id": 7,
                    "task_kind": "report",
                    "input_text": "Q",
                    "reference_answer": "A",
                }
            )
            + "\n\n",
            encoding="utf8",
        )
        (record,) = load_golden(path)
        assert record.record_id == "7"
        assert record.dimension_labels == ("exact_match", "token_f1")


class TestRegistry:
    def test_duplicate_agent(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        with pytest.raises(DuplicateAgent):
            scheduler.register_agent(AgentProfile("agent-right", "right", {"forecast"}))

    def test_profile_needs_kinds(self):
        with pytest.raises(InvalidProfile):
            AgentProfile("a", "b", frozenset())

    def test_registered_at_from_clock(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        registered_at = scheduler.get_agent("agent-right").registered_at
        assert registered_at.date() == date(2024, 4, 19)


class TestEvaluate:
    def test_right_beats_wrong(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT, wrong=WRONG))
        scores = scheduler.evaluate_roster("forecast", DATASET)
        assert [s.agent_id for s in scores] == ["agent-right", "agent-wrong"]
        assert scores[0].raw_scores == {"exact_match": 1.0, "token_f1": 1.0}
        assert scores[1].raw_scores == {"exact_match": 0.0, "token_f1": 0.0}
        assert scores[0].composite == 1.0
        assert scores[1].composite == 0.0
        assert scheduler.rank_agents("forecast") == [
            ("agent-right", 1.0),
            ("agent-wrong", 0.0),
        ]

    def test_judged_dimension(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(
            make_gateway(right=RIGHT, wrong=WRONG),
            dimensions={"quality": {"template": "grade"}},
        )
        dataset = [
            GoldenRecord(
                r.record_id, r.task_kind, r.input_text, r.reference_answer, ("quality",)
            )
            for r in DATASET
        ]
        scores = {s.agent_id: s for s in scheduler.evaluate_roster("forecast", dataset)}
        assert scores["agent-right"].raw_scores["quality"] == pytest.approx(0.9)
        assert scores["agent-wrong"].raw_scores["quality"] == pytest.approx(0.2)

    def test_route_picks_best(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(wrong=WRONG, right=RIGHT))
        scheduler.evaluate_roster("forecast", DATASET)
        task = Task.create("forecast", "AAPL", date(2024, 4, 19))
        assert scheduler.route(task) == "agent-right"
        assert scheduler.last_ranking[0] == ("agent-right", 1.0)

    def test_ties_break_by_agent_id(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(zeta=RIGHT, alpha=RIGHT))
        scheduler.evaluate_roster("forecast", DATASET)
        assert [a for a, _ in scheduler.rank_agents("forecast")] == [
            "agent-alpha",
            "agent-zeta",
        ]

    def test_near_tie_keeps_score_order(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(zeta=RIGHT, alpha=RIGHT))
        for agent_id, composite in (("agent-alpha", 0.5), ("agent-zeta", 0.5 + 1e-13)):
            scheduler.store.append_score(
                TaskScore(agent_id, "forecast", {}, {}, {}, composite)
            )
        assert [a for a, _ in scheduler.rank_agents("forecast")] == [
            "agent-zeta",
            "agent-alpha",
        ]

    def test_latest_score_wins(self, make_gateway, make_scheduler, tmp_path):
        scheduler = make_scheduler(make_gateway(right=RIGHT, wrong=WRONG))
        scheduler.evaluate_roster("forecast", DATASET)
        weights = {"exact_match": 0.5, "token_f1": 0.5}
        scheduler.evaluate_agent("agent-wrong", DATASET, weights)
        ranking = dict(scheduler.rank_agents("forecast"))
        assert ranking["agent-wrong"] == 0.0
        lines = (tmp_path / "state" / "task_scores.jsonl").read_text().splitlines()
        assert len(lines) == 4

    def test_scores_survive_restart(self, make_gateway, make_scheduler):
        gateway = make_gateway(right=RIGHT, wrong=WRONG)
        make_scheduler(gateway).evaluate_roster("forecast", DATASET)
        assert make_scheduler(gateway).rank_agents("forecast")[0][0] == "agent-right"

    def test_unscored_kind(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        with pytest.raises(NoScoredAgents):
            scheduler.rank_agents("report")

    def test_no_roster(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        dataset = [GoldenRecord("q", "audit", "Q", "A")]
        with pytest.raises(NoScoredAgents):
            scheduler.evaluate_roster("audit", dataset)

    def test_empty_dataset(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        with pytest.raises(EmptyDataset):
            scheduler.evaluate_roster("forecast", [])

    def test_mixed_dataset(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(right=RIGHT))
        dataset = DATASET + [GoldenRecord("r1", "report", "Q", "A")]
        with pytest.raises(InvalidDataset):
            scheduler.evaluate_roster("forecast", dataset)

    def test_ungradable(self, make_gateway, make_scheduler):
        silent = [{"match": "", "reply": "I will not grade"}]
        scheduler = make_scheduler(
            make_gateway(silent=silent), dimensions={"quality": {"template": "grade"}}
        )
        dataset = [GoldenRecord("q", "forecast", "Q", "A", ("quality",))] * 5
        with pytest.raises(GradeParseFailure) as excinfo:
            scheduler.evaluate_roster("forecast", dataset)
        assert excinfo.value.excluded == 5

    def test_gateway_failure(self, make_gateway, make_scheduler):
        scheduler = make_scheduler(make_gateway(down=[{"match": "", "fail": True}]))
        with pytest.raises(GatewayFailure) as excinfo:
            scheduler.evaluate_roster("forecast", DATASET)
        assert excinfo.value.record_id == "q1"


class TestWorkflowRecords:
    @pytest.fixture
    def scheduler(self, make_gateway, make_scheduler):
        script = [
            {"match": "Acceptance criteria", "reply": "score: 0.85 meets the bar"},
            {"match": "", "reply": "ok"},
        ]
        return make_scheduler(make_gateway(judge=script))

    @pytest.fixture
    def task(self):
        return Task.create("forecast", "AAPL", date(2024, 4, 19))

    def test_reflection_needs_known_task(self, scheduler, task):
        with pytest.raises(UnknownTask):
            scheduler.record_reflection("agent-judge", task.task_id, "score: 0.5")

    def test_reflections_are_kept(self, scheduler, task):
        scheduler.register_task(task)
        reflection = scheduler.record_reflection(
            "agent-judge", task.task_id, "score: 0.7 fine"
        )
        assert reflection.self_score == 0.7
        assert scheduler.reflections(task_id=task.task_id) == [reflection]
        assert scheduler.reflections(agent_id="other") == []

    def test_reflection_without_score(self, scheduler, task):
        scheduler.register_task(task)
        reflection = scheduler.record_reflection("agent-judge", task.task_id, "fine")
        assert reflection.self_score is None

    def test_finalize(self, scheduler, task, tmp_path):
        scheduler.begin_workflow("wf-1", task, "agent-judge", task.acceptance_text)
        scheduler.record_step("wf-1", 0, "financial_analysis", "solid")
        scheduler.record_reflection("agent-judge", task.task_id, "score: 0.6")
        scheduler.record_reflection("agent-judge", task.task_id, "score: 1.0")
        scheduler.record_reflection("agent-judge", task.task_id, "no number")
        with pytest.raises(WorkflowNotComplete):
            scheduler.finalize_workflow("wf-1")
        scheduler.complete_workflow("wf-1", "final forecast")
        evaluation = scheduler.finalize_workflow("wf-1")
        assert evaluation.grade == 0.85
        assert evaluation.mean_self_score == pytest.approx(0.8)
        assert evaluation.reflection_count == 3
        assert (tmp_path / "state" / "evaluations.jsonl").exists()

    def test_reflections_do_not_change_composites(
        self, make_gateway, make_scheduler, task
    ):
        scheduler = make_scheduler(make_gateway(right=RIGHT, wrong=WRONG))
        scheduler.evaluate_roster("forecast", DATASET)
        before = scheduler.rank_agents("forecast")
        scheduler.register_task(task)
        scheduler.record_reflection("agent-right", task.task_id, "score: 0.0 poor")
        assert scheduler.rank_agents("forecast") == before
