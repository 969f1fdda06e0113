"""Conformance checks over the bundled fixture files.

Each check compares a library operation with the expected values stored in
`data/conformance/` or with a brute-force oracle written here independently
of the library code.
"""
import json
import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path as LibPath
from typing import Callable, Dict, List, Sequence

from py_finrouter.analytics import (
    AnalyticsError,
    EpisodeTrace,
    RatioPanel,
    TokenLikelihoods,
    causal_nll,
    discounted_return,
    fuse_text_table,
    log_return,
    normalize_ratio_panel,
)
from py_finrouter.apps import AppError, parse_forecast, render_forecast
from py_finrouter.dataops import (
    DataOpsError,
    Document,
    index_documents,
    retrieve,
    tokenize,
)
from py_finrouter.dsl import DslError, eval_dsl
from py_finrouter.scheduler import SchedulerError, composite_score, normalize_scores

LOGGER = getLogger(__name__)

DATA_DIR = LibPath(__file__).parent / "data"
CONFORMANCE_DIR = DATA_DIR / "conformance"
SAMPLE_DIR = DATA_DIR / "samples"
TOLERANCE = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _load(name: str):
    with open(CONFORMANCE_DIR / name, encoding="utf8") as f:
        return json.load(f)


def _close(actual: float, expected: float, tolerance: float = TOLERANCE) -> bool:
    return math.isclose(actual, expected, rel_tol=tolerance, abs_tol=tolerance)


def check_dsl(rows: Sequence[Dict]) -> List[str]:
    problems = []
    for row in rows:
        program = row["program"]
        try:
            value = eval_dsl(program, row.get("inputs", {}))
        except DslError as exc:
            if type(exc).__name__ != row.get("error"):
                problems.append(f"{program!r} raised {type(exc).__name__}")
            continue
        if "error" in row:
            problems.append(f"{program!r} gave {value}, expected {row['error']}")
        elif not _close(value, row["expected"], 1e-12):
            problems.append(f"{program!r} gave {value}, expected {row['expected']}")
    return problems


def check_analytics(table: Dict) -> List[str]:
    problems = []
    for row in table["log_return"]:
        values = [r for _, r in log_return(row["prices"], row["f"])]
        if len(values) != len(row["expected"]) or not all(
            _close(a, b, 1e-12) for a, b in zip(values, row["expected"])
        ):
            problems.append(f"log_return {row['prices']} f={row['f']} gave {values}")
    for row in table["causal_nll"]:
        value = causal_nll(TokenLikelihoods(row["probs"]))
        if not _close(value, row["expected"], 1e-12):
            problems.append(f"causal_nll {row['probs']} gave {value}")
    for row in table["discounted_return"]:
        trace = EpisodeTrace.from_rewards(row["rewards"], row["gamma"])
        value = discounted_return(trace)
        if not _close(value, row["expected"], 1e-12):
            problems.append(f"discounted_return {row['rewards']} gave {value}")
    for row in table["ratio_panel"]:
        anomaly = normalize_ratio_panel(
            RatioPanel(row["ratio_name"], row["values"], row["subject"])
        )
        expected = row["zscore"]
        zscore_ok = (
            anomaly.zscore is None
            if expected is None
            else anomaly.zscore is not None and _close(anomaly.zscore, expected)
        )
        if not zscore_ok or anomaly.flag != row["flag"]:
            problems.append(
                f"ratio panel {row['values']} gave {anomaly.zscore} {anomaly.flag}"
            )
    for row in table["fuse_text_table"]:
        value = fuse_text_table(row["text"], row["table"])
        if value != row["expected"]:
            problems.append(f"fuse_text_table {row['table']} gave {value!r}")
    return problems


def check_cross_ln() -> List[str]:
    """The DSL and the analytics log-return agree on one price pair."""
    dsl_value = eval_dsl("ln(s1 / s0)", {"s0": 100, "s1": 110})
    analytics_value = log_return([100, 110])[0][1]
    if abs(dsl_value - analytics_value) > 1e-12:
        return [f"ln(s1 / s0) = {dsl_value}, log_return = {analytics_value}"]
    return []


def check_samples(rows: Sequence[Dict]) -> List[str]:
    problems = []
    for row in rows:
        with open(SAMPLE_DIR / row["file"], encoding="utf8") as f:
            text = f.read()
        result = parse_forecast(text, row["language"])
        observed = {
            "positive": len(result.positive_developments),
            "concerns": len(result.potential_concerns),
            "direction": result.direction,
            "low": result.move_low_pct,
            "high": result.move_high_pct,
            "first_tag": result.positive_developments[0].evidence_tag,
        }
        for key, value in observed.items():
            if key in row and row[key] != value:
                problems.append(
                    f"{row['file']}: {key} is {value!r}, expected {row[key]!r}"
                )
        if parse_forecast(render_forecast(result), row["language"]) != result:
            problems.append(f"{row['file']}: rendered text does not parse back")
    return problems


def bm25_oracle(
    corpus: Sequence[List[str]], query: Sequence[str], k1=1.2, b=0.75, delta=1.0
) -> List[float]:
    """Brute-force BM25+ with idf(t) = ln((N + 1) / df(t)).

    Every query term found in the corpus adds idf * delta to each document
    on top of its saturated frequency. Scores stay positive, and a longer
    document never beats a shorter one at the same term frequency.
    """
    size = len(corpus)
    average_length = sum(len(doc) for doc in corpus) / size
    scores = []
    for doc in corpus:
        score = 0.0
        for term in query:
            df = sum(1 for other in corpus if term in other)
            if not df:
                continue
            tf = doc.count(term)
            saturation = tf * (k1 + 1) / (
                tf + k1 * (1 - b + b * len(doc) / average_length)
            )
            score += math.log((size + 1) / df) * (saturation + delta)
        scores.append(score)
    return scores


def check_retrieval(table: Dict) -> List[str]:
    problems = []
    documents = [Document(d["doc_id"], d["text"]) for d in table["documents"]]
    index = index_documents(documents)
    corpus = [tokenize(doc.text) for doc in documents]
    for term, postings in index.postings.items():
        counted = [
            (doc.doc_id, tokens.count(term))
            for doc, tokens in zip(documents, corpus)
            if term in tokens
        ]
        if postings != counted:
            problems.append(f"postings of {term!r} differ from a recount")
    for row in table["queries"]:
        terms = tokenize(row["query"])
        scores = bm25_oracle(corpus, terms)
        expected = sorted(
            (-score, doc.doc_id)
            for doc, tokens, score in zip(documents, corpus, scores)
            if set(terms) & set(tokens)
        )[: row["k"]]
        passages = retrieve(index, row["query"], row["k"])
        if len(passages) != len(expected):
            problems.append(f"{row['query']!r}: {len(passages)} passages")
            continue
        oracle = dict(zip((doc.doc_id for doc in documents), scores))
        for passage, (neg_score, doc_id) in zip(passages, expected):
            if not _close(passage.score, -neg_score):
                problems.append(
                    f"{row['query']!r}: {passage.source_id} scored {passage.score}"
                )
            # Equal scores may order differently only within float noise
            elif passage.source_id != doc_id and not _close(
                oracle[passage.source_id], -neg_score
            ):
                problems.append(f"{row['query']!r}: {passage.source_id} out of order")
        if "first" in row and passages and passages[0].source_id != row["first"]:
            problems.append(f"{row['query']!r}: {passages[0].source_id} ranked first")
    return problems


def check_scheduler(rows: Sequence[Dict]) -> List[str]:
    problems = []
    for row in rows:
        normalized = normalize_scores(row["raw"])
        composites = {
            agent: composite_score(normalized[agent], row["weights"])
            for agent in normalized
        }
        for agent, expected in row["composite"].items():
            if not _close(composites[agent], expected):
                problems.append(f"{row['name']}: {agent} composite {composites[agent]}")
        order = sorted(composites, key=lambda a: (-composites[a], a))
        if order != row["order"]:
            problems.append(f"{row['name']}: order {order}")
    return problems


CHECKS: Dict[str, Callable[[], List[str]]] = {
    "dsl": lambda: check_dsl(_load("dsl.json")),
    "analytics": lambda: check_analytics(_load("analytics.json")),
    "dsl-analytics": check_cross_ln,
    "forecast-samples": lambda: check_samples(_load("samples.json")),
    "retrieval": lambda: check_retrieval(_load("retrieval.json")),
    "scheduler": lambda: check_scheduler(_load("scheduler.json")),
}


def run_selfcheck() -> List[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        try:
            problems = check()
        except (
            OSError,
            ValueError,
            KeyError,
            AnalyticsError,
            AppError,
            DataOpsError,
            DslError,
            SchedulerError,
        ) as exc:
            problems = [f"{type(exc).__name__}: {exc}"]
        if problems:
            LOGGER.warning("Check %s failed: %s", name, problems)
        results.append(CheckResult(name, not problems, "; ".join(problems)))
    return results
