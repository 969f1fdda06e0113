"""Numerical building blocks: returns, likelihood losses, ratio anomalies
and text/table fusion. Every function here is pure.
"""
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from py_finrouter.dataops import PriceSeries

ANOMALY_THRESHOLD = 2.0
TABLE_MARKER = "[TABLE]"
# Line of a row without cells; escaping keeps a bare pipe out of every cell
EMPTY_ROW = "|"
NORMAL = "normal"
ANOMALOUS = "anomalous"


class AnalyticsError(Exception):
    pass


class HorizonTooLong(AnalyticsError):
    def __init__(self, horizon: int, length: int):
        self.horizon = horizon
        self.length = length
        super().__init__(f"Horizon {horizon} needs more than {length} observations")


class NonPositivePrice(AnalyticsError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"Price at position {index} is not positive")


class OutOfRangeProbability(AnalyticsError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"Probability {value!r} at position {index} is outside (0, 1]")


class InvalidTrace(AnalyticsError):
    pass


class TooFewPeers(AnalyticsError):
    def __init__(self, ratio_name: str, count: int):
        self.ratio_name = ratio_name
        self.count = count
        super().__init__(f"{ratio_name}: {count} value(s), at least 2 are needed")


class InvalidPanel(AnalyticsError):
    pass


class RaggedTable(AnalyticsError):
    def __init__(self, row: int, width: int, expected: int):
        self.row = row
        super().__init__(f"Row {row} has {width} cells, expected {expected}")


@dataclass(frozen=True)
class TokenLikelihoods:
    """Conditional next-token probabilities of one sequence under a model."""

    probs: Tuple[float, ...]
    backend_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if not self.probs:
            raise OutOfRangeProbability(0, math.nan)
        for index, prob in enumerate(self.probs):
            if not 0 < prob <= 1:
                raise OutOfRangeProbability(index, prob)

    def __len__(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class Transition:
    state: str
    action: str
    reward: float
    next_state: str = ""


@dataclass(frozen=True)
class EpisodeTrace:
    transitions: Tuple[Transition, ...]
    gamma: float = 1.0
    policy: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        if not self.transitions:
            raise InvalidTrace("Trace has no transitions")
        if not 0 < self.gamma <= 1:
            raise InvalidTrace(f"gamma must be in (0, 1], got {self.gamma}")

    @classmethod
    def from_rewards(
        cls, rewards: Sequence[float], gamma: float = 1.0, policy: str = ""
    ):
        transitions = tuple(
            Transition(f"s{t}", f"a{t}", float(r), f"s{t + 1}")
            for t, r in enumerate(rewards)
        )
        return cls(transitions, gamma, policy)


@dataclass(frozen=True)
class RatioPanel:
    """One ratio across a peer group; `values` includes the subject."""

    ratio_name: str
    values: Dict[str, float]
    subject: str

    @property
    def record_id(self) -> str:
        return f"ratio:{self.ratio_name}"


@dataclass(frozen=True)
class RatioAnomaly:
    ratio_name: str
    subject: str
    value: float
    zscore: Optional[float]
    flag: str
    degenerate: bool = False
    peer_count: int = field(default=0, compare=False)

    @property
    def record_id(self) -> str:
        return f"ratio:{self.ratio_name}"


PriceInput = Union[PriceSeries, Sequence[float]]


def _price_points(series: PriceInput) -> List[Tuple[Union[date, int], float]]:
    if isinstance(series, PriceSeries):
        points = [(day, float(price)) for day, price in series.observations]
    else:
        points = [(index, float(price)) for index, price in enumerate(series)]
    for index, (_, price) in enumerate(points):
        if not price > 0:
            raise NonPositivePrice(index)
    return points


def log_return(series: PriceInput, f: int = 1) -> List[Tuple[Union[date, int], float]]:
    """`ln(S[t+f] / S[t])` labelled with the later observation."""
    points = _price_points(series)
    if f < 1 or len(points) <= f:
        raise HorizonTooLong(f, len(points))
    prices = np.array([price for _, price in points], dtype=float)
    returns = np.log(prices[f:] / prices[:-f])
    return [(points[t + f][0], float(r)) for t, r in enumerate(returns)]


def window_log_return(series: PriceInput) -> float:
    points = _price_points(series)
    if len(points) < 2:
        raise HorizonTooLong(1, len(points))
    return math.log(points[-1][1] / points[0][1])


def causal_nll(tl: TokenLikelihoods) -> float:
    return math.fsum(-math.log(p) for p in tl.probs)


def perplexity(tl: TokenLikelihoods) -> float:
    return math.exp(causal_nll(tl) / len(tl))


def discounted_return(trace: EpisodeTrace) -> float:
    return math.fsum(
        trace.gamma**t * step.reward for t, step in enumerate(trace.transitions)
    )


def expected_return(traces: Sequence[EpisodeTrace]) -> float:
    """Sample mean of the discounted return over realized traces."""
    if not traces:
        raise InvalidTrace("No traces to average")
    return math.fsum(discounted_return(t) for t in traces) / len(traces)


def normalize_ratio_panel(panel: RatioPanel) -> RatioAnomaly:
    """Z-score of the subject against the panel (population std)."""
    if panel.subject not in panel.values:
        raise InvalidPanel(f"{panel.subject} has no {panel.ratio_name} value")
    if len(panel.values) < 2:
        raise TooFewPeers(panel.ratio_name, len(panel.values))
    values = np.array([float(v) for v in panel.values.values()], dtype=float)
    if not np.isfinite(values).all():
        raise InvalidPanel(f"{panel.ratio_name} has non-finite values")
    subject = float(panel.values[panel.subject])
    if np.ptp(values) == 0:
        return RatioAnomaly(
            panel.ratio_name, panel.subject, subject, None, NORMAL, True, len(values)
        )
    z = float((subject - values.mean()) / values.std())
    flag = ANOMALOUS if abs(z) > ANOMALY_THRESHOLD else NORMAL
    return RatioAnomaly(
        panel.ratio_name, panel.subject, subject, z, flag, False, len(values)
    )


def _escape_cell(cell) -> str:
    return (
        str(cell)
        .replace("\\", "\\\\")
        .replace("|", "\\|")
        .replace("\r", "\\r")
        .replace("\n", "\\n")
    )


def serialize_table(table: Sequence[Sequence]) -> str:
    """Pipe-delimited grid, first row as header. Cells are escaped."""
    rows = [list(row) for row in table]
    width = len(rows[0]) if rows else 0
    for index, row in enumerate(rows):
        if len(row) != width:
            raise RaggedTable(index, len(row), width)
    if rows and not width:
        return "\n".join(EMPTY_ROW for _ in rows)
    return "\n".join(" | ".join(_escape_cell(cell) for cell in row) for row in rows)


def fuse_text_table(text: str, table: Sequence[Sequence]) -> str:
    grid = serialize_table(table)
    if not table:
        return text
    return f"{text}\n{TABLE_MARKER}\n{grid}"
