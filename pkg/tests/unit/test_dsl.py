import json
import math
import random

import pytest

from py_finrouter import dsl
from py_finrouter.analytics import log_return
from py_finrouter.dsl import (
    DomainError,
    ParseError,
    UnboundVariable,
    eval_dsl,
    free_variables,
)
from py_finrouter.selfcheck import CONFORMANCE_DIR

with open(CONFORMANCE_DIR / "dsl.json", encoding="utf8") as f:
    ROWS = json.load(f)
VALUE_ROWS = [row for row in ROWS if "expected" in row]
ERROR_ROWS = [row for row in ROWS if "error" in row]


@pytest.mark.parametrize("row", VALUE_ROWS, ids=[r["program"] for r in VALUE_ROWS])
def test_values(row):
    value = eval_dsl(row["program"], row["inputs"])
    assert value == pytest.approx(row["expected"], abs=1e-12)


@pytest.mark.parametrize("row", ERROR_ROWS, ids=[r["program"] for r in ERROR_ROWS])
def test_errors(row):
    with pytest.raises(getattr(dsl, row["error"])):
        eval_dsl(row["program"], row.get("inputs", {}))


def test_unbound_name():
    with pytest.raises(UnboundVariable) as excinfo:
        eval_dsl("x + 1")
    assert excinfo.value.name == "x"


def test_parse_error_position():
    with pytest.raises(ParseError) as excinfo:
        eval_dsl("1 + foo.bar", {"foo": 1})
    assert excinfo.value.position == 4


def test_conditional_is_lazy():
    assert eval_dsl("1 if x > 0 else 1 / 0", {"x": 1}) == 1


@pytest.mark.parametrize(
    ("source", "names"),
    (
        ("ln(s1 / s0) + max(s0, k)", ["s1", "s0", "k"]),
        ("a if b > c else d", ["a", "b", "c", "d"]),
        ("x * (y + z) - mean([w, x])", ["x", "y", "z", "w"]),
        ("(b\n + a) * c", ["b", "a", "c"]),
        ("2 + 3", []),
    ),
)
def test_free_variables(source, names):
    assert free_variables(source) == names


@pytest.mark.parametrize("value", (float("nan"), float("inf")))
def test_non_finite_input(value):
    with pytest.raises(DomainError):
        eval_dsl("x", {"x": value})


def test_matches_log_return():
    rng = random.Random(17)
    for _ in range(1000):
        s0 = rng.uniform(0.01, 1e4)
        s1 = rng.uniform(0.01, 1e4)
        expected = log_return([s0, s1])[0][1]
        assert abs(eval_dsl("ln(s1 / s0)", {"s0": s0, "s1": s1}) - expected) <= 1e-12


def _program(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        leaves = ["x", "y", str(rng.randint(0, 9)), f"{rng.uniform(-5, 5):.3f}"]
        return rng.choice(leaves)
    left, right = _program(rng, depth - 1), _program(rng, depth - 1)
    shape = rng.randrange(7)
    if shape == 0:
        return f"({left} {rng.choice(['+', '-', '*', '/', '**'])} {right})"
    if shape == 1:
        return f"{rng.choice(['ln', 'exp', 'abs'])}({left})"
    if shape == 2:
        return f"{rng.choice(['min', 'max'])}({left}, {right})"
    if shape == 3:
        return f"{rng.choice(['mean', 'std'])}([{left}, {right}])"
    if shape == 4:
        return f"({left} {rng.choice(['<', '<=', '>', '>=', '==', '!='])} {right})"
    if shape == 5:
        return f"({left} if {right} else {_program(rng, depth - 1)})"
    return f"-{left}"


def test_random_programs_stay_in_bounds():
    rng = random.Random(23)
    for _ in range(1000):
        program = _program(rng, 5)
        try:
            inputs = {"x": rng.uniform(-3, 3), "y": rng.uniform(-3, 3)}
            value = eval_dsl(program, inputs)
        except (DomainError, ParseError):
            continue
        assert isinstance(value, float)
        assert math.isfinite(value)


@pytest.mark.parametrize(
    "program",
    (
        "__import__('os').system('true')",
        "open('/etc/passwd')",
        "(lambda: 1)()",
        "[x for x in [1]]",
        "x[0]",
        "'a' * 3",
        "globals()",
        "y := 1",
    ),
)
def test_sandbox(program):
    with pytest.raises(ParseError):
        eval_dsl(program, {"x": 1})
