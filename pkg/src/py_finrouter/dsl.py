"""A total expression language for model-written computations.

Programs use Python expression syntax, but only a whitelist of nodes is
accepted: numbers, names, arithmetic, comparisons, conditional expressions
and a handful of functions. There are no loops, definitions or attribute
access, so every accepted program terminates after one walk of its tree.
See docs/DSL.md for the grammar.
"""
import ast
import math
from typing import Callable, Dict, List, Mapping, Optional

FUNCTIONS = ("ln", "exp", "abs", "min", "max", "mean", "std")
LIST_FUNCTIONS = ("mean", "std")
UNARY_FUNCTIONS = ("ln", "exp", "abs")

BINARY_OPS = {
    ast.Add: ("addition", lambda a, b: a + b),
    ast.Sub: ("subtraction", lambda a, b: a - b),
    ast.Mult: ("multiplication", lambda a, b: a * b),
    ast.Div: ("division", None),
    ast.Pow: ("power", None),
}
COMPARE_OPS: Dict[type, Callable[[float, float], bool]] = {
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
}


class DslError(Exception):
    pass


class ParseError(DslError):
    def __init__(self, position: int, reason: str = "syntax error"):
        self.position = position
        self.reason = reason
        super().__init__(f"{reason} at position {position}")


class UnboundVariable(DslError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Unbound variable: {name}")


class DomainError(DslError):
    def __init__(self, operation: str):
        self.operation = operation
        super().__init__(f"Domain error in {operation}")


def _reject(node: ast.AST, reason: str):
    raise ParseError(getattr(node, "col_offset", 0), reason)


def _check(node: ast.AST) -> None:
    if isinstance(node, ast.Constant):
        value = node.value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _reject(node, "only numeric literals are allowed")
    elif isinstance(node, ast.Name):
        if node.id in FUNCTIONS:
            _reject(node, f"{node.id} must be called")
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in BINARY_OPS:
            _reject(node, "unsupported operator")
        _check(node.left)
        _check(node.right)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            _reject(node, "unsupported unary operator")
        _check(node.operand)
    elif isinstance(node, ast.Compare):
        if any(type(op) not in COMPARE_OPS for op in node.ops):
            _reject(node, "unsupported comparison")
        _check(node.left)
        for comparator in node.comparators:
            _check(comparator)
    elif isinstance(node, ast.IfExp):
        _check(node.test)
        _check(node.body)
        _check(node.orelse)
    elif isinstance(node, ast.Call):
        _check_call(node)
    else:
        _reject(node, f"{type(node).__name__} is not part of the language")


def _check_call(node: ast.Call) -> None:
    if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
        _reject(node, "unknown function")
    if node.keywords:
        _reject(node, "keyword arguments are not allowed")
    name = node.func.id
    if name in LIST_FUNCTIONS:
        if len(node.args) != 1 or not isinstance(node.args[0], ast.List):
            _reject(node, f"{name} takes one list literal")
        for item in node.args[0].elts:
            _check(item)
        return
    if name in UNARY_FUNCTIONS and len(node.args) != 1:
        _reject(node, f"{name} takes one argument")
    if not node.args:
        _reject(node, f"{name} needs arguments")
    for arg in node.args:
        _check(arg)


def parse(source: str) -> ast.Expression:
    """Parse and whitelist a program, raising ParseError on anything else."""
    if not isinstance(source, str):
        raise ParseError(0, "program must be text")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ParseError(max(0, (exc.offset or 1) - 1), exc.msg) from None
    except (RecursionError, MemoryError, ValueError) as exc:
        raise ParseError(0, f"unparseable program: {type(exc).__name__}") from None
    try:
        _check(tree.body)
    except RecursionError:
        raise ParseError(0, "program nests too deeply") from None
    return tree


def _finite(value: float, operation: str) -> float:
    if isinstance(value, complex) or not math.isfinite(value):
        raise DomainError(operation)
    return value


def _binary(node: ast.BinOp, inputs: Mapping[str, float]) -> float:
    operation, func = BINARY_OPS[type(node.op)]
    left = _eval(node.left, inputs)
    right = _eval(node.right, inputs)
    if isinstance(node.op, ast.Div):
        if right == 0:
            raise DomainError("division")
        return _finite(left / right, operation)
    if isinstance(node.op, ast.Pow):
        try:
            return _finite(left**right, operation)
        except (OverflowError, ZeroDivisionError):
            raise DomainError(operation) from None
    return _finite(func(left, right), operation)


def _call(node: ast.Call, inputs: Mapping[str, float]) -> float:
    name = node.func.id
    if name in LIST_FUNCTIONS:
        values = [_eval(item, inputs) for item in node.args[0].elts]
        if not values:
            raise DomainError(name)
        try:
            mean = math.fsum(values) / len(values)
            if name == "mean":
                return _finite(mean, name)
            variance = math.fsum((v - mean) ** 2 for v in values) / len(values)
        except OverflowError:
            raise DomainError(name) from None
        return _finite(math.sqrt(variance), name)
    args = [_eval(arg, inputs) for arg in node.args]
    if name == "ln":
        if args[0] <= 0:
            raise DomainError("ln")
        return math.log(args[0])
    if name == "exp":
        try:
            return math.exp(args[0])
        except OverflowError:
            raise DomainError("exp") from None
    if name == "abs":
        return abs(args[0])
    return min(args) if name == "min" else max(args)


def _eval(node: ast.AST, inputs: Mapping[str, float]) -> float:
    if isinstance(node, ast.Constant):
        try:
            return _finite(float(node.value), "literal")
        except OverflowError:
            raise DomainError("literal") from None
    if isinstance(node, ast.Name):
        if node.id not in inputs:
            raise UnboundVariable(node.id)
        return _finite(float(inputs[node.id]), "input")
    if isinstance(node, ast.BinOp):
        return _binary(node, inputs)
    if isinstance(node, ast.UnaryOp):
        operand = _eval(node.operand, inputs)
        return -operand if isinstance(node.op, ast.USub) else operand
    if isinstance(node, ast.Compare):
        left = _eval(node.left, inputs)
        for op, comparator in zip(node.ops, node.comparators):
            right = _eval(comparator, inputs)
            if not COMPARE_OPS[type(op)](left, right):
                return 0.0
            left = right
        return 1.0
    if isinstance(node, ast.IfExp):
        branch = node.body if _eval(node.test, inputs) != 0 else node.orelse
        return _eval(branch, inputs)
    return _call(node, inputs)


def free_variables(source: str) -> List[str]:
    """Input names of a program in order of first appearance."""
    tree = parse(source)
    nodes = sorted(
        (
            node
            for node in ast.walk(tree)
            if isinstance(node, ast.Name) and node.id not in FUNCTIONS
        ),
        key=lambda node: (node.lineno, node.col_offset),
    )
    return list(dict.fromkeys(node.id for node in nodes))


def eval_dsl(source: str, inputs: Optional[Mapping[str, float]] = None) -> float:
    tree = parse(source)
    try:
        return _eval(tree.body, inputs or {})
    except RecursionError:
        raise ParseError(0, "program nests too deeply") from None
