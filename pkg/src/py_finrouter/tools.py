"""Tool usage: Text2Params call extraction and Text2Code evaluation.

A model asks for a tool by answering with one fenced block:

    ```tool
    {"tool": "get_price_window", "args": {"symbol": "NVDA", "days": 30}}
    ```

The block is parsed, the tool resolved by name and every argument coerced
to its declared semantic type before the call is validated.
"""
import json
import math
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from logging import getLogger
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from py_finrouter.dsl import DslError, eval_dsl

LOGGER = getLogger(__name__)

SEMANTIC_TYPES = ("string", "number", "integer", "boolean", "date", "enum")
CALL_BLOCK = re.compile(r"```tool\b[ \t]*\r?\n?(.*?)```", re.DOTALL)
INTEGER_TEXT = re.compile(r"[-+]?\d+")


class ToolError(Exception):
    pass


class InvalidSchema(ToolError):
    pass


class NoCallBlock(ToolError):
    pass


class AmbiguousCallBlock(ToolError):
    pass


class MalformedCallBlock(ToolError):
    pass


class UnknownTool(ToolError):
    def __init__(self, tool_name: str):
        self.tool_name = tool_name
        super().__init__(f"Unknown tool: {tool_name}")


class MissingRequiredParam(ToolError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Missing required parameter: {name}")


class TypeMismatch(ToolError):
    def __init__(self, name: str, expected: str):
        self.name = name
        self.expected = expected
        super().__init__(f"Parameter {name} is not a valid {expected}")


class UnknownParam(ToolError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Unknown parameter: {name}")


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str
    required: bool = True
    values: Tuple[Any, ...] = ()

    def __post_init__(self):
        if self.type not in SEMANTIC_TYPES:
            raise InvalidSchema(f"{self.name}: unknown type {self.type}")
        if self.type == "enum" and not self.values:
            raise InvalidSchema(f"{self.name}: enum needs values")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class ToolSchema:
    tool_name: str
    description: str
    parameters: Tuple[ToolParam, ...] = ()
    strict: bool = True

    def __post_init__(self):
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise InvalidSchema(f"{self.tool_name}: duplicate parameter names")
        object.__setattr__(self, "parameters", tuple(self.parameters))

    def param(self, name: str) -> Optional[ToolParam]:
        return next((p for p in self.parameters if p.name == name), None)

    def describe(self) -> str:
        """One-line signature used in prompts."""
        args = ", ".join(
            f"{p.name}: {p.type}{'' if p.required else '?'}"
            + (f" ({'|'.join(map(str, p.values))})" if p.values else "")
            for p in self.parameters
        )
        return f"{self.tool_name}({args}) - {self.description}"


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: Dict[str, Any]
    origin_text: str = field(default="", compare=False)


@dataclass(frozen=True)
class CodeArtifact:
    source: str
    inputs: Dict[str, float]
    result: Optional[float] = None
    error: Optional[str] = None


def _finite(value: Any) -> Optional[float]:
    """Float value of a number or numeric text, None when not finite."""
    try:
        number = float(value)
    except (OverflowError, ValueError):
        return None
    return number if math.isfinite(number) else None


def _coerce(param: ToolParam, value: Any) -> Any:
    kind = param.type
    if kind == "string":
        if isinstance(value, str):
            return value
    elif kind == "integer":
        if isinstance(value, bool):
            pass
        elif isinstance(value, int):
            return value
        elif isinstance(value, float) and value.is_integer():
            return int(value)
        elif isinstance(value, str) and INTEGER_TEXT.fullmatch(value.strip()):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind == "number":
        if not isinstance(value, bool) and isinstance(value, (int, float, str)):
            number = _finite(value)
            if number is not None:
                return number
    elif kind == "boolean":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
    elif kind == "date":
        if isinstance(value, date) and not isinstance(value, datetime):
            return value
        if isinstance(value, str):
            try:
                return date.fromisoformat(value)
            except ValueError:
                pass
    elif value in param.values:
        return value
    raise TypeMismatch(param.name, kind)


def _conforms(param: ToolParam, value: Any) -> bool:
    kind = param.type
    if kind == "string":
        return isinstance(value, str)
    if kind in ("integer", "number", "boolean") and isinstance(value, bool):
        return kind == "boolean"
    if kind == "integer":
        return isinstance(value, int)
    if kind == "number":
        return isinstance(value, (int, float)) and _finite(value) is not None
    if kind == "boolean":
        return False
    if kind == "date":
        return isinstance(value, date) and not isinstance(value, datetime)
    return value in param.values


def validate_call(call: ToolCall, schema: ToolSchema) -> ToolCall:
    """Return the call unchanged if it satisfies the schema."""
    if call.tool_name != schema.tool_name:
        raise UnknownTool(call.tool_name)
    for param in schema.parameters:
        if param.required and param.name not in call.arguments:
            raise MissingRequiredParam(param.name)
    for name, value in call.arguments.items():
        param = schema.param(name)
        if param is None:
            if schema.strict:
                raise UnknownParam(name)
            continue
        if not _conforms(param, value):
            raise TypeMismatch(name, param.type)
    return call


def extract_call_block(model_text: str) -> Dict[str, Any]:
    blocks = CALL_BLOCK.findall(model_text or "")
    if not blocks:
        raise NoCallBlock("No ```tool block in model output")
    if len(blocks) > 1:
        raise AmbiguousCallBlock(f"Expected one tool block, found {len(blocks)}")
    try:
        payload = json.loads(blocks[0])
    except ValueError as exc:
        raise MalformedCallBlock(f"Tool block is not JSON: {exc}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("tool"), str):
        raise MalformedCallBlock("Tool block needs a `tool` name")
    args = payload.get("args", {})
    if not isinstance(args, dict):
        raise MalformedCallBlock("Tool `args` must be an object")
    return {"tool": payload["tool"], "args": args}


def text2params(model_text: str, schemas: Sequence[ToolSchema]) -> ToolCall:
    payload = extract_call_block(model_text)
    schema = next((s for s in schemas if s.tool_name == payload["tool"]), None)
    if schema is None:
        raise UnknownTool(payload["tool"])
    arguments = {}
    for name, value in payload["args"].items():
        param = schema.param(name)
        if param is None:
            if schema.strict:
                raise UnknownParam(name)
            arguments[name] = value
        else:
            arguments[name] = _coerce(param, value)
    call = ToolCall(schema.tool_name, arguments, origin_text=model_text)
    return validate_call(call, schema)


def render_call_block(call: ToolCall) -> str:
    args = {
        name: value.isoformat() if isinstance(value, date) else value
        for name, value in call.arguments.items()
    }
    body = json.dumps({"tool": call.tool_name, "args": args}, ensure_ascii=False)
    return f"```tool\n{body}\n```"


def run_code(source: str, inputs: Optional[Mapping[str, float]] = None) -> CodeArtifact:
    """Evaluate a Text2Code program, keeping the error instead of raising."""
    inputs = dict(inputs or {})
    try:
        return CodeArtifact(source, inputs, result=eval_dsl(source, inputs))
    except DslError as exc:
        return CodeArtifact(source, inputs, error=str(exc))


class ToolBox:
    """Schemas bound to the callables that implement them."""

    def __init__(self):
        self._tools: Dict[str, Tuple[ToolSchema, Callable[..., str]]] = {}

    def register(self, schema: ToolSchema, func: Callable[..., str]) -> None:
        self._tools[schema.tool_name] = (schema, func)

    @property
    def schemas(self) -> List[ToolSchema]:
        return [schema for schema, _ in self._tools.values()]

    def describe(self) -> str:
        return "\n".join(f"- {schema.describe()}" for schema in self.schemas)

    def parse(self, model_text: str) -> ToolCall:
        return text2params(model_text, self.schemas)

    def execute(self, call: ToolCall) -> str:
        schema, func = self._tools[call.tool_name]
        validate_call(call, schema)
        LOGGER.debug("Tool call %s(%s)", call.tool_name, call.arguments)
        return func(**call.arguments)
