"""Multi-source LLM gateway.

Backends are registered once, the registry is sealed, and every chat request
goes over the OpenAI-compatible chat-completions wire format. Scripted mock
backends are mounted as a `requests` transport adapter, so offline runs use
exactly the same request/response path as live ones.
"""
import json
import random
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from logging import getLogger
from os import environ
from pathlib import Path as LibPath
from threading import Lock
from time import sleep as sleep_
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

import requests
from requests.adapters import BaseAdapter
from requests.exceptions import ConnectionError as ConnectionError_
from requests.exceptions import HTTPError
from requests.exceptions import Timeout as Timeout_
from requests.structures import CaseInsensitiveDict

from py_finrouter.clock import SystemClock

LOGGER = getLogger(__name__)

ROLES = ("system", "user", "assistant")
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})
BACKOFF_INITIAL = 0.5
MOCK_SENTINEL = "MOCK-NO-MATCH"
# Most recent requests a mock backend keeps for inspection
MOCK_HISTORY = 1000


class GatewayError(Exception):
    pass


class InvalidMessage(GatewayError):
    pass


class InvalidBackendSpec(GatewayError):
    pass


class DuplicateBackend(GatewayError):
    def __init__(self, backend_id: str):
        self.backend_id = backend_id
        super().__init__(f"Backend already registered: {backend_id}")


class RegistrySealed(GatewayError):
    pass


class UnknownBackend(GatewayError):
    def __init__(self, backend_id: str):
        self.backend_id = backend_id
        super().__init__(f"Unknown backend: {backend_id}")


class MissingCredential(GatewayError):
    def __init__(self, env_name: str):
        self.env_name = env_name
        super().__init__(f"Credential env var is not set: {env_name}")


class TransportExhausted(GatewayError):
    def __init__(self, *args, status_code: int = 0, attempt_count: int = 0):
        self.status_code = status_code
        self.attempt_count = attempt_count
        super().__init__(*args)


class Timeout(TransportExhausted):
    pass


class MalformedResponse(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidMessage(f"Unsupported role: {self.role}")
        if self.role in ("system", "user") and not self.content:
            raise InvalidMessage(f"Empty {self.role} message")

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class BackendSpec:
    backend_id: str
    base_url: str
    model_name: str
    api_key_env: str = ""
    max_tokens: int = 1024
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 2
    mock: Optional["MockScript"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.backend_id:
            raise InvalidBackendSpec("backend_id is required")
        if self.max_tokens <= 0:
            raise InvalidBackendSpec(f"{self.backend_id}: max_tokens must be positive")
        if not 0 <= self.temperature <= 2:
            raise InvalidBackendSpec(f"{self.backend_id}: temperature out of [0, 2]")
        if self.timeout <= 0:
            raise InvalidBackendSpec(f"{self.backend_id}: timeout must be positive")
        if self.max_retries < 0:
            raise InvalidBackendSpec(f"{self.backend_id}: max_retries is negative")

    @classmethod
    def from_dict(cls, data: Dict) -> "BackendSpec":
        try:
            return cls(
                backend_id=data["backend_id"],
                base_url=data["base_url"],
                model_name=data["model_name"],
                api_key_env=data.get("api_key_env", ""),
                max_tokens=int(data.get("max_tokens", 1024)),
                temperature=float(data.get("temperature", 0.0)),
                timeout=float(data.get("timeout", 30.0)),
                max_retries=int(data.get("max_retries", 2)),
            )
        except KeyError as exc:
            raise InvalidBackendSpec(f"Backend field missing: {exc.args[0]}") from exc


@dataclass(frozen=True)
class ChatExchange:
    backend_id: str
    request_messages: Tuple[ChatMessage, ...]
    response_text: str
    latency: float
    attempt_count: int
    finished_at: datetime

    def to_dict(self) -> Dict:
        # finished_at is left out: traces stay comparable across runs
        return {
            "backend_id": self.backend_id,
            "request_messages": [m.to_dict() for m in self.request_messages],
            "response_text": self.response_text,
            "latency": self.latency,
            "attempt_count": self.attempt_count,
        }


@dataclass
class MockRule:
    match: str
    reply: str = ""
    # Number of matching requests to fail before replying, -1 fails forever
    fail: int = 0

    @classmethod
    def from_dict(cls, data: Dict) -> "MockRule":
        fail = data.get("fail", 0)
        if fail is True:
            fail = -1
        elif fail is False:
            fail = 0
        return cls(match=data.get("match", ""), reply=data.get("reply", ""), fail=fail)


class MockScript:
    """Replies chosen by first substring match against the last user message."""

    def __init__(self, rules: Sequence[Union[MockRule, Dict]]):
        self.rules = [
            rule if isinstance(rule, MockRule) else MockRule.from_dict(rule)
            for rule in rules
        ]
        self.requests: Deque[List[Dict[str, str]]] = deque(maxlen=MOCK_HISTORY)
        self._failed = [0] * len(self.rules)
        self._lock = Lock()

    def respond(self, messages: List[Dict[str, str]]) -> Optional[str]:
        """Return the scripted reply, or None for a scripted transport failure."""
        last_user = next(
            (m["content"] for m in reversed(messages) if m["role"] == "user"), ""
        )
        with self._lock:
            self.requests.append(messages)
            for index, rule in enumerate(self.rules):
                if rule.match not in last_user:
                    continue
                if rule.fail < 0:
                    return None
                if self._failed[index] < rule.fail:
                    self._failed[index] += 1
                    return None
                return rule.reply
        return MOCK_SENTINEL


class MockAdapter(BaseAdapter):
    """Serves chat-completions requests from a MockScript, in process."""

    def __init__(self, script: MockScript):
        super().__init__()
        self.script = script

    def send(
        self, request, stream=False, timeout=None, verify=True, cert=None, proxies=None
    ):
        payload = json.loads(request.body)
        reply = self.script.respond(payload["messages"])
        if reply is None:
            raise ConnectionError_("Scripted transport failure", request=request)
        response = requests.Response()
        response.status_code = 200
        response.headers = CaseInsensitiveDict({"Content-Type": "application/json"})
        response.encoding = "utf-8"
        response.url = request.url
        response.request = request
        response._content = json.dumps(
            {
                "object": "chat.completion",
                "model": payload.get("model", ""),
                "choices": [
                    {
                        "index": 0,
                        "message": {"role": "assistant", "content": reply},
                        "finish_reason": "stop",
                    }
                ],
            }
        ).encode("utf8")
        return response

    def close(self):
        pass


def script_mock(
    responses: Sequence[Union[MockRule, Dict]],
    backend_id: str = "mock",
    model_name: str = "mock-chat",
    max_retries: int = 2,
) -> BackendSpec:
    if not responses:
        raise InvalidBackendSpec("A mock script needs at least one rule")
    return BackendSpec(
        backend_id=backend_id,
        base_url=f"mock://{backend_id}",
        model_name=model_name,
        max_retries=max_retries,
        mock=MockScript(responses),
    )


def load_mock_script(path: LibPath) -> List[MockRule]:
    with open(path, encoding="utf8") as f:
        return [MockRule.from_dict(item) for item in json.load(f)]


def _read_completion(resp: requests.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse("Response has no choices[0].message.content") from exc
    if not isinstance(content, str):
        raise MalformedResponse("Completion content is not text")
    return content


class Gateway:
    """Registry of chat backends plus the retrying chat client.

    Attributes:
        sleep: Called with each backoff delay in seconds, replaceable by tests.
        rng: Source of backoff jitter.
    """

    def __init__(
        self,
        session: requests.Session = None,
        clock=None,
        sleep: Callable[[float], None] = sleep_,
        rng: random.Random = None,
    ):
        self.session = session or requests.Session()
        self.clock = clock or SystemClock()
        self.sleep = sleep
        self.rng = rng or random.Random()
        self._backends: Dict[str, BackendSpec] = {}
        self._sealed = False

    def register_backend(self, spec: BackendSpec) -> str:
        if self._sealed:
            raise RegistrySealed(f"Registry is sealed, cannot add {spec.backend_id}")
        if spec.backend_id in self._backends:
            raise DuplicateBackend(spec.backend_id)
        self._backends[spec.backend_id] = spec
        if spec.mock is not None:
            self.session.mount(spec.base_url.rstrip("/") + "/", MockAdapter(spec.mock))
        LOGGER.debug("Registered backend %s -> %s", spec.backend_id, spec.base_url)
        return spec.backend_id

    def seal(self) -> None:
        self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    def list_backends(self) -> List[str]:
        return list(self._backends)

    def get_backend(self, backend_id: str) -> BackendSpec:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise UnknownBackend(backend_id) from None

    def backoff_delay(self, attempt: int) -> float:
        """Full-jitter delay before retry number `attempt` (1-based)."""
        return self.rng.uniform(0, BACKOFF_INITIAL * 2 ** (attempt - 1))

    def _headers(self, spec: BackendSpec) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if spec.api_key_env:
            key = environ.get(spec.api_key_env)
            if not key:
                raise MissingCredential(spec.api_key_env)
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def chat(
        self,
        backend_id: str,
        messages: Sequence[ChatMessage],
        params: Optional[Dict] = None,
    ) -> ChatExchange:
        spec = self.get_backend(backend_id)
        if not messages:
            raise InvalidMessage("At least one message is required")
        params = params or {}
        body = {
            "model": spec.model_name,
            "messages": [m.to_dict() for m in messages],
            "temperature": params.get("temperature", spec.temperature),
            "max_tokens": params.get("max_tokens", spec.max_tokens),
        }
        timeout = params.get("timeout", spec.timeout)
        url = spec.base_url.rstrip("/") + "/chat/completions"
        headers = self._headers(spec)

        started = self.clock.monotonic()
        attempts = spec.max_retries + 1
        last_exc = None
        for attempt in range(1, attempts + 1):
            try:
                resp = self.session.post(
                    url, json=body, headers=headers, timeout=timeout
                )
                resp.raise_for_status()
            except (ConnectionError_, HTTPError, Timeout_) as exc:
                response = exc.response
                status_code = response.status_code if response is not None else 0
                if isinstance(exc, HTTPError) and status_code not in RETRYABLE_STATUS:
                    raise TransportExhausted(
                        f"{backend_id} rejected the request with {status_code}",
                        status_code=status_code,
                        attempt_count=attempt,
                    ) from exc
                last_exc = exc
                if attempt < attempts:
                    delay = self.backoff_delay(attempt)
                    LOGGER.warning(
                        "Attempt %d/%d on %s failed (%s), retrying in %.3fs",
                        attempt,
                        attempts,
                        backend_id,
                        exc,
                        delay,
                    )
                    self.sleep(delay)
                continue
            text = _read_completion(resp)
            return ChatExchange(
                backend_id=backend_id,
                request_messages=tuple(messages),
                response_text=text,
                latency=max(0.0, self.clock.monotonic() - started),
                attempt_count=attempt,
                finished_at=self.clock.now(),
            )

        status_code = 0
        if getattr(last_exc, "response", None) is not None:
            status_code = last_exc.response.status_code
        error_cls = Timeout if isinstance(last_exc, Timeout_) else TransportExhausted
        raise error_cls(
            f"{backend_id} failed after {attempts} attempts: {last_exc}",
            status_code=status_code,
            attempt_count=attempts,
        ) from last_exc
