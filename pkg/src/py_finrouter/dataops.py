"""Market data providers, the response cache and the retrieval index.

Both providers speak Finnhub-shaped payloads: the live one over HTTP, the
fixture one by synthesizing the same payloads from committed JSON files.
Everything downstream of `Provider._fetch` is shared, so the two produce
structurally identical domain objects.
"""
import calendar
import hashlib
import json
import os
import re
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from decimal import Decimal, InvalidOperation
from logging import getLogger
from os import environ
from pathlib import Path as LibPath
from threading import Lock
from time import sleep as sleep_
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests
from rank_bm25 import BM25Plus
from requests.exceptions import ConnectionError as ConnectionError_
from requests.exceptions import Timeout

LOGGER = getLogger(__name__)

BUNDLED_FIXTURE_DIR = LibPath(__file__).parent / "data" / "fixtures"
DEFAULT_FINNHUB_URL = "https://finnhub.io/api/v1"
TOKEN = re.compile(r"[^\W_]+")
BM25_K1 = 1.2
BM25_B = 0.75
# Gain every query term adds on top of its saturated frequency
BM25_DELTA = 1.0
CHUNK_SIZE = 1000
CHUNK_OVERLAP = 200


class DataOpsError(Exception):
    pass


class UnknownSymbol(DataOpsError):
    def __init__(self, symbol: str):
        self.symbol = symbol
        super().__init__(f"Unknown symbol: {symbol}")


class ProviderFailure(DataOpsError):
    def __init__(self, *args, status_code: int = 0):
        self.status_code = status_code
        super().__init__(*args)


class RateLimited(ProviderFailure):
    def __init__(self, retry_after: float):
        self.retry_after = retry_after
        super().__init__(f"Rate limited, retry after {retry_after}s", status_code=429)


class InvalidSeries(DataOpsError):
    pass


class CacheMiss(DataOpsError):
    pass


class ImmutableEntry(DataOpsError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"Cache entry already written with other content: {key}")


class EmptyCorpus(DataOpsError):
    pass


class EmptyQuery(DataOpsError):
    pass


class DuplicateDocument(DataOpsError):
    pass


def to_timestamp(day: date) -> int:
    return calendar.timegm(day.timetuple())


def from_timestamp(value: int) -> date:
    return datetime.fromtimestamp(int(value), tz=timezone.utc).date()


def to_decimal(value: Any) -> Decimal:
    try:
        return Decimal(str(value))
    except InvalidOperation as exc:
        raise InvalidSeries(f"Not a price: {value!r}") from exc


# Domain types


@dataclass(frozen=True)
class CompanyProfile:
    symbol: str
    name: str
    exchange: str
    industry: str
    market_cap: Decimal
    currency: str = "USD"
    description: str = ""
    ipo: Optional[date] = None


@dataclass(frozen=True)
class NewsItem:
    headline: str
    summary: str
    dated: date
    source_id: str
    source: str = ""


@dataclass(frozen=True)
class PriceSeries:
    symbol: str
    observations: Tuple[Tuple[date, Decimal], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        days = [day for day, _ in self.observations]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise InvalidSeries(f"{self.symbol}: dates must be strictly increasing")
        if any(price <= 0 for _, price in self.observations):
            raise InvalidSeries(f"{self.symbol}: prices must be positive")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def dates(self) -> List[date]:
        return [day for day, _ in self.observations]

    def closes(self) -> np.ndarray:
        """Prices as floats, converted only here at the computation boundary."""
        return np.array([float(price) for _, price in self.observations], dtype=float)


@dataclass(frozen=True)
class BasicFinancials:
    period: Optional[date]
    ratios: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CompanyBundle:
    symbol: str
    profile: Optional[CompanyProfile]
    prices: PriceSeries
    news: Tuple[NewsItem, ...]
    financials: BasicFinancials
    cutoff: date

    def is_empty(self) -> bool:
        return not (self.prices.observations or self.news or self.financials.ratios)

    def latest_date(self) -> Optional[date]:
        days = [d for d, _ in self.prices.observations] + [n.dated for n in self.news]
        if self.financials.period:
            days.append(self.financials.period)
        return max(days) if days else None


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Passage:
    text: str
    source_id: str
    score: float


# Cache


def cache_key(provider_id: str, endpoint: str, params: Dict[str, Any]) -> str:
    canonical = json.dumps(
        {
            "provider": provider_id,
            "endpoint": endpoint,
            "params": sorted((str(k), str(v)) for k, v in params.items()),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()


class ResponseCache:
    """Content-addressed, write-once store of raw provider responses.

    Entries live at `<directory>/<key[:2]>/<key>`; without a directory the
    cache is held in memory.
    """

    def __init__(self, directory: Optional[LibPath] = None, enabled: bool = True):
        self.directory = LibPath(directory) if directory else None
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._memory: Dict[str, bytes] = {}
        self._locks: Dict[str, Lock] = {}
        self._guard = Lock()

    def _lock(self, key: str) -> Lock:
        with self._guard:
            return self._locks.setdefault(key, Lock())

    def _path(self, key: str) -> LibPath:
        return self.directory / key[:2] / key

    def _read(self, key: str) -> Optional[bytes]:
        if self.directory is None:
            return self._memory.get(key)
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, "rb") as f:
            return f.read()

    def get(self, key: str) -> bytes:
        data = self._read(key) if self.enabled else None
        with self._guard:
            if data is None:
                self.misses += 1
            else:
                self.hits += 1
        if data is None:
            raise CacheMiss(key)
        LOGGER.debug("Cache hit: %s", key)
        return data

    def put(self, key: str, data: bytes) -> None:
        if not self.enabled:
            return
        with self._lock(key):
            existing = self._read(key)
            if existing is not None:
                if existing != data:
                    raise ImmutableEntry(key)
                return
            if self.directory is None:
                self._memory[key] = data
                return
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f"{key}.{os.getpid()}.tmp")
            with open(tmp, "wb") as f:
                f.write(data)
            os.replace(tmp, path)


# Providers


class Provider(ABC):
    """Finnhub-shaped market data source with caching and normalization."""

    provider_id = "provider"

    def __init__(self, cache: Optional[ResponseCache] = None):
        self.cache = cache if cache is not None else ResponseCache(enabled=False)
        self.upstream_calls = 0

    @abstractmethod
    def _request(self, endpoint: str, params: Dict[str, Any]) -> bytes:
        """Raw response body for one endpoint call."""

    def _fetch(self, endpoint: str, params: Dict[str, Any]) -> Any:
        key = cache_key(self.provider_id, endpoint, params)
        try:
            data = self.cache.get(key)
        except CacheMiss:
            LOGGER.debug("Fetch %s %s from %s", endpoint, params, self.provider_id)
            data = self._request(endpoint, params)
            self.upstream_calls += 1
            self.cache.put(key, data)
        try:
            return json.loads(data, parse_float=Decimal)
        except ValueError as exc:
            raise ProviderFailure(f"{endpoint} returned invalid JSON") from exc

    def get_company_profile(self, symbol: str) -> CompanyProfile:
        payload = self._fetch("stock/profile2", {"symbol": symbol})
        if not payload:
            raise UnknownSymbol(symbol)
        ipo = payload.get("ipo")
        return CompanyProfile(
            symbol=payload.get("ticker") or symbol,
            name=payload.get("name", ""),
            exchange=payload.get("exchange", ""),
            industry=payload.get("finnhubIndustry", ""),
            market_cap=to_decimal(payload.get("marketCapitalization", 0)),
            currency=payload.get("currency", "USD"),
            description=payload.get("description", ""),
            ipo=date.fromisoformat(ipo) if ipo else None,
        )

    def get_price_window(self, symbol: str, start: date, end: date) -> PriceSeries:
        payload = self._fetch(
            "stock/candle",
            {
                "symbol": symbol,
                "resolution": "D",
                "from": to_timestamp(start),
                "to": to_timestamp(end) + 86399,
            },
        )
        if payload.get("s") == "no_data":
            return PriceSeries(symbol)
        if payload.get("s") != "ok":
            raise ProviderFailure(f"Candle status for {symbol}: {payload.get('s')}")
        observations = {}
        for stamp, close in zip(payload.get("t", []), payload.get("c", [])):
            day = from_timestamp(stamp)
            if start <= day <= end:
                observations[day] = to_decimal(close)
        return PriceSeries(symbol, tuple(sorted(observations.items())))

    def get_news(self, symbol: str, start: date, end: date) -> List[NewsItem]:
        payload = self._fetch(
            "company-news",
            {"symbol": symbol, "from": start.isoformat(), "to": end.isoformat()},
        )
        items = []
        for raw in payload or []:
            day = from_timestamp(raw["datetime"])
            if not start <= day <= end:
                continue
            items.append(
                NewsItem(
                    headline=raw.get("headline", ""),
                    summary=raw.get("summary", ""),
                    dated=day,
                    source_id=str(raw.get("id", "")),
                    source=raw.get("source", ""),
                )
            )
        return sorted(items, key=lambda n: (n.dated, n.source_id))

    def get_basic_financials(self, symbol: str, as_of: date) -> BasicFinancials:
        """Latest quarterly value of each ratio reported on or before `as_of`."""
        payload = self._fetch("stock/metric", {"symbol": symbol, "metric": "all"})
        quarterly = (payload.get("series") or {}).get("quarterly") or {}
        ratios: Dict[str, float] = {}
        periods = []
        for name in sorted(quarterly):
            points = [
                (date.fromisoformat(p["period"]), p["v"])
                for p in quarterly[name]
                if date.fromisoformat(p["period"]) <= as_of
            ]
            if not points:
                continue
            period, value = max(points, key=lambda p: p[0])
            ratios[name] = float(value)
            periods.append(period)
        return BasicFinancials(period=max(periods) if periods else None, ratios=ratios)

    def get_peers(self, symbol: str) -> List[str]:
        payload = self._fetch("stock/peers", {"symbol": symbol})
        peers: List[str] = []
        for peer in payload or []:
            if peer not in peers:
                peers.append(peer)
        return peers


class FixtureProvider(Provider):
    """Serves Finnhub-shaped payloads built from `<fixture_dir>/<symbol>.json`."""

    provider_id = "fixture"

    def __init__(self, fixture_dir: LibPath = BUNDLED_FIXTURE_DIR, cache=None):
        super().__init__(cache)
        self.fixture_dir = LibPath(fixture_dir)
        # Cached responses belong to one fixture directory
        self.provider_id = f"fixture:{self.fixture_dir.resolve()}"
        self._fixtures: Dict[str, Dict] = {}
        self._guard = Lock()

    def _load(self, symbol: str) -> Dict:
        with self._guard:
            if symbol not in self._fixtures:
                path = self.fixture_dir / f"{symbol}.json"
                if not path.is_file():
                    raise UnknownSymbol(symbol)
                with open(path, encoding="utf8") as f:
                    self._fixtures[symbol] = json.load(f)
            return self._fixtures[symbol]

    def _request(self, endpoint: str, params: Dict[str, Any]) -> bytes:
        symbol = params["symbol"]
        fixture = self._load(symbol)
        if endpoint == "stock/profile2":
            profile = fixture.get("profile", {})
            payload = {
                "ticker": symbol,
                "name": profile.get("name", ""),
                "exchange": profile.get("exchange", ""),
                "finnhubIndustry": profile.get("industry", ""),
                "marketCapitalization": profile.get("market_cap", "0"),
                "currency": profile.get("currency", "USD"),
                "ipo": profile.get("ipo", ""),
                "description": profile.get("description", ""),
            }
        elif endpoint == "stock/candle":
            rows = [
                row
                for row in fixture.get("prices", [])
                if params["from"]
                <= to_timestamp(date.fromisoformat(row["date"]))
                <= params["to"]
            ]
            payload = {
                "s": "ok" if rows else "no_data",
                "t": [to_timestamp(date.fromisoformat(row["date"])) for row in rows],
                "c": [row["close"] for row in rows],
            }
        elif endpoint == "company-news":
            start = date.fromisoformat(params["from"])
            end = date.fromisoformat(params["to"])
            payload = [
                {
                    "id": item["id"],
                    "headline": item["headline"],
                    "summary": item.get("summary", ""),
                    "source": item.get("source", ""),
                    "datetime": to_timestamp(date.fromisoformat(item["date"])),
                }
                for item in fixture.get("news", [])
                if start <= date.fromisoformat(item["date"]) <= end
            ]
        elif endpoint == "stock/metric":
            quarterly: Dict[str, List[Dict]] = {}
            for statement in fixture.get("financials", []):
                for name, value in statement["ratios"].items():
                    quarterly.setdefault(name, []).append(
                        {"period": statement["period"], "v": value}
                    )
            payload = {
                "symbol": symbol,
                "metricType": "all",
                "metric": {},
                "series": {"quarterly": quarterly},
            }
        elif endpoint == "stock/peers":
            payload = fixture.get("peers", [])
        else:
            raise ProviderFailure(f"Fixture provider has no endpoint {endpoint}")
        return json.dumps(payload, ensure_ascii=False, sort_keys=True).encode("utf8")


class FinnhubProvider(Provider):
    """Live provider for Finnhub-compatible REST endpoints."""

    provider_id = "finnhub"

    def __init__(
        self,
        base_url: str = DEFAULT_FINNHUB_URL,
        token_env: str = "FINNHUB_API_KEY",
        cache: Optional[ResponseCache] = None,
        session: Optional[requests.Session] = None,
        timeout: float = 10.0,
        max_retries: int = 2,
        sleep: Callable[[float], None] = sleep_,
    ):
        super().__init__(cache)
        self.base_url = base_url.rstrip("/")
        self.provider_id = f"finnhub:{self.base_url}"
        self.token_env = token_env
        self.session = session or requests.Session()
        self.timeout = timeout
        self.max_retries = max_retries
        self.sleep = sleep

    def _request(self, endpoint: str, params: Dict[str, Any]) -> bytes:
        token = environ.get(self.token_env)
        if not token:
            raise ProviderFailure(
                f"Provider token env var is not set: {self.token_env}"
            )
        url = f"{self.base_url}/{endpoint}"
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.session.get(
                    url, params={**params, "token": token}, timeout=self.timeout
                )
            except (ConnectionError_, Timeout) as exc:
                raise ProviderFailure(f"{endpoint} unreachable: {exc}") from exc
            if resp.status_code == 429:
                retry_after = float(resp.headers.get("Retry-After", 1))
                if attempt < self.max_retries:
                    LOGGER.warning(
                        "Rate limited on %s, waiting %ss", endpoint, retry_after
                    )
                    self.sleep(retry_after)
                    continue
                raise RateLimited(retry_after)
            if resp.status_code >= 400:
                raise ProviderFailure(
                    f"{endpoint} answered {resp.status_code}",
                    status_code=resp.status_code,
                )
            return resp.content
        raise ProviderFailure(f"{endpoint} retries exhausted")


def company_bundle(
    provider: Provider,
    symbol: str,
    cutoff: date,
    lookback_days: int = 28,
    max_news: int = 5,
) -> CompanyBundle:
    """Assemble everything dated strictly before `cutoff`."""
    last_day = cutoff - timedelta(days=1)
    start = cutoff - timedelta(days=lookback_days)
    prices = provider.get_price_window(symbol, start, last_day)
    news = provider.get_news(symbol, start, last_day)
    financials = provider.get_basic_financials(symbol, last_day)
    # Re-verify client side: nothing on or after the cutoff
    prices = PriceSeries(symbol, tuple(o for o in prices.observations if o[0] < cutoff))
    news = tuple(n for n in news if n.dated < cutoff)[-max_news:] if max_news else ()
    return CompanyBundle(
        symbol=symbol,
        profile=provider.get_company_profile(symbol),
        prices=prices,
        news=news,
        financials=financials,
        cutoff=cutoff,
    )


# Retrieval


def tokenize(text: str) -> List[str]:
    """Lowercase, split on non-alphanumerics, drop single characters."""
    return [token for token in TOKEN.findall(text.lower()) if len(token) > 1]


def chunk_text(
    text: str, source: str, size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP
) -> List[Document]:
    if not 0 <= overlap < size:
        raise ValueError("overlap must be smaller than the chunk size")
    documents = []
    start = 0
    while start < len(text):
        documents.append(
            Document(
                doc_id=f"{source}#{len(documents):04d}",
                text=text[start : start + size],
                metadata={"source": source, "offset": start},
            )
        )
        if start + size >= len(text):
            break
        start += size - overlap
    return documents


@dataclass
class RetrievalIndex:
    documents: List[Document]
    postings: Dict[str, List[Tuple[str, int]]]
    doc_lengths: Dict[str, int]
    average_doc_length: float
    bm25: BM25Plus = field(repr=False, compare=False, default=None)

    def __len__(self) -> int:
        return len(self.documents)


def build_postings(
    documents: Sequence[Document],
) -> Tuple[Dict[str, List[Tuple[str, int]]], Dict[str, int], List[List[str]]]:
    postings: Dict[str, List[Tuple[str, int]]] = {}
    lengths: Dict[str, int] = {}
    tokenized = []
    for doc in documents:
        tokens = tokenize(doc.text)
        tokenized.append(tokens)
        lengths[doc.doc_id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc.doc_id, tf))
    return postings, lengths, tokenized


def index_documents(docs: Sequence[Document]) -> RetrievalIndex:
    documents = list(docs)
    if not documents:
        raise EmptyCorpus("Nothing to index")
    ids = [doc.doc_id for doc in documents]
    if len(set(ids)) != len(ids):
        raise DuplicateDocument("Document ids must be unique")
    postings, lengths, tokenized = build_postings(documents)
    if not postings:
        raise EmptyCorpus("No document has indexable tokens")
    return RetrievalIndex(
        documents=documents,
        postings=postings,
        doc_lengths=lengths,
        average_doc_length=sum(lengths.values()) / len(lengths),
        bm25=BM25Plus(tokenized, k1=BM25_K1, b=BM25_B, delta=BM25_DELTA),
    )


def retrieve(index: RetrievalIndex, query: str, k: int = 5) -> List[Passage]:
    """Top-k BM25 passages among documents sharing a term with the query."""
    if k < 1:
        raise ValueError("k must be at least 1")
    terms = tokenize(query)
    if not terms:
        raise EmptyQuery(f"No searchable terms in {query!r}")
    scores = index.bm25.get_scores(terms)
    matching = {doc_id for term in terms for doc_id, _ in index.postings.get(term, [])}
    ranked = sorted(
        (-float(scores[i]), doc.doc_id, i)
        for i, doc in enumerate(index.documents)
        if doc.doc_id in matching
    )
    return [
        Passage(index.documents[i].text, doc_id, -neg_score)
        for neg_score, doc_id, i in ranked[:k]
    ]
