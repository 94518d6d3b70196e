"""Predictive descriptions: prompt rendering, generation clients, JSONL cache.

Descriptions are produced once, ahead of training, and persisted in an
append-only JSONL file so an interrupted run can resume where it stopped.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .augment import DIRECTIONS
from .exceptions import DataError, GenerationError, TemplateError

logger = logging.getLogger(__name__)

SLOTS = ("h_name", "h_desp", "r_name")
_SLOT_RE = re.compile(r"\{(h_name|h_desp|r_name)\}")
_ANY_SLOT_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

DEFAULT_TEMPLATE_TEXT = (
    'I have an entity called "{h_name}" with description "{h_desp}", '
    'and a relation called "{r_name}". Below are their descriptions:\n'
    'You task is to find an entity such that the relationship between "{h_name}" '
    'and the entity is "{r_name}". Generate a description of the entity. '
    'Your response should be limited in 50 words.'
)

PROVENANCES = ("service", "stub", "cache")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt text with ``{h_name}``, ``{h_desp}`` and ``{r_name}`` slots.

    Every slot must occur at least once; no other ``{...}`` markers are allowed.
    """

    text: str = DEFAULT_TEMPLATE_TEXT

    def __post_init__(self):
        found = _ANY_SLOT_RE.findall(self.text)
        unknown = sorted(set(found) - set(SLOTS))
        if unknown:
            raise TemplateError(f"unknown template slots: {unknown}")
        missing = [s for s in SLOTS if s not in found]
        if missing:
            raise TemplateError(f"template is missing slots: {missing}")


DEFAULT_TEMPLATE = PromptTemplate()


def render_prompt(tpl: PromptTemplate, source, relation_name: str) -> str:
    """Fill the template for the query ``(source, relation, ?)``.

    For a backward query pass the tail entity and the inverse relation name.
    Substitution is single-pass, so slot-like text inside a description is
    left untouched.
    """
    if not isinstance(tpl, PromptTemplate):
        tpl = PromptTemplate(tpl)
    values = {"h_name": source.name, "h_desp": source.description, "r_name": relation_name}
    return _SLOT_RE.sub(lambda m: values[m.group(1)], tpl.text)


class QueryKey(NamedTuple):
    source: str
    relation: str
    direction: str


def query_key(query, graph) -> QueryKey:
    return QueryKey(graph.entities[query.source].raw_key,
                    graph.relations[query.relation].raw_key,
                    query.direction)


@dataclass(frozen=True)
class PredictiveDescription:
    query_key: QueryKey
    text: str
    provenance: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("predictive description text must be non-empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


def stub_describe(query, graph) -> str:
    """Deterministic offline stand-in for a generated description."""
    source = graph.entities[query.source]
    relation = graph.relations[query.relation].name
    text = (f'Entity such that the relationship between "{source.name}" '
            f'and the entity is "{relation}".')
    head = source.description.split()[:20]
    if head:
        text += " " + " ".join(head)
    return text


class DescriptionCache:
    """Append-only JSONL store of predictive descriptions.

    Readers see the snapshot loaded at construction plus this process's own
    writes; on duplicate keys the last line wins.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._entries: dict[QueryKey, PredictiveDescription] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    k = row["key"]
                    key = QueryKey(k["source"], k["relation"], k["direction"])
                    self._entries[key] = PredictiveDescription(key, row["text"], row["provenance"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{self.path}:{lineno}: malformed cache line ({exc})") from None

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key, default=None):
        return self._entries.get(key, default)

    def keys(self):
        return self._entries.keys()

    def put(self, desc: PredictiveDescription) -> None:
        row = {
            "key": {"source": desc.query_key.source,
                    "relation": desc.query_key.relation,
                    "direction": desc.query_key.direction},
            "text": desc.text,
            "provenance": desc.provenance,
        }
        line = json.dumps(row, ensure_ascii=False) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._entries[desc.query_key] = desc


def cache_path(data_dir, dataset: str | None = None) -> Path:
    data_dir = Path(data_dir)
    return data_dir / f"descriptions.{dataset or data_dir.name}.jsonl"


def description_text(descriptions, query, graph) -> str:
    """Look up the predictive description of ``query``; raise if absent."""
    key = query_key(query, graph)
    found = None if descriptions is None else descriptions.get(key)
    if found is None:
        raise DataError(f"no predictive description for query {tuple(key)}")
    return getattr(found, "text", found)


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(self, rate: float, capacity: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity
        self._tokens = capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class GenerationClient:
    """Interface to a text-generation backend.

    Subclasses implement :meth:`send`.  ``retries`` counts attempts beyond
    the first; ``max_concurrency`` bounds in-flight requests.
    """

    retries: int = 2
    backoff: float = 0.5
    max_backoff: float = 8.0
    timeout: float = 60.0
    max_concurrency: int = 4
    sleep: object = field(default=time.sleep, repr=False)

    provenance = "service"

    def send(self, prompt: str) -> str:
        raise NotImplementedError

    def generate(self, prompt: str, query, graph) -> str:
        return self.send(prompt)


@dataclass
class StubClient(GenerationClient):
    """Offline client returning :func:`stub_describe` text."""

    provenance = "stub"

    def send(self, prompt: str) -> str:
        raise NotImplementedError("StubClient needs the query; use generate()")

    def generate(self, prompt: str, query, graph) -> str:
        return stub_describe(query, graph)


def _dig(obj, path):
    for part in path:
        obj = obj[part]
    return obj


@dataclass
class HTTPGenerationClient(GenerationClient):
    """JSON-over-HTTP client for chat-completion style endpoints.

    The request body and the response path are configurable; the defaults
    follow the common ``messages``/``choices`` chat schema.
    """

    url: str = ""
    api_key: str = field(default="", repr=False)
    model: str = ""
    response_path: tuple = ("choices", 0, "message", "content")
    rate: float | None = 1.0
    extra_body: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.url:
            raise ValueError("service url is required")
        self._bucket = TokenBucket(self.rate, sleep=self.sleep) if self.rate else None

    @classmethod
    def from_env(cls, **kwargs):
        url = os.environ.get("KERMIT_SERVICE_URL", "")
        if not url:
            raise GenerationError("KERMIT_SERVICE_URL is not set")
        return cls(url=url, api_key=os.environ.get("KERMIT_SERVICE_KEY", ""),
                   model=os.environ.get("KERMIT_SERVICE_MODEL", ""), **kwargs)

    def build_request(self, prompt: str) -> dict:
        body = {"messages": [{"role": "user", "content": prompt}]}
        if self.model:
            body["model"] = self.model
        body.update(self.extra_body)
        return body

    def send(self, prompt: str) -> str:
        if self._bucket is not None:
            self._bucket.acquire()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            self.url, data=json.dumps(self.build_request(prompt)).encode("utf-8"),
            headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        try:
            return _dig(payload, self.response_path)
        except (KeyError, IndexError, TypeError):
            raise GenerationError(f"unexpected response shape: {str(payload)[:200]}") from None


def _obtain(client: GenerationClient, prompt: str, query, graph, key) -> str:
    attempts = client.retries + 1
    last = None
    for attempt in range(attempts):
        try:
            text = client.generate(prompt, query, graph)
            if not isinstance(text, str) or not text:
                raise GenerationError("empty response")
            return text
        except Exception as exc:  # noqa: BLE001 - any transport failure is retried
            last = exc
            logger.debug("attempt %d/%d for %s failed: %r", attempt + 1, attempts, key, exc)
            if attempt + 1 < attempts:
                client.sleep(min(client.max_backoff, client.backoff * 2 ** attempt))
    raise GenerationError(f"generation failed after {attempts} attempts: {last!r}",
                          query_key=key) from last


def generate_description(client: GenerationClient, cache: DescriptionCache, tpl: PromptTemplate,
                         query, graph) -> PredictiveDescription:
    """Return the cached description for ``query`` or generate and store it.

    The result has provenance ``"cache"`` on a hit and ``"service"`` when a
    client was called, whichever backend that client is.
    """
    key = query_key(query, graph)
    hit = cache.get(key)
    if hit is not None:
        return PredictiveDescription(key, hit.text, "cache")
    prompt = render_prompt(tpl, graph.entities[query.source], graph.relations[query.relation].name)
    text = _obtain(client, prompt, query, graph, key)
    cache.put(PredictiveDescription(key, text, client.provenance))
    # the stored line names the backend; the caller only learns it was freshly generated
    return PredictiveDescription(key, text, "service")


@dataclass
class DescribeReport:
    generated: int = 0
    cached: int = 0
    failed: int = 0


def describe_queries(client: GenerationClient, cache: DescriptionCache, queries, graph,
                     tpl: PromptTemplate = DEFAULT_TEMPLATE) -> DescribeReport:
    """Fill the cache for every query not yet described.

    Requests run concurrently up to ``client.max_concurrency``; results are
    written in query order.  Successes are persisted even when some queries
    fail, after which the first failure is raised.
    """
    report = DescribeReport()
    pending = []
    seen = set()
    for q in queries:
        if q.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {q.direction!r}")
        key = query_key(q, graph)
        if key in seen:
            continue
        seen.add(key)
        if key in cache:
            report.cached += 1
            continue
        prompt = render_prompt(tpl, graph.entities[q.source], graph.relations[q.relation].name)
        pending.append((q, key, prompt))

    first_error = None
    workers = max(1, int(client.max_concurrency))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_obtain, client, prompt, q, graph, key) for q, key, prompt in pending]
        for (q, key, _), fut in zip(pending, futures):
            try:
                text = fut.result()
            except GenerationError as exc:
                report.failed += 1
                first_error = first_error or exc
                continue
            cache.put(PredictiveDescription(key, text, client.provenance))
            report.generated += 1
    if first_error is not None:
        raise first_error
    return report
