import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from kermit.augment import BACKWARD, FORWARD, Query, symmetrize
from kermit.describe import (DEFAULT_TEMPLATE, DescriptionCache, GenerationClient,
                             HTTPGenerationClient, PredictiveDescription, PromptTemplate,
                             QueryKey, StubClient, TokenBucket, cache_path, describe_queries,
                             description_text, generate_description, query_key, render_prompt,
                             stub_describe)
from kermit.exceptions import DataError, GenerationError, TemplateError
from kermit.kg import Entity, bundled_fixture, load_dataset

FIXTURES = Path(__file__).parent / "fixtures"
LAND_REFORM_DESC = "a redistribution of agricultural land (especially by government action)"


@pytest.fixture(scope="module")
def mini():
    return load_dataset(bundled_fixture())


def land_reform_query(g):
    return Query(g.entity_id("00001"), g.relation_id("_hypernym"), FORWARD)


def test_prompt_matches_fixture():
    src = Entity(0, "x", "land reform", LAND_REFORM_DESC)
    expected = (FIXTURES / "land_reform_prompt.txt").read_text(encoding="utf-8")
    assert render_prompt(DEFAULT_TEMPLATE, src, "hypernym") == expected


def test_template_missing_slot():
    with pytest.raises(TemplateError, match="h_name"):
        PromptTemplate(DEFAULT_TEMPLATE.text.replace("{h_name}", ""))


def test_template_unknown_slot():
    with pytest.raises(TemplateError, match="t_name"):
        PromptTemplate("{h_name} {h_desp} {r_name} {t_name}")


def test_empty_description_renders_empty_quotes():
    out = render_prompt(DEFAULT_TEMPLATE, Entity(0, "x", "thing", ""), "rel")
    assert 'with description ""' in out


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=30), st.text(max_size=30), st.text(max_size=30))
def test_substitution_is_single_pass(name, desc, rel):
    tpl = PromptTemplate("<{h_name}|{h_desp}|{r_name}>")
    out = render_prompt(tpl, Entity(0, "x", name, desc), rel)
    assert out == f"<{name}|{desc}|{rel}>"


def test_stub_text(mini):
    q = land_reform_query(mini)
    expected = ('Entity such that the relationship between "land reform" and the entity is '
                '"hypernym". ' + LAND_REFORM_DESC)
    assert stub_describe(q, mini) == expected
    assert stub_describe(q, mini) == stub_describe(q, mini)


def test_stub_text_without_description(mini):
    from kermit.kg import KnowledgeGraph
    ents = list(mini.entities)
    ents[0] = Entity(0, ents[0].raw_key, ents[0].name, "")
    g = KnowledgeGraph(ents, mini.registry, mini.train, mini.valid, mini.test)
    assert stub_describe(land_reform_query(g), g).endswith('is "hypernym".')


@dataclass
class CountingClient(GenerationClient):
    calls: int = 0
    fail: bool = False

    def send(self, prompt):
        self.calls += 1
        if self.fail:
            raise ConnectionError("down")
        return f"reply {len(prompt)}"


def test_cache_hit_makes_no_calls(mini, tmp_path):
    cache = DescriptionCache(tmp_path / "c.jsonl")
    client = CountingClient()
    q = land_reform_query(mini)
    first = generate_description(client, cache, DEFAULT_TEMPLATE, q, mini)
    second = generate_description(client, cache, DEFAULT_TEMPLATE, q, mini)
    assert first.provenance == "service" and second.provenance == "cache"
    assert second.text == first.text
    assert client.calls == 1


def test_stub_client_fresh_query(mini, tmp_path):
    cache = DescriptionCache(tmp_path / "c.jsonl")
    q = land_reform_query(mini)
    d = generate_description(StubClient(), cache, DEFAULT_TEMPLATE, q, mini)
    assert d.provenance == "service"
    assert d.text == stub_describe(q, mini)
    row = json.loads((tmp_path / "c.jsonl").read_text(encoding="utf-8"))
    assert row == {"key": {"source": "00001", "relation": "_hypernym", "direction": "fwd"},
                   "text": d.text, "provenance": "stub"}


def test_retry_arithmetic(mini, tmp_path):
    sleeps = []
    client = CountingClient(retries=2, fail=True, sleep=sleeps.append)
    with pytest.raises(GenerationError) as info:
        generate_description(client, DescriptionCache(tmp_path / "c.jsonl"), DEFAULT_TEMPLATE,
                             land_reform_query(mini), mini)
    assert client.calls == 3
    assert sleeps == [0.5, 1.0]
    assert info.value.query_key == QueryKey("00001", "_hypernym", "fwd")
    assert not (tmp_path / "c.jsonl").exists()


def test_cache_last_line_wins_and_malformed(tmp_path):
    path = tmp_path / "c.jsonl"
    key = QueryKey("a", "r", "fwd")
    c = DescriptionCache(path)
    c.put(PredictiveDescription(key, "one", "stub"))
    c.put(PredictiveDescription(key, "two", "service"))
    assert DescriptionCache(path).get(key).text == "two"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{not json\n")
    with pytest.raises(DataError, match=":3:"):
        DescriptionCache(path)


def test_cache_path_naming(tmp_path):
    assert cache_path(tmp_path / "wn18rr").name == "descriptions.wn18rr.jsonl"
    assert cache_path(tmp_path, "fb").name == "descriptions.fb.jsonl"


def test_description_text_missing(mini):
    with pytest.raises(DataError):
        description_text({}, land_reform_query(mini), mini)
    with pytest.raises(DataError):
        description_text(None, land_reform_query(mini), mini)


def test_describe_is_idempotent(mini, tmp_path):
    path = tmp_path / "c.jsonl"
    queries = [q for s in ("train", "valid", "test") for q in symmetrize(mini, mini.registry, s)]
    n_keys = len({query_key(q, mini) for q in queries})
    assert n_keys < len(queries)  # two answers share (think, hyponym, bwd)
    r1 = describe_queries(StubClient(), DescriptionCache(path), queries, mini)
    before = path.read_bytes()
    r2 = describe_queries(StubClient(), DescriptionCache(path), queries, mini)
    assert r1.generated == n_keys and r2.generated == 0 and r2.cached == n_keys
    assert path.read_bytes() == before


def test_describe_writes_in_query_order(mini, tmp_path):
    path = tmp_path / "c.jsonl"
    queries = symmetrize(mini, mini.registry, "train")
    describe_queries(StubClient(max_concurrency=4), DescriptionCache(path), queries, mini)
    keys = [tuple(json.loads(l)["key"].values()) for l in path.read_text().splitlines()]
    expected = list(dict.fromkeys(tuple(query_key(q, mini)) for q in queries))
    assert keys == expected


@dataclass
class FlakyClient(GenerationClient):
    bad: frozenset = frozenset()

    def send(self, prompt):
        if any(b in prompt for b in self.bad):
            raise ConnectionError("nope")
        return "ok"


def test_partial_failure_then_resume(mini, tmp_path):
    path = tmp_path / "c.jsonl"
    queries = symmetrize(mini, mini.registry, "train")
    flaky = FlakyClient(retries=0, max_concurrency=2, bad=frozenset({'"think"'}))
    with pytest.raises(GenerationError):
        describe_queries(flaky, DescriptionCache(path), queries, mini)
    n_keys = len({query_key(q, mini) for q in queries})
    done = len(DescriptionCache(path))
    assert 0 < done < n_keys
    report = describe_queries(FlakyClient(retries=0), DescriptionCache(path), queries, mini)
    assert report.generated == n_keys - done and report.cached == done


def test_token_bucket_waits():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    bucket = TokenBucket(rate=2.0, capacity=1.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        bucket.acquire()
    assert waits == pytest.approx([0.5, 0.5])


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.headers.get("Authorization"), body))
        if len(_Handler.seen) == 1:
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({"choices": [{"message": {"content": "a kind of change"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_http_client_against_local_server(mini, tmp_path, monkeypatch):
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv("KERMIT_SERVICE_URL", f"http://127.0.0.1:{server.server_port}/v1")
        monkeypatch.setenv("KERMIT_SERVICE_KEY", "sekret")
        monkeypatch.setenv("KERMIT_SERVICE_MODEL", "m1")
        client = HTTPGenerationClient.from_env(rate=None, sleep=lambda s: None, timeout=5)
        assert "sekret" not in repr(client)
        d = generate_description(client, DescriptionCache(tmp_path / "c.jsonl"),
                                 DEFAULT_TEMPLATE, land_reform_query(mini), mini)
    finally:
        server.shutdown()
    assert d.text == "a kind of change" and d.provenance == "service"
    assert len(_Handler.seen) == 2
    auth, body = _Handler.seen[-1]
    assert auth == "Bearer sekret" and body["model"] == "m1"
    assert "land reform" in body["messages"][0]["content"]


def test_http_client_needs_url(monkeypatch):
    monkeypatch.delenv("KERMIT_SERVICE_URL", raising=False)
    with pytest.raises(GenerationError, match="KERMIT_SERVICE_URL"):
        HTTPGenerationClient.from_env()


def test_backward_query_key(mini):
    q = Query(mini.entity_id("00004"), mini.relation_id("_hyponym"), BACKWARD)
    assert query_key(q, mini) == QueryKey("00004", "_hyponym", "bwd")
