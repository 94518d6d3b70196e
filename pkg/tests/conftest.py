import numpy as np
import pytest

from kermit.augment import InverseRegistry, RelationEntry, symmetrize
from kermit.describe import DescriptionCache, StubClient, describe_queries
from kermit.kg import Entity, KnowledgeGraph, generate_synthetic_kg, load_dataset

WORDS = ["red", "blue", "stone", "river", "old", "quick", "tall", "green", "moss", "iron"]


def make_registry(n_relations):
    entries = []
    for k in range(n_relations):
        fwd, inv = f"r{k}", f"r{k}_inv"
        entries.append(RelationEntry(fwd, f"rel {WORDS[k % len(WORDS)]}", inv, f"inv {k}"))
        entries.append(RelationEntry(inv, f"inv {k}", fwd, f"rel {WORDS[k % len(WORDS)]}"))
    return InverseRegistry(entries)


def random_graph(rng, n_entities=8, n_relations=2, n_triples=12, n_words=4):
    """Small random graph; a narrow word pool makes duplicate texts (score ties) common."""
    pool = WORDS[:n_words]
    entities = []
    for i in range(n_entities):
        name = str(rng.choice(pool))
        desc = " ".join(rng.choice(pool, size=int(rng.integers(0, 3))))
        entities.append(Entity(i, f"e{i}", name, desc))
    reg = make_registry(n_relations)
    seen = set()
    for _ in range(n_triples * 4):
        h, t = (int(x) for x in rng.integers(0, n_entities, size=2))
        r = 2 * int(rng.integers(0, n_relations))
        seen.add((h, r, t))
        if len(seen) >= n_triples:
            break
    triples = sorted(seen)
    rng.shuffle(triples)
    n = len(triples)
    a, b = max(1, n // 2), max(2, (3 * n) // 4)
    return KnowledgeGraph(entities, reg, triples[:a], triples[a:b], triples[b:], name="rand")


def stub_descriptions(graph, path, splits=("train", "valid", "test")):
    cache = DescriptionCache(path)
    queries = [q for s in splits for q in symmetrize(graph, graph.registry, s)]
    describe_queries(StubClient(max_concurrency=1), cache, queries, graph)
    return cache


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    return generate_synthetic_kg(42, 50, 4, tmp_path_factory.mktemp("toy") / "toy")


@pytest.fixture(scope="session")
def toy_graph(toy_dir):
    return load_dataset(toy_dir)


@pytest.fixture(scope="session")
def toy_descriptions(toy_graph, tmp_path_factory):
    return stub_descriptions(toy_graph, tmp_path_factory.mktemp("cache") / "toy.jsonl")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1][2:].rstrip(":"))):
            terminalreporter.write_line(line)
