"""Knowledge-graph datasets: loading, interning, filter index, toy fixtures.

A dataset directory holds::

    train.txt valid.txt test.txt   head<TAB>relation<TAB>tail per line
    entities.tsv                   key<TAB>name<TAB>description
    relations.json                 inverse-relation registry

Entities and relations are interned to dense integer ids in file order.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .augment import BACKWARD, FORWARD, InverseRegistry, RelationEntry, load_inverse_registry
from .exceptions import DatasetError, ReferentialIntegrityError, RegistryError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Entity:
    id: int
    raw_key: str
    name: str
    description: str = ""

    @property
    def text(self) -> str:
        return f"{self.name}: {self.description}"


@dataclass(frozen=True)
class Relation:
    id: int
    raw_key: str
    name: str
    inverse_id: int


@dataclass(frozen=True)
class DatasetFormat:
    """File names used inside a dataset directory."""

    train: str = "train.txt"
    valid: str = "valid.txt"
    test: str = "test.txt"
    entities: str = "entities.tsv"
    relations: str = "relations.json"

    def split_file(self, split):
        return getattr(self, split)


class KnowledgeGraph:
    """Interned entities and relations with train/valid/test triple splits.

    Instances are treated as immutable once constructed.
    """

    def __init__(self, entities, registry: InverseRegistry, train=(), valid=(), test=(), name="kg"):
        self.name = name
        self.entities = tuple(entities)
        self.registry = registry
        self.relations = tuple(
            Relation(i, e.raw_key, e.name, registry.id_of(e.inverse_raw_key))
            for i, e in enumerate(registry.entries))
        self.train = tuple(Triple(*t) for t in train)
        self.valid = tuple(Triple(*t) for t in valid)
        self.test = tuple(Triple(*t) for t in test)
        self._entity_index = {e.raw_key: e.id for e in self.entities}
        for i, e in enumerate(self.entities):
            if e.id != i:
                raise DatasetError(f"entity {e.raw_key!r} has id {e.id}, expected {i}")
        if len(self._entity_index) != len(self.entities):
            raise DatasetError("entity raw keys are not unique")
        n_e, n_r = len(self.entities), len(self.relations)
        for split in SPLITS:
            for h, r, t in self.split(split):
                if not (0 <= h < n_e and 0 <= t < n_e and 0 <= r < n_r):
                    raise ReferentialIntegrityError(
                        f"triple {(h, r, t)} in {split} does not resolve")
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            both = set(self.split(a)) & set(self.split(b))
            if both:
                raise DatasetError(f"splits {a} and {b} share {len(both)} triples")

    def split(self, name: str) -> tuple:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def entity_id(self, raw_key: str) -> int:
        try:
            return self._entity_index[raw_key]
        except KeyError:
            raise KeyError(f"unknown entity {raw_key!r}") from None

    def relation_id(self, raw_key: str) -> int:
        return self.registry.id_of(raw_key)

    def entity_text(self, entity_id: int) -> str:
        return self.entities[entity_id].text

    def relation_name(self, relation_id: int) -> str:
        return self.relations[relation_id].name

    def used_relations(self) -> list[int]:
        """Relation ids that occur in at least one triple."""
        return sorted({t.relation for s in SPLITS for t in self.split(s)})

    def stats(self) -> dict:
        return {
            "relations": len(self.used_relations()),
            "entities": len(self.entities),
            "triples": sum(len(self.split(s)) for s in SPLITS),
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }

    def __repr__(self):
        s = self.stats()
        return (f"KnowledgeGraph(name={self.name!r}, entities={s['entities']}, "
                f"relations={s['relations']}, train={s['train']}, valid={s['valid']}, "
                f"test={s['test']})")


def _read_lines(path: Path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, line in enumerate(fh, start=1):
                yield lineno, line.rstrip("\r\n")
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}") from None


def _read_entities(path: Path) -> list[Entity]:
    entities = []
    seen = set()
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2 or len(parts) > 3:
            raise DatasetError(f"{path}:{lineno}: expected key<TAB>name<TAB>description")
        key, name = parts[0], parts[1]
        desc = parts[2] if len(parts) == 3 else ""
        if key in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate entity {key!r}")
        seen.add(key)
        if not name.strip():
            name = key
        entities.append(Entity(len(entities), key, name, desc))
    return entities


def _read_triples(path: Path, entity_index, registry: InverseRegistry) -> list[Triple]:
    triples = []
    seen = set()
    n_dup = 0
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
        h, r, t = parts
        for key in (h, t):
            if key not in entity_index:
                raise ReferentialIntegrityError(f"undeclared entity {key!r}", path, lineno)
        if r not in registry:
            raise ReferentialIntegrityError(f"undeclared relation {r!r}", path, lineno)
        triple = Triple(entity_index[h], registry.id_of(r), entity_index[t])
        if triple in seen:
            n_dup += 1
            continue
        seen.add(triple)
        triples.append(triple)
    if n_dup:
        logger.warning("%s: dropped %d duplicate triples", path, n_dup)
    return triples


def load_dataset(directory, format: DatasetFormat | None = None, name: str | None = None) -> KnowledgeGraph:
    """Load a dataset directory into an interned :class:`KnowledgeGraph`.

    Entities declared in the entity file but absent from every split are kept;
    they remain ranking candidates.
    """
    fmt = format or DatasetFormat()
    directory = Path(directory)
    rel_path = directory / fmt.relations
    if not rel_path.exists():
        raise DatasetError(f"missing dataset file: {rel_path}")
    try:
        registry = load_inverse_registry(rel_path)
    except RegistryError as exc:
        raise DatasetError(f"{rel_path}: {exc}") from exc
    entities = _read_entities(directory / fmt.entities)
    index = {e.raw_key: e.id for e in entities}
    splits = {s: _read_triples(directory / fmt.split_file(s), index, registry) for s in SPLITS}
    return KnowledgeGraph(entities, registry, name=name or directory.name, **splits)


class FilterIndex:
    """Known answers per ``(source, relation, direction)`` over all splits.

    Keys use the relation of the original triple: a triple ``(h, r, t)``
    registers ``t`` under ``(h, r, "fwd")`` and ``h`` under ``(t, r, "bwd")``.
    """

    def __init__(self, mapping):
        self._map = {k: frozenset(v) for k, v in mapping.items()}

    def __getitem__(self, key) -> frozenset:
        return self._map.get(tuple(key), frozenset())

    def lookup(self, source: int, relation: int, direction: str) -> frozenset:
        return self[(source, relation, direction)]

    def __len__(self):
        return len(self._map)

    def __iter__(self):
        return iter(self._map)


def build_filter_index(graph: KnowledgeGraph) -> FilterIndex:
    mapping = defaultdict(set)
    for split in SPLITS:
        for h, r, t in graph.split(split):
            mapping[(h, r, FORWARD)].add(t)
            mapping[(t, r, BACKWARD)].add(h)
    return FilterIndex(mapping)


def bundled_fixture(name: str = "wn18rr_mini") -> Path:
    """Directory of a small dataset shipped with the package."""
    path = Path(str(resources.files("kermit") / "data" / "fixtures" / name))
    if not path.is_dir():
        raise DatasetError(f"no bundled fixture named {name!r}")
    return path


# -- synthetic fixtures -------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng, n, taken, syllables):
    words = []
    while len(words) < n:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                    for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic_kg(seed: int, n_entities: int, n_relations: int, out_dir,
                          n_noise: int = 6) -> Path:
    """Write a small dataset whose triples follow from description text.

    Entities are grouped into families; every family member has a *kind*.
    Relation ``k`` links an entity to the family member of kind ``k``.  Each
    description names the entity's kind and family plus ``n_noise`` filler
    words, so the answer of ``(h, r_k, ?)`` is recoverable from the text of
    ``h`` and ``r_k`` alone.  Output is byte-identical for identical arguments.
    """
    if n_entities < 4:
        raise ValueError(f"n_entities must be >= 4, got {n_entities}")
    if n_relations < 1:
        raise ValueError(f"n_relations must be >= 1, got {n_relations}")
    rng = np.random.default_rng(seed)
    n_kinds = max(n_relations, 2)
    n_families = -(-n_entities // n_kinds)
    taken = set()
    kinds = _pseudo_words(rng, n_kinds, taken, 2)
    families = _pseudo_words(rng, n_families, taken, 3)
    noise_pool = _pseudo_words(rng, 40, taken, 2)
    names = _pseudo_words(rng, n_entities, taken, 4)
    # separate words per relation direction: a token reused by a kind would
    # have to mean both "source is kind k" and "answer is kind k"
    rel_words = _pseudo_words(rng, 2 * n_relations, taken, 3)

    entity_rows = []
    members = defaultdict(dict)
    for i in range(n_entities):
        fam, kind = divmod(i, n_kinds)
        members[fam][kind] = i
        noise = " ".join(rng.choice(noise_pool, size=n_noise))
        desc = f"a {kinds[kind]} of the {families[fam]} house, {noise}"
        entity_rows.append((f"e{i:04d}", names[i], desc))

    entries = []
    for k in range(n_relations):
        fwd, inv = f"r{k}", f"r{k}_inv"
        fwd_name, inv_name = f"has {rel_words[2 * k]} kin", f"is {rel_words[2 * k + 1]} kin of"
        entries.append(RelationEntry(fwd, fwd_name, inv, inv_name, "synthetic"))
        entries.append(RelationEntry(inv, inv_name, fwd, fwd_name, "synthetic"))
    registry = InverseRegistry(entries)

    triples = []
    for fam in range(n_families):
        for h in members[fam].values():
            for k in range(n_relations):
                t = members[fam].get(k)
                if t is not None and t != h:
                    triples.append((h, k, t))
    order = rng.permutation(len(triples))
    triples = [triples[i] for i in order]
    n_train = int(round(0.8 * len(triples)))
    n_valid = int(round(0.1 * len(triples)))
    parts = {
        "train": triples[:n_train],
        "valid": triples[n_train:n_train + n_valid],
        "test": triples[n_train + n_valid:],
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = DatasetFormat()
    with open(out / fmt.entities, "w", encoding="utf-8", newline="\n") as fh:
        for row in entity_rows:
            fh.write("\t".join(row) + "\n")
    for split, rows in parts.items():
        with open(out / fmt.split_file(split), "w", encoding="utf-8", newline="\n") as fh:
            for h, k, t in rows:
                fh.write(f"e{h:04d}\tr{k}\te{t:04d}\n")
    with open(out / fmt.relations, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(registry.to_json())
    return out
