"""Inverse relations and graph symmetrization.

Every training or test triple ``(h, r, t)`` is turned into two completion
queries: ``(h, r, ?) -> t`` and ``(t, r', ?) -> h`` where ``r'`` is the
hand-curated inverse of ``r``.  Inverses come from a ``relations.json``
registry rather than from a ``"reverse "`` prefix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Union

from .exceptions import RegistryError, RegistryLookupError

FORWARD = "fwd"
BACKWARD = "bwd"
DIRECTIONS = (FORWARD, BACKWARD)

SHIPPED_REGISTRIES = {
    "wn18rr": "wn18rr_relations.json",
    "fb15k237": "fb15k237_relations.json",
}


@dataclass(frozen=True)
class RelationEntry:
    raw_key: str
    name: str
    inverse_raw_key: str
    inverse_name: str
    source: str = "curated"


@dataclass(frozen=True)
class Query:
    """A directed completion task ``(source, relation, ?)``.

    ``answer`` is ``None`` for ad-hoc prediction queries.
    """

    source: int
    relation: int
    direction: str
    answer: int | None = None

    def without_answer(self) -> "Query":
        return Query(self.source, self.relation, self.direction, None)


class InverseRegistry:
    """Ordered, validated collection of relations and their inverses.

    The position of an entry is its ``RelationId`` when a dataset is loaded
    through :func:`kermit.kg.load_dataset`.
    """

    def __init__(self, entries: Iterable[RelationEntry]):
        self.entries = tuple(entries)
        self._index = {}
        for i, e in enumerate(self.entries):
            if not e.raw_key:
                raise RegistryError(f"entry {i} has an empty raw_key")
            if not e.name:
                raise RegistryError(f"relation {e.raw_key!r} has an empty name")
            if e.raw_key in self._index:
                raise RegistryError(f"duplicate relation {e.raw_key!r}")
            self._index[e.raw_key] = i
        for e in self.entries:
            inv = self._index.get(e.inverse_raw_key)
            if inv is None:
                raise RegistryError(
                    f"inverse {e.inverse_raw_key!r} of {e.raw_key!r} is not registered")
            back = self.entries[inv]
            if back.inverse_raw_key != e.raw_key:
                raise RegistryError(
                    f"involution violated: {e.raw_key!r} -> {back.raw_key!r} "
                    f"-> {back.inverse_raw_key!r}")
            if back.name != e.inverse_name:
                raise RegistryError(
                    f"inverse_name {e.inverse_name!r} of {e.raw_key!r} does not match "
                    f"the name {back.name!r} of {back.raw_key!r}")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, raw_key):
        return raw_key in self._index

    def __iter__(self):
        return iter(self.entries)

    def id_of(self, raw_key: str) -> int:
        try:
            return self._index[raw_key]
        except KeyError:
            raise RegistryLookupError(f"relation {raw_key!r} is not registered") from None

    def entry(self, relation: Union[int, str]) -> RelationEntry:
        if isinstance(relation, str):
            return self.entries[self.id_of(relation)]
        if not 0 <= relation < len(self.entries):
            raise RegistryLookupError(f"relation id {relation} is not registered")
        return self.entries[relation]

    def invert(self, relation: Union[int, str]) -> Union[int, str]:
        """Inverse of ``relation``, returned in the same form (id or raw key)."""
        e = self.entry(relation)
        if isinstance(relation, str):
            return e.inverse_raw_key
        return self._index[e.inverse_raw_key]

    def to_json(self) -> str:
        rows = []
        for e in self.entries:
            row = {"raw_key": e.raw_key, "name": e.name,
                   "inverse_raw_key": e.inverse_raw_key, "inverse_name": e.inverse_name}
            if e.source != "curated":
                row["source"] = e.source
            rows.append(row)
        return json.dumps(rows, indent=1, ensure_ascii=False) + "\n"


def parse_registry(rows) -> InverseRegistry:
    if not isinstance(rows, list):
        raise RegistryError("relations file must hold a JSON array")
    entries = []
    for i, row in enumerate(rows):
        try:
            entries.append(RelationEntry(
                raw_key=row["raw_key"],
                name=row["name"],
                inverse_raw_key=row["inverse_raw_key"],
                inverse_name=row.get("inverse_name", ""),
                source=row.get("source", "curated"),
            ))
        except (KeyError, TypeError, AttributeError) as exc:
            raise RegistryError(f"entry {i} is malformed: {exc!r}") from None
    # inverse_name is optional on input; fill it from the partner entry.
    names = {e.raw_key: e.name for e in entries}
    entries = [e if e.inverse_name else RelationEntry(
        e.raw_key, e.name, e.inverse_raw_key, names.get(e.inverse_raw_key, ""), e.source)
        for e in entries]
    return InverseRegistry(entries)


def load_inverse_registry(file) -> InverseRegistry:
    """Load and validate a ``relations.json`` registry.

    ``file`` may also be the name of a shipped registry (``"wn18rr"`` or
    ``"fb15k237"``).
    """
    if isinstance(file, str) and file in SHIPPED_REGISTRIES:
        text = resources.files("kermit.data").joinpath(SHIPPED_REGISTRIES[file]).read_text("utf-8")
        origin = file
    else:
        path = Path(file)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise RegistryError(f"relations file not found: {path}") from None
        origin = str(path)
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RegistryError(f"{origin}: invalid JSON ({exc})") from None
    return parse_registry(rows)


def invert_relation(reg: InverseRegistry, r):
    """Return the inverse relation ``r'`` (same type as ``r``: id or raw key)."""
    return reg.invert(r)


def verbalize_relation(reg: InverseRegistry, raw: str) -> tuple[str, str]:
    """Curated sentence forms ``(name, inverse_name)`` for a raw relation key."""
    e = reg.entry(raw)
    return e.name, e.inverse_name


def symmetrize(graph, reg: InverseRegistry, split: str) -> list[Query]:
    """Forward and backward queries for every triple of ``split``.

    Output order follows the split's triple order, forward query first.
    """
    queries = []
    inverse_of = {}
    for h, r, t in graph.split(split):
        inv = inverse_of.get(r)
        if inv is None:
            raw = graph.relations[r].raw_key
            if raw not in reg:
                raise RegistryLookupError(
                    f"relation {raw!r} used in split {split!r} is not registered")
            inv = graph.relation_id(reg.invert(raw))
            inverse_of[r] = inv
        queries.append(Query(h, r, FORWARD, t))
        queries.append(Query(t, inv, BACKWARD, h))
    return queries
