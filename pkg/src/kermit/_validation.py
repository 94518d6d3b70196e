"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numbers

import numpy as np

from .augment import BACKWARD, DIRECTIONS, FORWARD, Query
from .encoder import MODES
from .exceptions import ConfigError


def check_queries(X, y=None, graph=None, require_answers=False) -> list[Query]:
    """Coerce ``X`` (and optional answers ``y``) into a list of :class:`Query`.

    ``X`` may be a sequence of :class:`Query` objects or an integer array of
    shape ``(n, 3)`` holding ``source, relation, direction`` with direction
    encoded as 0 (forward) or 1 (backward).
    """
    if isinstance(X, Query):
        X = [X]
    if len(X) and all(isinstance(q, Query) for q in X):
        queries = list(X)
    else:
        arr = np.asarray(X)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"expected queries of shape (n, 3), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("query arrays must be integer-valued")
        if np.any((arr[:, 2] != 0) & (arr[:, 2] != 1)):
            raise ValueError("direction column must be 0 (forward) or 1 (backward)")
        queries = [Query(int(s), int(r), BACKWARD if d else FORWARD) for s, r, d in arr]
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(queries),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(queries)},)")
        queries = [Query(q.source, q.relation, q.direction, int(a)) for q, a in zip(queries, y)]
    if require_answers and any(q.answer is None for q in queries):
        raise ValueError("every query needs an answer")
    for q in queries:
        if q.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {q.direction!r}")
    if graph is not None:
        n_e, n_r = len(graph.entities), len(graph.relations)
        for q in queries:
            if not (0 <= q.source < n_e and 0 <= q.relation < n_r):
                raise ValueError(f"query {q} does not resolve in graph {graph.name!r}")
            if q.answer is not None and not 0 <= q.answer < n_e:
                raise ValueError(f"answer of {q} does not resolve")
    return queries


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def check_positive(name, value, integer=False, allow_zero=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return value
