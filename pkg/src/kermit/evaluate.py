"""Filtered link-prediction evaluation: ranks, MRR and Hit@k."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .augment import BACKWARD, symmetrize
from .encoder import EncoderModel, Featurizer, normalize_rows
from .exceptions import ContractError
from .kg import FilterIndex, KnowledgeGraph, build_filter_index

HIT_KS = (1, 3, 10)
# Scores this close count as tied.  Mean pooling without attention gives
# equal embeddings to token permutations of one text, but float summation
# order separates them by a few ulps.
TIE_ATOL = 1e-12


@dataclass(frozen=True)
class CandidateMatrix:
    """Pooled entity embeddings, row ``i`` for entity id ``i``."""

    embeddings: np.ndarray
    mode: str = "entity"

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def normalized(self) -> np.ndarray:
        return normalize_rows(self.embeddings)


@dataclass(frozen=True)
class Metrics:
    mrr: float
    hit1: float
    hit3: float
    hit10: float
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks) -> "Metrics":
        ranks = [int(r) for r in ranks]
        n = len(ranks)
        if n == 0:
            raise ValueError("no ranks to aggregate")
        mrr = math.fsum(1.0 / r for r in ranks) / n
        hits = [sum(1 for r in ranks if r <= k) / n for k in HIT_KS]
        return cls(mrr, *hits, n_queries=n)

    def to_dict(self) -> dict:
        return asdict(self)


def embed_all_entities(e_model: EncoderModel, graph: KnowledgeGraph, featurizer: Featurizer,
                       chunk: int = 512) -> CandidateMatrix:
    n = len(graph.entities)
    rows = []
    for start in range(0, n, chunk):
        ids = range(start, min(n, start + chunk))
        rows.append(e_model.encode_batch(featurizer.entities(ids, graph)))
    emb = np.concatenate(rows) if rows else np.zeros((0, e_model.dim))
    return CandidateMatrix(emb)


def rank_answer(scores, answer: int, filter=frozenset()) -> int:
    """Filtered rank of ``answer``; ties with other candidates count against it.

    Candidates within :data:`TIE_ATOL` of the answer's score are ties.
    """
    if answer in filter:
        raise ContractError(f"answer {answer} is inside the filter set")
    scores = np.asarray(scores)
    beats = scores >= scores[answer] - TIE_ATOL
    beats[answer] = False
    if filter:
        beats[np.fromiter(filter, dtype=np.int64)] = False
    return 1 + int(beats.sum())


def known_answers(index: FilterIndex, graph: KnowledgeGraph, query) -> frozenset:
    """All true answers of ``query`` across every split."""
    relation = query.relation
    if query.direction == BACKWARD:
        relation = graph.relations[relation].inverse_id
    return index.lookup(query.source, relation, query.direction)


def cosine_scores(query_vec: np.ndarray, cand_normalized: np.ndarray) -> np.ndarray:
    """Scores of one unit query vector against unit candidate rows.

    A row-wise reduction rather than a BLAS product: identical candidate rows
    then always receive bit-identical scores, so ties stay ties.
    """
    return np.clip((cand_normalized * query_vec).sum(axis=1), -1.0, 1.0)


def score_queries(q_model: EncoderModel, candidates: CandidateMatrix, queries, graph,
                  featurizer: Featurizer, descriptions=None, chunk: int = 512):
    """Yield ``(query, score_vector)`` pairs, one matrix-vector product each."""
    cand = candidates.normalized
    queries = list(queries)
    for start in range(0, len(queries), chunk):
        part = queries[start:start + chunk]
        emb = normalize_rows(q_model.encode_batch(featurizer.queries(part, graph, descriptions)))
        for q, vec in zip(part, emb):
            yield q, cosine_scores(vec, cand)


def rank_queries(q_model, e_model, graph, queries, featurizer, descriptions=None,
                 filter_index: FilterIndex | None = None, candidates: CandidateMatrix | None = None):
    index = filter_index if filter_index is not None else build_filter_index(graph)
    if candidates is None:
        candidates = embed_all_entities(e_model, graph, featurizer)
    ranks = []
    for q, scores in score_queries(q_model, candidates, queries, graph, featurizer, descriptions):
        ranks.append(rank_answer(scores, q.answer, known_answers(index, graph, q) - {q.answer}))
    return ranks


def evaluate_split(q_model: EncoderModel, e_model: EncoderModel, graph: KnowledgeGraph, reg,
                   split: str, featurizer: Featurizer, descriptions=None, *,
                   filter_index: FilterIndex | None = None,
                   candidates: CandidateMatrix | None = None, return_ranks: bool = False):
    """Filtered metrics over both query directions of every triple in ``split``."""
    queries = symmetrize(graph, reg, split)
    ranks = rank_queries(q_model, e_model, graph, queries, featurizer, descriptions,
                         filter_index, candidates)
    metrics = Metrics.from_ranks(ranks)
    if return_ranks:
        return metrics, list(zip(queries, ranks))
    return metrics


def predict_topk(q_model: EncoderModel, candidates: CandidateMatrix, query, k: int,
                 filter=frozenset(), *, graph, featurizer: Featurizer, descriptions=None):
    """Top-``k`` ``(entity_id, score)`` pairs excluding ``filter``.

    Ordered by descending score, ties by ascending entity id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    (_, scores), = score_queries(q_model, candidates, [query], graph, featurizer, descriptions)
    ids = np.arange(len(scores))
    keep = np.ones(len(scores), dtype=bool)
    if filter:
        keep[np.fromiter(filter, dtype=np.int64)] = False
    ids, s = ids[keep], scores[keep]
    order = np.lexsort((ids, -s))[:k]
    return [(int(ids[i]), float(s[i])) for i in order]
