"""Tokenization, segment-aware sequences and the reference text encoder.

The reference encoder embeds each position as ``token + position + segment``
and pools the valid positions.  An optional stack of single-head residual
self-attention layers can be placed between embedding and pooling; all
gradients are derived by hand so they can be checked against finite
differences.
"""
from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ContractError, DimensionError, NumericError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)

BASELINE, FULL, PRED_ONLY = "baseline", "full", "pred_only"
MODES = (BASELINE, FULL, PRED_ONLY)
POOLINGS = ("mean", "cls")
POSITIONS = ("learned", "sinusoidal")
N_SEGMENTS = 3

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token ids; the first four ids are ``[PAD] [UNK] [CLS] [SEP]``."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.pad_id, self.unk_id, self.cls_id, self.sep_id = range(4)

    @classmethod
    def build(cls, texts, min_freq: int = 2) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                      key=lambda t: (-counts[t], t))
        return cls(list(SPECIAL_TOKENS) + kept)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    token, idx = line.rsplit("\t", 1)
                    rows.append((int(idx), token))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise CheckpointError(f"{path}: vocabulary ids are not dense")
        return cls([t for _, t in rows])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on whitespace and punctuation, map with UNK fallback."""
    return [vocab.id(w) for w in split_words(text)]


@dataclass(frozen=True)
class TokenSequence:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class SequenceBatch:
    """``B x L`` stacked token ids, segment ids and validity mask."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    @classmethod
    def stack(cls, seqs) -> "SequenceBatch":
        seqs = list(seqs)
        return cls(np.stack([s.token_ids for s in seqs]),
                   np.stack([s.segment_ids for s in seqs]),
                   np.stack([s.mask for s in seqs]))

    def __len__(self):
        return self.token_ids.shape[0]

    def __getitem__(self, idx):
        return SequenceBatch(self.token_ids[idx], self.segment_ids[idx], self.mask[idx])


def _truncate(blocks, budget, order):
    """Trim the longest block (ties broken by ``order``) until all fit."""
    blocks = [list(b) for b in blocks]
    while sum(len(b) for b in blocks) > budget:
        longest = max(len(b) for b in blocks)
        victim = next(i for i in order if len(blocks[i]) == longest)
        blocks[victim].pop()
    return blocks


def _assemble(blocks, vocab, max_len) -> TokenSequence:
    ids, segs = [vocab.cls_id], [0]
    for seg, block in enumerate(blocks):
        ids.extend(block)
        ids.append(vocab.sep_id)
        segs.extend([seg] * (len(block) + 1))
    n = len(ids)
    pad = max_len - n
    return TokenSequence(
        np.array(ids + [vocab.pad_id] * pad, dtype=np.int64),
        np.array(segs + [0] * pad, dtype=np.int64),
        np.array([1] * n + [0] * pad, dtype=np.int64),
    )


def build_query_sequence(h_text: str, r_text: str, t_pred_text: str | None, mode: str,
                         vocab: Vocabulary, max_len: int = 64) -> TokenSequence:
    """Query-side layout.

    ``baseline``  ``[CLS] H [SEP] R [SEP]``
    ``full``      ``[CLS] H [SEP] R [SEP] P [SEP]``
    ``pred_only`` ``[CLS] P [SEP]``

    Each ``[SEP]`` closes a segment (numbered 0, 1, 2); padding uses segment 0
    and mask 0.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != BASELINE and not (t_pred_text or "").strip():
        raise ValueError(f"mode {mode!r} requires a predictive description")
    if mode == BASELINE:
        blocks = [tokenize(h_text, vocab), tokenize(r_text, vocab)]
        order = (0, 1)
    elif mode == FULL:
        blocks = [tokenize(h_text, vocab), tokenize(r_text, vocab), tokenize(t_pred_text, vocab)]
        order = (0, 2, 1)
    else:
        blocks = [tokenize(t_pred_text, vocab)]
        order = (0,)
    budget = max_len - 1 - len(blocks)
    if budget < 0:
        raise ValueError(f"max_len={max_len} cannot hold the {mode} layout")
    return _assemble(_truncate(blocks, budget, order), vocab, max_len)


def build_entity_sequence(t_text: str, vocab: Vocabulary, max_len: int = 64) -> TokenSequence:
    """Entity-side layout ``[CLS] T [SEP]``, all segment ids 0."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    return _assemble([tokenize(t_text, vocab)[:max_len - 2]], vocab, max_len)


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pool(per_token: np.ndarray, mask: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """Mean over ``mask == 1`` positions or the first position (``"cls"``).

    Works on one ``L x d`` sequence or a ``B x L x d`` batch.
    """
    per_token = np.asarray(per_token, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pooling == "cls":
        return per_token[..., 0, :].copy()
    if pooling != "mean":
        raise ValueError(f"unknown pooling {pooling!r}")
    n = mask.sum(axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ContractError("mean pooling over an all-padding sequence")
    return (per_token * mask[..., None]).sum(axis=-2) / n


class EncoderModel:
    """Token, position and segment tables plus optional attention layers.

    ``params`` maps names to arrays; every entry is trainable except the
    position table when ``position="sinusoidal"``.
    """

    def __init__(self, params: dict, pooling: str = "mean", position: str = "learned"):
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}")
        if position not in POSITIONS:
            raise ValueError(f"unknown position encoding {position!r}")
        self.params = params
        self.pooling = pooling
        self.position = position
        if self.params["segment"].shape[0] != N_SEGMENTS:
            raise DimensionError("segment table must have exactly 3 rows")

    @classmethod
    def initialize(cls, vocab_size: int, dim: int = 64, max_len: int = 64, pooling: str = "mean",
                   n_layers: int = 0, position: str = "learned", init_std: float = 0.1,
                   seed: int = 0) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        params = {"token": rng.normal(0.0, init_std, (vocab_size, dim))}
        if position == "learned":
            params["position"] = rng.normal(0.0, init_std, (max_len, dim))
        else:
            params["position"] = sinusoidal_positions(max_len, dim) * init_std
        params["segment"] = rng.normal(0.0, init_std, (N_SEGMENTS, dim))
        scale = 1.0 / np.sqrt(dim)
        for k in range(n_layers):
            for w in ("wq", "wk", "wv"):
                params[f"layer{k}.{w}"] = rng.normal(0.0, scale, (dim, dim))
        return cls(params, pooling, position)

    @property
    def dim(self) -> int:
        return self.params["token"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.params["token"].shape[0]

    @property
    def max_len(self) -> int:
        return self.params["position"].shape[0]

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.endswith(".wq"))

    def trainable(self) -> list[str]:
        return [k for k in self.params if not (k == "position" and self.position == "sinusoidal")]

    def copy(self) -> "EncoderModel":
        return EncoderModel({k: v.copy() for k, v in self.params.items()},
                            self.pooling, self.position)

    def _check(self, batch: SequenceBatch):
        ids = batch.token_ids
        if ids.shape[1] > self.max_len:
            raise DimensionError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DimensionError(f"token id out of range for vocabulary of {self.vocab_size}")
        segs = batch.segment_ids
        if segs.size and (segs.min() < 0 or segs.max() >= N_SEGMENTS):
            raise DimensionError("segment id out of range")

    # -- forward / backward -------------------------------------------------

    def forward(self, batch: SequenceBatch):
        """Return ``(per_token, pooled, cache)`` for a batch."""
        self._check(batch)
        p = self.params
        ids, segs = batch.token_ids, batch.segment_ids
        mask = batch.mask.astype(np.float64)
        L = ids.shape[1]
        x = p["token"][ids] + p["position"][:L][None] + p["segment"][segs]
        layer_caches = []
        key_bias = np.where(mask > 0, 0.0, -np.inf)[:, None, :]
        scale = 1.0 / np.sqrt(self.dim)
        for k in range(self.n_layers):
            wq, wk, wv = p[f"layer{k}.wq"], p[f"layer{k}.wk"], p[f"layer{k}.wv"]
            q, kk, v = x @ wq, x @ wk, x @ wv
            s = np.einsum("bid,bjd->bij", q, kk) * scale + key_bias
            s = s - s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            layer_caches.append((x, q, kk, v, a))
            x = x + np.einsum("bij,bjd->bid", a, v)
        return x, pool(x, mask, self.pooling), (batch, mask, layer_caches)

    def backward(self, cache, d_pooled: np.ndarray) -> dict:
        """Gradients of every trainable table given ``dLoss/dpooled``."""
        batch, mask, layer_caches = cache
        p = self.params
        B, L = batch.token_ids.shape
        d = self.dim
        if self.pooling == "mean":
            n = mask.sum(axis=1)
            dx = (mask / n[:, None])[..., None] * d_pooled[:, None, :]
        else:
            dx = np.zeros((B, L, d))
            dx[:, 0] = d_pooled
        grads = {}
        scale = 1.0 / np.sqrt(d)
        for k in reversed(range(len(layer_caches))):
            x, q, kk, v, a = layer_caches[k]
            wq, wk, wv = p[f"layer{k}.wq"], p[f"layer{k}.wk"], p[f"layer{k}.wv"]
            da = np.einsum("bid,bjd->bij", dx, v)
            dv = np.einsum("bij,bid->bjd", a, dx)
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
            dq = np.einsum("bij,bjd->bid", ds, kk)
            dk = np.einsum("bij,bid->bjd", ds, q)
            grads[f"layer{k}.wq"] = np.einsum("bie,bid->ed", x, dq)
            grads[f"layer{k}.wk"] = np.einsum("bie,bid->ed", x, dk)
            grads[f"layer{k}.wv"] = np.einsum("bie,bid->ed", x, dv)
            dx = dx + dq @ wq.T + dk @ wk.T + dv @ wv.T
        g_tok = np.zeros_like(p["token"])
        np.add.at(g_tok, batch.token_ids.reshape(-1), dx.reshape(-1, d))
        grads["token"] = g_tok
        if self.position == "learned":
            g_pos = np.zeros_like(p["position"])
            g_pos[:L] = dx.sum(axis=0)
            grads["position"] = g_pos
        g_seg = np.zeros_like(p["segment"])
        np.add.at(g_seg, batch.segment_ids.reshape(-1), dx.reshape(-1, d))
        grads["segment"] = g_seg
        return grads

    def encode_batch(self, batch: SequenceBatch) -> np.ndarray:
        return self.forward(batch)[1]


@dataclass(frozen=True)
class EncodedSequence:
    per_token: np.ndarray
    pooled: np.ndarray


def encode(model: EncoderModel, seq: TokenSequence) -> EncodedSequence:
    per_token, pooled, _ = model.forward(SequenceBatch.stack([seq]))
    return EncodedSequence(per_token[0], pooled[0])


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0 or not (np.isfinite(nu) and np.isfinite(nv)):
        raise NumericError("cosine similarity of a zero-norm or non-finite vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cannot normalize a zero-norm embedding")
    return x / norms


class Featurizer:
    """Turns queries and entities of a graph into padded sequence batches."""

    def __init__(self, vocab: Vocabulary, mode: str = FULL, max_len: int = 64):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.vocab = vocab
        self.mode = mode
        self.max_len = max_len

    def query_sequence(self, query, graph, descriptions=None) -> TokenSequence:
        from .describe import description_text

        pred = None
        if self.mode != BASELINE:
            pred = description_text(descriptions, query, graph)
        return build_query_sequence(graph.entity_text(query.source),
                                    graph.relation_name(query.relation),
                                    pred, self.mode, self.vocab, self.max_len)

    def queries(self, queries, graph, descriptions=None) -> SequenceBatch:
        return SequenceBatch.stack([self.query_sequence(q, graph, descriptions) for q in queries])

    def entities(self, entity_ids, graph) -> SequenceBatch:
        return SequenceBatch.stack([build_entity_sequence(graph.entity_text(e), self.vocab, self.max_len)
                                    for e in entity_ids])


def corpus_texts(graph, queries=(), mode: str = BASELINE, descriptions=None):
    """Texts the vocabulary is counted over, as the two encoders see them.

    Every entity text once (candidate side), then per query its source text,
    relation name and, outside baseline mode, its predictive description.
    """
    from .describe import description_text

    texts = [e.text for e in graph.entities]
    for q in queries:
        texts.append(graph.entity_text(q.source))
        texts.append(graph.relation_name(q.relation))
        if mode != BASELINE:
            texts.append(description_text(descriptions, q, graph))
    return texts


# -- checkpoints --------------------------------------------------------------

MAGIC = b"KRMTCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIBBBBI")


def _table_names(n_layers):
    names = ["token", "position", "segment"]
    for k in range(n_layers):
        names += [f"layer{k}.wq", f"layer{k}.wk", f"layer{k}.wv"]
    return names


def save_checkpoint(path, q_model: EncoderModel, e_model: EncoderModel, mode: str) -> bytes:
    """Write both towers to one file; returns the bytes written.

    Layout: a little-endian header ``magic, version, d, |V|, max_len, n_towers,
    pooling, mode, position, n_layers`` then each tower's tables as row-major
    float32.
    """
    for m in (q_model, e_model):
        if (m.dim, m.vocab_size, m.max_len, m.n_layers, m.pooling, m.position) != (
                q_model.dim, q_model.vocab_size, q_model.max_len, q_model.n_layers,
                q_model.pooling, q_model.position):
            raise ContractError("query and entity encoders must share dimensions")
    header = _HEADER.pack(MAGIC, VERSION, q_model.dim, q_model.vocab_size, q_model.max_len, 2,
                          POOLINGS.index(q_model.pooling), MODES.index(mode),
                          POSITIONS.index(q_model.position), q_model.n_layers)
    chunks = [header]
    for m in (q_model, e_model):
        for name in _table_names(m.n_layers):
            chunks.append(np.ascontiguousarray(m.params[name], dtype="<f4").tobytes())
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns ``(q_model, e_model, header_dict)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, d, V, max_len, towers, pooling, mode, position, n_layers = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    shapes = {"token": (V, d), "position": (max_len, d), "segment": (N_SEGMENTS, d)}
    offset = _HEADER.size
    models = []
    for _ in range(towers):
        params = {}
        for name in _table_names(n_layers):
            shape = shapes.get(name, (d, d))
            count = shape[0] * shape[1]
            end = offset + 4 * count
            if end > len(data):
                raise CheckpointError(f"{path}: truncated table {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset) \
                .reshape(shape).astype(np.float64)
            offset = end
        models.append(EncoderModel(params, POOLINGS[pooling], POSITIONS[position]))
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tables")
    header = {"version": version, "dim": d, "vocab_size": V, "max_len": max_len,
              "pooling": POOLINGS[pooling], "mode": MODES[mode],
              "position": POSITIONS[position], "n_layers": n_layers}
    return models[0], models[1], header
