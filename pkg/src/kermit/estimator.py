"""scikit-learn style front end for the link predictor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_mode, check_positive, check_queries
from .augment import symmetrize
from .encoder import Featurizer, Vocabulary, load_checkpoint, normalize_rows, save_checkpoint
from .evaluate import (Metrics, cosine_scores, embed_all_entities, evaluate_split, known_answers,
                       predict_topk, rank_queries)
from .kg import build_filter_index
from .train import EncoderConfig, LossConfig, TrainConfig, fit


class KermitLinkPredictor(BaseEstimator):
    """Bi-encoder link predictor trained with in-batch InfoNCE.

    Parameters
    ----------
    mode : {"full", "baseline", "pred_only"}
        Query-side sequence layout.  ``full`` appends the predictive
        description as a third segment; ``pred_only`` uses it alone.
    dim, max_len, pooling, n_layers, position, init_std, min_freq
        Encoder shape and vocabulary settings.
    gamma, tau, margin_mode
        Additive margin, temperature and where the margin applies.
    lr, epochs, batch_size, weight_decay, warmup_steps, seed
        Optimisation settings (AdamW with linear decay).
    checkpoint_every : int
        Write a checkpoint every that many epochs when ``fit`` gets ``out_dir``.

    Attributes
    ----------
    query_encoder_, entity_encoder_ : EncoderModel
    vocab_ : Vocabulary
    history_ : list of float
        Mean training loss per epoch.

    Examples
    --------
    >>> model = KermitLinkPredictor(mode="baseline", epochs=5)  # doctest: +SKIP
    >>> model.fit(None, graph=graph).evaluate("test")           # doctest: +SKIP
    """

    def __init__(self, mode="full", dim=64, max_len=64, pooling="mean", n_layers=0,
                 position="learned", init_std=0.1, min_freq=2, gamma=0.02, tau=0.05,
                 margin_mode="positive_only", lr=1e-2, epochs=50, batch_size=256,
                 weight_decay=1e-4, warmup_steps=0, seed=0, checkpoint_every=0):
        self.mode = mode
        self.dim = dim
        self.max_len = max_len
        self.pooling = pooling
        self.n_layers = n_layers
        self.position = position
        self.init_std = init_std
        self.min_freq = min_freq
        self.gamma = gamma
        self.tau = tau
        self.margin_mode = margin_mode
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.checkpoint_every = checkpoint_every

    def _configs(self):
        check_mode(self.mode)
        for name in ("dim", "max_len", "epochs", "batch_size", "min_freq"):
            check_positive(name, getattr(self, name), integer=True)
        check_positive("n_layers", self.n_layers, integer=True, allow_zero=True)
        check_positive("lr", self.lr)
        check_positive("tau", self.tau)
        check_positive("gamma", self.gamma, allow_zero=True)
        enc = EncoderConfig(self.dim, self.max_len, self.pooling, self.n_layers, self.position,
                            self.init_std, self.min_freq)
        loss = LossConfig(self.gamma, self.tau, self.margin_mode)
        train = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                            seed=self.seed, weight_decay=self.weight_decay,
                            warmup_steps=self.warmup_steps,
                            checkpoint_every=self.checkpoint_every)
        return enc, loss, train

    def fit(self, X=None, y=None, *, graph, descriptions=None, out_dir=None):
        """Train on queries ``X`` (default: the symmetrized train split)."""
        enc, loss, train = self._configs()
        if X is None:
            queries = symmetrize(graph, graph.registry, "train")
        else:
            queries = check_queries(X, y, graph=graph, require_answers=True)
        result = fit(graph, queries, descriptions, train, loss, self.mode, enc, out_dir=out_dir)
        self.graph_ = graph
        self.descriptions_ = descriptions
        self.vocab_ = result.vocab
        self.featurizer_ = result.featurizer
        self.query_encoder_ = result.q_model
        self.entity_encoder_ = result.e_model
        self.history_ = result.history
        self.checkpoints_ = result.checkpoints
        self._reset_caches()
        return self

    def _reset_caches(self):
        self._candidates = None
        self._filter_index = None

    @property
    def candidates_(self):
        check_is_fitted(self, "entity_encoder_")
        if getattr(self, "_candidates", None) is None:
            self._candidates = embed_all_entities(self.entity_encoder_, self.graph_, self.featurizer_)
        return self._candidates

    @property
    def filter_index_(self):
        check_is_fitted(self, "graph_")
        if getattr(self, "_filter_index", None) is None:
            self._filter_index = build_filter_index(self.graph_)
        return self._filter_index

    def transform(self, X):
        """Pooled query embeddings, shape ``(n_queries, dim)``."""
        check_is_fitted(self, "query_encoder_")
        queries = check_queries(X, graph=self.graph_)
        batch = self.featurizer_.queries(queries, self.graph_, self.descriptions_)
        return self.query_encoder_.encode_batch(batch)

    def decision_function(self, X):
        """Cosine score of every candidate entity, shape ``(n_queries, n_entities)``."""
        cand = self.candidates_.normalized
        return np.stack([cosine_scores(v, cand) for v in normalize_rows(self.transform(X))])

    def predict(self, X):
        """Highest-scoring entity per query (no filtering)."""
        return np.argmax(self.decision_function(X), axis=1)

    def predict_topk(self, X, k=10, filtered=True):
        """Top-``k`` ``(entity_id, score)`` lists.

        With ``filtered=True`` every known true answer other than the query's
        own answer is excluded.
        """
        check_is_fitted(self, "query_encoder_")
        out = []
        for q in check_queries(X, graph=self.graph_):
            flt = frozenset()
            if filtered:
                flt = known_answers(self.filter_index_, self.graph_, q) - {q.answer}
            out.append(predict_topk(self.query_encoder_, self.candidates_, q, k, flt,
                                    graph=self.graph_, featurizer=self.featurizer_,
                                    descriptions=self.descriptions_))
        return out

    def score(self, X, y=None):
        """Filtered mean reciprocal rank of the answers."""
        return self.score_metrics(X, y).mrr

    def score_metrics(self, X, y=None) -> Metrics:
        check_is_fitted(self, "query_encoder_")
        queries = check_queries(X, y, graph=self.graph_, require_answers=True)
        ranks = rank_queries(self.query_encoder_, self.entity_encoder_, self.graph_, queries,
                             self.featurizer_, self.descriptions_, self.filter_index_,
                             self.candidates_)
        return Metrics.from_ranks(ranks)

    def evaluate(self, split="test", return_ranks=False):
        check_is_fitted(self, "query_encoder_")
        return evaluate_split(self.query_encoder_, self.entity_encoder_, self.graph_,
                              self.graph_.registry, split, self.featurizer_, self.descriptions_,
                              filter_index=self.filter_index_, candidates=self.candidates_,
                              return_ranks=return_ranks)

    def save(self, directory):
        """Write ``model.ckpt``, ``vocab.tsv`` and ``params.json``."""
        check_is_fitted(self, "query_encoder_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(directory / "model.ckpt", self.query_encoder_, self.entity_encoder_,
                        self.mode)
        self.vocab_.save(directory / "vocab.tsv")
        (directory / "params.json").write_text(
            json.dumps(self.get_params(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory, graph, descriptions=None, checkpoint="model.ckpt"):
        directory = Path(directory)
        params = {}
        if (directory / "params.json").exists():
            params = json.loads((directory / "params.json").read_text(encoding="utf-8"))
        q_model, e_model, header = load_checkpoint(directory / checkpoint)
        params.update(mode=header["mode"], dim=header["dim"], max_len=header["max_len"],
                      pooling=header["pooling"], n_layers=header["n_layers"],
                      position=header["position"])
        est = cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})
        est.graph_ = graph
        est.descriptions_ = descriptions
        est.vocab_ = Vocabulary.load(directory / "vocab.tsv")
        est.featurizer_ = Featurizer(est.vocab_, header["mode"], header["max_len"])
        est.query_encoder_ = q_model
        est.entity_encoder_ = e_model
        est.history_ = []
        est.checkpoints_ = [directory / checkpoint]
        est._reset_caches()
        return est
