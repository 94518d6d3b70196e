"""Command-line front end: ``kermit <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, keys
named like the long options) and ``--seed``; flags given on the command line
win over the config file.  Outputs go to ``--run-dir`` together with a
``meta.<subcommand>.json`` file recording the effective options and the
sha256 of every input file read.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .augment import BACKWARD, FORWARD, Query, symmetrize
from .describe import (DEFAULT_TEMPLATE, DescriptionCache, HTTPGenerationClient, StubClient,
                       cache_path, describe_queries, generate_description, query_key)
from .encoder import BASELINE, MODES, POOLINGS, POSITIONS, Featurizer, Vocabulary, load_checkpoint
from .evaluate import embed_all_entities, evaluate_split, known_answers, predict_topk
from .exceptions import ConfigError, KermitError
from .kg import SPLITS, DatasetFormat, build_filter_index, generate_synthetic_kg, load_dataset
from .train import MARGIN_MODES, EncoderConfig, LossConfig, TrainConfig, fit

logger = logging.getLogger("kermit")

DEFAULT_RUN_DIR = "kermit-run"
_SECRET_KEYS = {"service_key", "api_key", "key", "token", "password"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p):
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="flat key=value file; command-line flags take precedence")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    g.add_argument("--run-dir", default=DEFAULT_RUN_DIR,
                   help="directory for outputs and run metadata (default: %(default)s)")
    g.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _data_args(p, required=False):
    p.add_argument("--data", required=required, help="dataset directory")
    p.add_argument("--cache", help="description cache (default: <data>/descriptions.<name>.jsonl)")


def _describe_args(p):
    p.add_argument("--stub", action="store_true",
                   help="use the offline stub instead of the HTTP service")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--rate", type=float, default=1.0, help="service requests per second")
    p.add_argument("--timeout", type=float, default=60.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kermit", description="Text-based knowledge-graph completion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--noise", type=int, default=6, help="filler words per description")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("prepare", help="validate a dataset and write query manifests")
    _common(p)
    _data_args(p, required=True)

    p = sub.add_parser("describe", help="fill the predictive-description cache")
    _common(p)
    _data_args(p, required=True)
    _describe_args(p)
    p.add_argument("--splits", default="train,valid,test",
                   help="comma-separated splits to describe (default: %(default)s)")

    p = sub.add_parser("train", help="train the encoder pair")
    _common(p)
    _data_args(p, required=True)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--dim", type=int, default=EncoderConfig.dim)
    p.add_argument("--max-len", type=int, default=EncoderConfig.max_len)
    p.add_argument("--pooling", choices=POOLINGS, default=EncoderConfig.pooling)
    p.add_argument("--n-layers", type=int, default=EncoderConfig.n_layers)
    p.add_argument("--position", choices=POSITIONS, default=EncoderConfig.position)
    p.add_argument("--init-std", type=float, default=EncoderConfig.init_std)
    p.add_argument("--min-freq", type=int, default=EncoderConfig.min_freq)
    p.add_argument("--gamma", type=float, default=LossConfig.gamma)
    p.add_argument("--tau", type=float, default=LossConfig.tau)
    p.add_argument("--margin-mode", choices=MARGIN_MODES, default=LossConfig.margin_mode)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--weight-decay", type=float, default=TrainConfig.weight_decay)
    p.add_argument("--warmup-steps", type=int, default=TrainConfig.warmup_steps)
    p.add_argument("--checkpoint-every", type=int, default=TrainConfig.checkpoint_every)

    p = sub.add_parser("eval", help="filtered MRR and Hit@k on a split")
    _common(p)
    _data_args(p)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--checkpoint", help="checkpoint file (default: <run-dir>/model.ckpt)")
    p.add_argument("--ranks", action="store_true", help="also write ranks.<split>.tsv")

    p = sub.add_parser("predict", help="top-k answers for one query")
    _common(p)
    _data_args(p)
    _describe_args(p)
    p.add_argument("--entity", required=True, help="source entity key")
    p.add_argument("--relation", required=True, help="relation key")
    p.add_argument("--direction", choices=(FORWARD, BACKWARD), default=FORWARD,
                   help="bwd asks (?, relation, entity)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--unfiltered", action="store_true",
                   help="keep known answers in the ranking")
    p.add_argument("--checkpoint")
    return parser


# -- config -------------------------------------------------------------------

def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in _SECRET_KEYS:
            raise ConfigError(f"{path}:{lineno}: credentials are read from the environment only")
        out[key] = value
    return out


def _apply_config(sub_parser, config: dict, path):
    """Install config values as parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in sub_parser._actions}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"{path}: unknown option {key!r}")
        if action.nargs == 0:
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise ConfigError(f"{path}: {key} expects a boolean, got {value!r}")
            defaults[key] = low in _TRUE
            continue
        try:
            defaults[key] = action.type(value) if action.type else value
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: bad value for {key}: {value!r}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}")
        action.required = False
    sub_parser.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if argv and argv[0] in sub_action.choices:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[1:])
        if known.config:
            _apply_config(sub_action.choices[argv[0]], read_config(known.config), known.config)
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dataset_files(data_dir):
    fmt = DatasetFormat()
    names = [fmt.relations, fmt.entities] + [fmt.split_file(s) for s in SPLITS]
    return [Path(data_dir) / n for n in names]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_meta(args, inputs=(), extra=None):
    """Record options, seed and input digests in ``meta.<command>.json``."""
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    options = {k: v for k, v in vars(args).items() if k not in ("log_level",)}
    meta = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "options": options,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).exists()},
    }
    if extra:
        meta.update(extra)
    _write_json(run_dir / f"meta.{args.command}.json", meta)


def _resolve_cache(args, graph):
    return Path(args.cache) if args.cache else cache_path(args.data, graph.name)


def _train_meta(args):
    path = Path(args.run_dir) / "meta.train.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))["options"]


def _fill_from_training(args):
    """Default ``--data`` and ``--cache`` to what the training run used."""
    trained = _train_meta(args)
    if args.data is None:
        args.data = trained.get("data")
    if args.cache is None:
        args.cache = trained.get("cache_resolved")
    if args.data is None:
        raise ConfigError("--data is required (no training run found in the run directory)")


def _client(args):
    kwargs = dict(retries=args.retries, max_concurrency=args.concurrency, timeout=args.timeout)
    if args.stub:
        return StubClient(**kwargs)
    return HTTPGenerationClient.from_env(rate=args.rate, **kwargs)


def _load_model(args, graph):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.run_dir) / "model.ckpt"
    vocab_path = ckpt.parent / "vocab.tsv"
    q_model, e_model, header = load_checkpoint(ckpt)
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != q_model.vocab_size:
        raise ConfigError(f"{vocab_path} does not match {ckpt}")
    feat = Featurizer(vocab, header["mode"], header["max_len"])
    descriptions = None
    if header["mode"] != BASELINE:
        path = _resolve_cache(args, graph)
        if not path.exists():
            raise ConfigError(f"mode {header['mode']!r} needs a description cache; {path} is missing")
        descriptions = DescriptionCache(path)
    return ckpt, vocab_path, q_model, e_model, header, feat, descriptions


# -- subcommands --------------------------------------------------------------

def cmd_synth(args):
    out = generate_synthetic_kg(args.seed, args.entities, args.relations, args.out, args.noise)
    write_meta(args, extra={"outputs": {str(p): sha256_file(p) for p in _dataset_files(out)}})
    print(f"wrote synthetic dataset to {out}")


def cmd_prepare(args):
    graph = load_dataset(args.data)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in SPLITS:
        queries = symmetrize(graph, graph.registry, split)
        counts[split] = len(queries)
        with open(run_dir / f"queries.{split}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for q in queries:
                fh.write(f"{graph.entities[q.source].raw_key}\t{graph.relations[q.relation].raw_key}"
                         f"\t{q.direction}\t{graph.entities[q.answer].raw_key}\n")
    stats = graph.stats()
    write_meta(args, _dataset_files(args.data), {"stats": stats, "queries": counts})
    print(json.dumps({"stats": stats, "queries": counts}, sort_keys=True))


def cmd_describe(args):
    graph = load_dataset(args.data)
    path = _resolve_cache(args, graph)
    cache = DescriptionCache(path)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for s in splits:
        if s not in SPLITS:
            raise ConfigError(f"unknown split {s!r}")
    queries = [q for s in splits for q in symmetrize(graph, graph.registry, s)]
    report = describe_queries(_client(args), cache, queries, graph, DEFAULT_TEMPLATE)
    write_meta(args, _dataset_files(args.data),
               {"cache": str(path), "report": vars(report)})
    print(f"generated {report.generated} cached {report.cached} failed {report.failed}")


def cmd_train(args):
    graph = load_dataset(args.data)
    queries = symmetrize(graph, graph.registry, "train")
    descriptions = None
    path = _resolve_cache(args, graph)
    args.cache_resolved = str(path)
    inputs = _dataset_files(args.data)
    if args.mode != BASELINE:
        if not path.exists():
            raise ConfigError(f"mode {args.mode!r} needs a description cache; run "
                              f"'kermit describe' first ({path} is missing)")
        descriptions = DescriptionCache(path)
        inputs.append(path)
    enc = EncoderConfig(args.dim, args.max_len, args.pooling, args.n_layers, args.position,
                        args.init_std, args.min_freq)
    loss = LossConfig(args.gamma, args.tau, args.margin_mode)
    train = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                        seed=args.seed, weight_decay=args.weight_decay,
                        warmup_steps=args.warmup_steps, checkpoint_every=args.checkpoint_every)
    result = fit(graph, queries, descriptions, train, loss, args.mode, enc, out_dir=args.run_dir)
    ckpt = Path(args.run_dir) / "model.ckpt"
    write_meta(args, inputs, {"checkpoint": str(ckpt), "checkpoint_sha256": sha256_file(ckpt),
                              "final_loss": result.history[-1]})
    print(f"trained {args.epochs} epochs, final loss {result.history[-1]:.6f}; wrote {ckpt}")


def cmd_eval(args):
    _fill_from_training(args)
    graph = load_dataset(args.data)
    ckpt, vocab_path, q_model, e_model, header, feat, descriptions = _load_model(args, graph)
    out = evaluate_split(q_model, e_model, graph, graph.registry, args.split, feat, descriptions,
                         return_ranks=args.ranks)
    metrics, ranked = out if args.ranks else (out, None)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report = {"split": args.split, "mode": header["mode"], **metrics.to_dict(),
              "checkpoint_id": sha256_file(ckpt)}
    _write_json(run_dir / f"metrics.{args.split}.json", report)
    if ranked is not None:
        with open(run_dir / f"ranks.{args.split}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for q, rank in ranked:
                fh.write(f"{graph.entities[q.source].raw_key}\t{graph.relations[q.relation].raw_key}"
                         f"\t{q.direction}\t{graph.entities[q.answer].raw_key}\t{rank}\n")
    inputs = _dataset_files(args.data) + [ckpt, vocab_path]
    if descriptions is not None:
        inputs.append(descriptions.path)
    write_meta(args, inputs)
    print(json.dumps(report, sort_keys=True))


def cmd_predict(args):
    _fill_from_training(args)
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    graph = load_dataset(args.data)
    ckpt, vocab_path, q_model, e_model, header, feat, descriptions = _load_model(args, graph)
    source = graph.entity_id(args.entity)
    relation = graph.relation_id(args.relation)
    if args.direction == BACKWARD:
        relation = graph.relations[relation].inverse_id
    query = Query(source, relation, args.direction)
    if descriptions is not None and query_key(query, graph) not in descriptions:
        generate_description(_client(args), descriptions, DEFAULT_TEMPLATE, query, graph)
    flt = frozenset() if args.unfiltered else known_answers(build_filter_index(graph), graph, query)
    candidates = embed_all_entities(e_model, graph, feat)
    top = predict_topk(q_model, candidates, query, args.k, flt, graph=graph, featurizer=feat,
                       descriptions=descriptions)
    write_meta(args, _dataset_files(args.data) + [ckpt, vocab_path])
    for rank, (eid, score) in enumerate(top, 1):
        e = graph.entities[eid]
        print(f"{rank}\t{e.raw_key}\t{score:.6f}\t{e.name}")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "describe": cmd_describe,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except ConfigError as exc:
        print(f"kermit: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (KermitError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"kermit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
