"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (also collected into the
terminal summary) and fails if the check or its runtime budget is missed.
Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from kermit.augment import load_inverse_registry, symmetrize
from kermit.cli import main
from kermit.describe import DEFAULT_TEMPLATE, DescriptionCache, StubClient, describe_queries, render_prompt
from kermit.encoder import BASELINE, FULL, EncoderModel
from kermit.evaluate import evaluate_split
from kermit.kg import Entity, bundled_fixture, generate_synthetic_kg, load_dataset
from kermit.train import EncoderConfig, LossConfig, TrainConfig, fit, info_nce_loss

from conftest import ACCEPTANCE_LINES, random_graph
from oracles import brute_force_ranks, gradient_check_case, oracle_metrics

FIXTURES = Path(__file__).parent / "fixtures"
WN18RR_ENV = "KERMIT_WN18RR_DIR"
WN18RR_RELATIONS = [
    "hypernym", "derivationally related form", "instance hypernym", "also see",
    "member meronym", "synset domain topic of", "has part", "member of domain usage",
    "member of domain region", "verb group", "similar to",
]
# desk-scale training setup shared by the learning checks
LEARN = dict(epochs=50, batch_size=32)


def criterion(number, title, budget_s, body):
    t0 = time.perf_counter()
    try:
        detail, ok = body(), True
    except AssertionError as exc:
        detail, ok = (str(exc).splitlines() or ["assertion failed"])[0], False
    elapsed = time.perf_counter() - t0
    in_time = elapsed < budget_s
    status = "PASS" if ok and in_time else "FAIL"
    line = f"[{status}] AC{number}: {title}: {detail} ({elapsed:.2f}s, budget {budget_s}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert in_time, line


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    graph = load_dataset(generate_synthetic_kg(42, 50, 4, root / "toy"))
    cache = DescriptionCache(root / "descriptions.toy.jsonl")
    queries = [q for s in ("train", "valid", "test") for q in symmetrize(graph, graph.registry, s)]
    describe_queries(StubClient(), cache, queries, graph)
    return graph, cache


def _train_eval(graph, cache, mode, seed):
    train = symmetrize(graph, graph.registry, "train")
    res = fit(graph, train, cache, TrainConfig(seed=seed, **LEARN), mode=mode)
    return res, evaluate_split(res.q_model, res.e_model, graph, graph.registry, "test",
                               res.featurizer, cache)


def test_ac1_loss_identities():
    def body():
        S = np.eye(2)
        lit = [info_nce_loss(S, LossConfig(g, 1.0, "literal")) for g in (0.0, 0.02, 0.5)]
        spread = max(lit) - min(lit)
        assert spread < 1e-10, f"literal loss varies with gamma by {spread:.3e}"
        l0 = info_nce_loss(S, LossConfig(0.0, 1.0, "positive_only"))
        l5 = info_nce_loss(S, LossConfig(0.5, 1.0, "positive_only"))
        assert abs(l0 - 0.31326169) < 1e-6, f"gamma=0 loss {l0}"
        assert abs(l5 - 0.47407698) < 1e-6, f"gamma=0.5 loss {l5}"
        return f"literal spread {spread:.1e}; positive_only {l0:.8f}, {l5:.8f}"
    criterion(1, "loss identities", 1, body)


def test_ac2_gradient_correctness():
    def body():
        worst, shapes = 0.0, set()
        for seed in range(20):
            err, shape = gradient_check_case(seed)
            assert 3 <= shape[0] <= 8 and 2 <= shape[1] <= 4
            assert err < 1e-4, f"seed {seed}: relative error {err:.2e}"
            worst = max(worst, err)
            shapes.add(shape)
        return f"20 seeds, {len(shapes)} (d, B) shapes, max relative error {worst:.2e}"
    criterion(2, "gradient correctness", 30, body)


def test_ac3_ranking_oracle():
    def body():
        from test_evaluate import setup_model
        n_ties = 0
        for seed in range(100):
            g = random_graph(np.random.default_rng(seed), n_entities=int(5 + seed % 6),
                             n_relations=2, n_triples=14)
            mode = FULL if seed % 2 else BASELINE
            q, e, feat, desc = setup_model(g, mode, seed)
            n_ties += len({ent.text for ent in g.entities}) < len(g.entities)
            for split in ("valid", "test"):
                metrics, ranked = evaluate_split(q, e, g, g.registry, split, feat, desc,
                                                 return_ranks=True)
                expected = brute_force_ranks(q, e, g, feat, split, desc)
                assert [r for _, r in ranked] == expected, f"seed {seed} {split}: ranks differ"
                got = (metrics.mrr, metrics.hit1, metrics.hit3, metrics.hit10)
                assert got == oracle_metrics(expected), f"seed {seed} {split}: metrics differ"
        return f"100 graphs exact, {n_ties} with duplicated entity texts"
    criterion(3, "ranking oracle equivalence", 30, body)


def test_ac4_symmetrization():
    def body():
        reg = load_inverse_registry("wn18rr")
        names = {e.name: e for e in reg}
        for name in WN18RR_RELATIONS:
            raw = names[name].raw_key
            assert reg.invert(reg.invert(raw)) == raw, f"involution fails for {name}"
        root = os.environ.get(WN18RR_ENV)
        if root:
            g = load_dataset(root)
            n = len(symmetrize(g, g.registry, "train"))
            assert len(g.train) == 86_835, f"train triples {len(g.train)}"
            assert n == 173_670, f"query count {n}"
            return f"WN18RR: {n} queries; 11 relations involutive"
        g = load_dataset(bundled_fixture())
        n = len(symmetrize(g, g.registry, "train"))
        assert n == 2 * len(g.train) == 8, f"fixture query count {n}"
        return f"fixture (set {WN18RR_ENV} for full data): {n} = 2 x {len(g.train)}; 11 relations involutive"
    criterion(4, "symmetrization", 10, body)


def test_ac5_learning_signal(synthetic):
    graph, cache = synthetic

    def body():
        res, trained = _train_eval(graph, cache, FULL, seed=0)
        enc = EncoderConfig()
        q0 = EncoderModel.initialize(len(res.vocab), enc.dim, enc.max_len, seed=0)
        untrained = evaluate_split(q0, q0.copy(), graph, graph.registry, "test",
                                   res.featurizer, cache)
        assert trained.mrr >= 0.60, f"trained MRR {trained.mrr:.3f}"
        assert trained.hit10 >= 0.90, f"trained Hit@10 {trained.hit10:.3f}"
        assert untrained.mrr <= 0.15, f"untrained MRR {untrained.mrr:.3f}"
        return (f"trained MRR {trained.mrr:.3f} Hit@10 {trained.hit10:.3f}; "
                f"untrained MRR {untrained.mrr:.3f}")
    criterion(5, "learning signal", 120, body)


def test_ac6_mode_ordering(synthetic):
    graph, cache = synthetic

    def body():
        parts = []
        for seed in range(3):
            full = _train_eval(graph, cache, FULL, seed)[1].mrr
            base = _train_eval(graph, cache, BASELINE, seed)[1].mrr
            assert full >= base - 0.02, f"seed {seed}: full {full:.3f} < baseline {base:.3f} - 0.02"
            parts.append(f"{full:.3f}/{base:.3f}")
        return "full/baseline MRR per seed " + ", ".join(parts)
    criterion(6, "mode ordering", 360, body)


def _pipeline(root: Path):
    data = root / "toy"
    assert main(["synth", "--seed", "42", "--entities", "50", "--relations", "4",
                 "--out", str(data)]) == 0
    assert main(["describe", "--data", str(data), "--stub", "--run-dir", str(root / "run")]) == 0
    cfg = root / "toy.cfg"
    cfg.write_text(f"data={data}\nmode=full\nepochs={LEARN['epochs']}\n"
                   f"batch_size={LEARN['batch_size']}\nseed=3\ncheckpoint_every=25\n"
                   f"run_dir={root / 'run'}\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["eval", "--split", "test", "--run-dir", str(root / "run")]) == 0
    return root / "run"


def test_ac7_determinism(tmp_path):
    def body():
        a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
        names = ["epoch_0025.ckpt", "epoch_0050.ckpt", "model.ckpt", "metrics.test.json"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), f"{name} differs"
        mrr = json.loads((a / "metrics.test.json").read_text())["mrr"]
        return f"{len(names)} artifacts bit-identical across two runs (test MRR {mrr:.3f})"
    criterion(7, "determinism", 240, body)


def test_ac8_describe_idempotence(tmp_path, capsys):
    def body():
        data = generate_synthetic_kg(42, 50, 4, tmp_path / "toy")
        args = ["describe", "--data", str(data), "--stub", "--run-dir", str(tmp_path / "run")]
        assert main(args) == 0
        first = capsys.readouterr().out
        cache = data / "descriptions.toy.jsonl"
        before = cache.read_bytes()
        assert main(args) == 0
        second = capsys.readouterr().out
        assert second.startswith("generated 0 "), f"second run: {second.strip()}"
        assert cache.read_bytes() == before, "cache changed on the second run"
        return f"first run '{first.strip()}', second run '{second.strip()}', cache unchanged"
    criterion(8, "describe idempotence", 5, body)


def test_ac9_prompt_fidelity():
    def body():
        src = Entity(0, "land_reform", "land reform",
                     "a redistribution of agricultural land (especially by government action)")
        got = render_prompt(DEFAULT_TEMPLATE, src, "hypernym").encode("utf-8")
        expected = (FIXTURES / "land_reform_prompt.txt").read_bytes()
        assert got == expected, "rendered prompt differs from fixture"
        return f"{len(got)} bytes match"
    criterion(9, "prompt fidelity", 1, body)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
