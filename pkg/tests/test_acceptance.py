"""Acceptance checks, one test per criterion.

Each test records its outcome in ``conftest.CRITERIA`` and prints a single
PASS/FAIL line; the terminal summary repeats them at the end of the run.
"""
import contextlib
import filecmp
import time

import numpy as np
import pytest

from expertrag import costs
from expertrag import tensor as T
from expertrag.cli import main
from expertrag.evaluation import corpus_update_probe, evaluate
from expertrag.gate import RetrievalGate, decide, gate_score, ste_z
from expertrag.model import RouterDecision, load_balance_loss, token_loss, topk_select
from expertrag.pipeline import MODES, ExpertRAG, build_input, infer
from expertrag.retrieval import Corpus, embed_document, search_top_k
from expertrag.tensor import Tensor
from expertrag.training import _sequence

import conftest
from conftest import tiny_config, tiny_vocab
from gradcheck import rel_error
from test_model import _dense_twin, _route
from test_retrieval import oracle, random_corpus
from test_tensor import GRAPHS
from gradcheck import check


@contextlib.contextmanager
def criterion(n: int):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        text = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        conftest.CRITERIA[n] = (False, text)
        print(f"criterion {n}: FAIL {text}")
        raise
    summary = ", ".join(f"{k}={v}" for k, v in detail.items())
    conftest.CRITERIA[n] = (True, summary)
    print(f"criterion {n}: PASS {summary}")


def small_corpus(system: ExpertRAG) -> Corpus:
    corpus = Corpus(system.embedding_table)
    for i, text in enumerate(["e0 r0 v0", "e1 r1 v1", "e2 r0 v2", "e3 r1 v0", "e1 r0 v2"]):
        corpus.add(f"d{i}", system.vocab.encode(text))
    return corpus


# -- 1: gradients ---------------------------------------------------------------


def model_graph(seed: int, fusion_mode: str):
    """Full gated loss: z L_ret + (1 - z) L_noret + lambda z, with load balance in both branches.

    Returns the straight-through loss, a relaxed twin whose z is
    ``z + p - p0`` (same value and the same gradient at the base point, but
    smooth, so finite differences see the surrogate), and the leaves.
    """
    vocab = tiny_vocab()
    cfg = tiny_config(len(vocab), k_experts=1 + seed % 2, alpha_lb=0.1, lambda_ret=0.05)
    system = ExpertRAG(cfg, vocab, seed=100 + seed, fusion_mode=fusion_mode, gate_mode="sample")
    rng = np.random.default_rng(seed)
    system.gate.weight.data[:] = rng.normal(0, 0.5, cfg.d_model)
    corpus = small_corpus(system)
    query = vocab.encode(f"e{seed % 4} r{seed % 2}")
    answer = vocab.encode(f"v{seed % 3}")
    with T.no_grad():
        p0 = gate_score(system.query_representation(query), system.gate).item()
    draw = float(np.random.default_rng(1000 + seed).random())
    z_hard = int(draw < p0)

    def branch(z):
        fused, _, prefix, _ = build_input(system, query, z, corpus, track=True)
        ids, segs, targets, mask = _sequence(system, fused, answer)
        res = system.generator.forward(ids, segs, prefix=prefix)
        if prefix is not None:
            mask = np.concatenate([[0.0], mask])
            targets = np.concatenate([[targets[0]], targets])
        return token_loss(res.logits, targets, mask, res.decisions, cfg.alpha_lb)

    def loss(relaxed: bool):
        p = gate_score(system.query_representation(query, track=True), system.gate)
        if relaxed:
            z = p + (z_hard - p0)
        else:
            dec = decide(p, system.gate, np.random.default_rng(1000 + seed))
            assert dec.z_ret == z_hard
            z = ste_z(dec)
        return z * branch(1) + (1.0 - z) * branch(0) + z * cfg.lambda_ret

    return loss, system.parameters(), z_hard


def sampled_fd(fn, leaves, rng, per_leaf=3, eps=1e-6):
    """Central differences on a few random coordinates of every leaf."""
    picks, numeric = [], []
    with T.no_grad():
        for leaf in leaves:
            flat = leaf.data.reshape(-1)
            for i in rng.choice(flat.size, min(per_leaf, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                picks.append((leaf, int(i)))
                numeric.append((up - down) / (2 * eps))
    return picks, np.array(numeric)


def test_criterion_01_gradient_integrity():
    with criterion(1) as detail:
        start = time.perf_counter()
        worst, n_graphs = 0.0, 0
        for make in GRAPHS:
            for seed in range(6):
                fn, leaves = make(np.random.default_rng(seed))
                worst = max(worst, check(fn, leaves))
                n_graphs += 1
        model_worst, branches = 0.0, set()
        for seed in range(8):
            mode = "concat" if seed < 5 else "augment"
            loss, leaves, z = model_graph(seed, mode)
            branches.add((mode, z))
            for leaf in leaves:
                leaf.zero_grad()
            T.backward(loss(relaxed=False))
            picks, numeric = sampled_fd(lambda: loss(relaxed=True), leaves, np.random.default_rng(seed))
            analytic = np.array([leaf.grad.reshape(-1)[i] for leaf, i in picks])
            model_worst = max(model_worst, rel_error([analytic], [numeric]))
            n_graphs += 1
        elapsed = time.perf_counter() - start
        detail.update(graphs=n_graphs, op_err=f"{worst:.1e}", model_err=f"{model_worst:.1e}", seconds=f"{elapsed:.1f}")
        assert n_graphs >= 100
        assert {z for _, z in branches} == {0, 1}, "the model graphs must exercise both gate outcomes"
        assert worst < 1e-6 and model_worst < 1e-6
        assert elapsed < 60.0


# -- 2: routing -----------------------------------------------------------------


def test_criterion_02_routing_invariants():
    with criterion(2) as detail:
        rng = np.random.default_rng(2)
        mismatches = 0
        for _ in range(10_000):
            e = int(rng.integers(1, 17))
            k = int(rng.integers(1, e + 1))
            # half of the vectors come from a coarse grid, so ties are common
            row = rng.normal(size=e) if rng.random() < 0.5 else rng.integers(-2, 3, e).astype(float)
            expected = np.argsort(-row, kind="stable")[:k]
            mismatches += not np.array_equal(topk_select(row[None, :], k)[0], expected)
        assert mismatches == 0
        assert topk_select(np.zeros((1, 5)), 2).tolist() == [[0, 1]]
        assert topk_select(np.array([[0.0, 3.0, 1.0, 3.0, 3.0]]), 2).tolist() == [[1, 3]]

        from expertrag.model import Generator

        moe = Generator(tiny_config(n_experts=1, k_experts=1), seed=5)
        dense = _dense_twin(moe)
        ids, segs = [3, 7, 4, 0, 9, 5, 1], [0, 0, 0, 1, 1, 1, 2]
        assert np.array_equal(moe.forward(ids, segs).logits.data, dense.forward(ids, segs).logits.data)

        for _ in range(200):
            grid = rng.integers(-40, 41, (4, 6)) / 8.0
            c = int(rng.integers(-800, 801)) / 8.0
            k = int(rng.integers(1, 4))
            sel, w = _route(grid, k)
            sel2, w2 = _route(grid + c, k)
            assert np.array_equal(sel, sel2)
            assert np.allclose(w, w2, rtol=1e-9, atol=1e-12)
        detail.update(vectors=10_000, shifts=200, e1_bit_identical=True)


# -- 3: load balance ----------------------------------------------------------


def test_criterion_03_load_balance_algebra():
    with criterion(3) as detail:
        worst = 0.0
        for e in (2, 4, 8):
            for alpha in (0.01, 0.3):
                n = 4 * e
                uniform = RouterDecision(Tensor(np.zeros((n, e))), (np.arange(n) % e)[:, None],
                                         Tensor(np.ones((n, 1))), np.full(e, 4))
                scores = np.full((n, e), -1e4)
                scores[:, e - 1] = 0.0
                hot = RouterDecision(Tensor(scores), np.full((n, 1), e - 1), Tensor(np.ones((n, 1))),
                                     np.bincount(np.full(n, e - 1), minlength=e))
                worst = max(worst, abs(load_balance_loss([uniform], alpha).item() - alpha))
                worst = max(worst, abs(load_balance_loss([hot], alpha).item() - alpha * e))
        detail.update(max_abs_error=f"{worst:.1e}")
        assert worst <= 1e-12


# -- 4: retrieval oracle --------------------------------------------------------


def test_criterion_04_retrieval_oracle():
    with criterion(4) as detail:
        rng = np.random.default_rng(4)
        sizes = []
        for _ in range(100):
            vocab_size, d = int(rng.integers(5, 40)), int(rng.integers(2, 33))
            tab = rng.normal(size=(vocab_size, d))
            m = int(rng.integers(1, 1001))
            corpus = random_corpus(rng, m, tab)
            q = embed_document(rng.integers(0, vocab_size, 3).tolist(), tab)
            k = int(rng.integers(1, 12))
            assert search_top_k(q, k, corpus).hits == oracle(q, corpus, k)
            sizes.append(m)
        detail.update(corpora=100, max_M=max(sizes))


# -- 5: gate calibration ----------------------------------------------------------


def test_criterion_05_gate_calibration(trained):
    with criterion(5) as detail:
        gate = RetrievalGate.init(4, mode="sample")
        rng = np.random.default_rng(5)
        worst = 0.0
        for p in (0.1, 0.5, 0.83):
            freq = np.mean([decide(p, gate, rng).z_ret for _ in range(100_000)])
            worst = max(worst, abs(freq - p))
        assert worst <= 0.01

        system, corpus, task = trained["system"], trained["corpus"], trained["task"]
        assert system.gate.mode == "threshold"
        queries = [system.vocab.encode(ex.query) for ex in task.test[:50]]
        first = [infer(q, system, corpus, i).to_line("q", system.vocab) for i, q in enumerate(queries)]
        again = [infer(q, system, corpus, 99 + i).to_line("q", system.vocab) for i, q in enumerate(queries)]
        assert first == again
        detail.update(draws=100_000, worst_gap=f"{worst:.4f}", replayed=len(queries))


# -- 6: pipeline branches -----------------------------------------------------------


def test_criterion_06_branch_conformance():
    with criterion(6) as detail:
        vocab = tiny_vocab()
        for fusion_mode in ("concat", "augment"):
            system = ExpertRAG(tiny_config(len(vocab)), vocab, seed=6, fusion_mode=fusion_mode, gate_mode="sample")
            corpus = small_corpus(system)
            for text in ("e0 r0", "e1 r1", "e3 r0"):
                query = vocab.encode(text)
                closed = infer(query, system, corpus, 0, "no_retrieve")
                assert closed.z_effective == 0 and closed.retrieval is None
                assert closed.fused.tokens == query and set(closed.fused.segments) == {0}
                assert closed.cost.search == 0 and closed.cost.context_tokens == 0

                opened = infer(query, system, corpus, 0, "force_retrieve")
                expected = search_top_k(corpus.embed_query(query), system.config.k_docs, corpus)
                assert opened.retrieval.hits == expected.hits
                if fusion_mode == "concat":
                    tokens, segs = list(query), [0] * len(query)
                    for rank, doc_id in enumerate(expected.ids, 1):
                        tokens += [vocab.sep] + corpus[doc_id].text
                        segs += [rank] * (1 + len(corpus[doc_id].text))
                    assert opened.fused.tokens == tokens and opened.fused.segments == segs
                else:
                    assert opened.fused.tokens == query and opened.fused.doc_ids == tuple(expected.ids)
                assert opened.cost.search == corpus.M * system.config.d_model

                for mode in MODES:
                    for seed in (0, 1, 2):
                        a = infer(query, system, corpus, seed, mode).to_line("q", vocab)
                        b = infer(query, system, corpus, seed, mode).to_line("q", vocab)
                        assert a == b
        detail.update(fusion_modes=2, queries=3, modes=len(MODES))


# -- 7 and 8: cost model and efficiency ----------------------------------------------


@pytest.fixture(scope="module")
def bench_run(trained):
    system, corpus, task = trained["system"], trained["corpus"], trained["task"]
    view = system.with_retrieval_depth(1)
    rng = np.random.default_rng(conftest.DEFAULT_SEED)
    picks = rng.integers(len(task.test), size=1000)
    queries = [system.vocab.encode(task.test[i].query) for i in picks]
    return costs.bench(view, queries, corpus, conftest.DEFAULT_SEED, "acceptance")


def test_criterion_07_cost_model(bench_run):
    with criterion(7) as detail:
        row, params, normal, _ = bench_run
        assert len(normal) == 1000
        detail.update(f_hat=f"{row.f_hat:.3f}", measured=f"{row.measured:.0f}", predicted=f"{row.predicted:.0f}",
                      deviation=f"{row.deviation:.4f}")
        assert row.deviation < 0.05
        fs = np.linspace(0.0, 1.0, 21)
        values = np.array([costs.expected_cost(params.with_f(f)) for f in fs])
        slope = values[1] - values[0]
        assert slope >= 0 and np.all(np.diff(values) >= 0)
        assert np.allclose(np.diff(values), slope, rtol=1e-12, atol=1e-9)


def test_criterion_08_efficiency(bench_run):
    with criterion(8) as detail:
        row, params, _, _ = bench_run
        share = costs.retrieval_share(params.with_f(1.0))
        detail.update(f_hat=f"{row.f_hat:.3f}", retrieval_share=f"{share:.2f}",
                      savings=f"{row.savings_vs_retrieve:.3f}", dense_reduction=f"{row.dense_reduction:.1f}x")
        assert abs(row.f_hat - 0.5) <= 0.15
        assert 0.35 <= share <= 0.65
        assert 0.20 <= row.savings_vs_retrieve <= 0.35
        assert row.dense_reduction >= 5.0


# -- 9: end-to-end learning -------------------------------------------------------------


def test_criterion_09_end_to_end_learning(trained):
    with criterion(9) as detail:
        system, corpus, task = trained["system"], trained["corpus"], trained["task"]
        external = [ex for ex in task.test if ex.label == 1]
        forced, _ = evaluate(system, external, corpus, "force_retrieve", conftest.DEFAULT_SEED)
        closed, _ = evaluate(system, external, corpus, "no_retrieve", conftest.DEFAULT_SEED)
        normal, _ = evaluate(system, task.test, corpus, "normal", conftest.DEFAULT_SEED)
        true_fraction = np.mean([ex.label for ex in task.test])
        chance = 1.0 / task.config.n_values
        detail.update(
            train_s=f"{trained['seconds']:.0f}", forced_ext=f"{forced.accuracy_external:.3f}",
            closed_ext=f"{closed.accuracy_external:.3f}", ext=f"{normal.accuracy_external:.3f}",
            recall=f"{normal.gate_recall:.3f}", specificity=f"{normal.gate_specificity:.3f}",
            f_hat=f"{normal.retrieval_fraction:.3f}", true_f=f"{true_fraction:.3f}",
        )
        assert trained["seconds"] < 600
        assert forced.accuracy_external >= 0.9
        assert closed.accuracy_external <= 3 * chance
        assert normal.accuracy_external >= 0.8
        assert normal.gate_recall >= 0.8 and normal.gate_specificity >= 0.8
        assert abs(normal.retrieval_fraction - true_fraction) <= 0.15


# -- 10: corpus updates ---------------------------------------------------------------------


def test_criterion_10_memory_updatability(trained):
    with criterion(10) as detail:
        system, corpus, task = trained["system"], trained["corpus"], trained["task"]
        size = corpus.M
        probe = corpus_update_probe(system, corpus, task.facts, conftest.DEFAULT_SEED)
        detail.update(fact=probe.fact_id, before=probe.answer_before, after=probe.answer_after,
                      rank=probe.rank_after, hash_unchanged=probe.hash_before == probe.hash_after)
        assert probe.flipped
        assert corpus.M == size


# -- 11: reproducibility ---------------------------------------------------------------------

SHORT = """\
task.n_entities = 10
task.n_relations = 3
task.n_facts = 30
task.n_values = 8
model.d_model = 16
model.n_layers = 2
model.moe_layers = 1
model.n_experts = 2
model.d_ff = 32
model.n_heads = 2
model.max_seq_len = 32
model.answer_cap = 3
gate.mode = sample
train.epochs = 4
train.warmup_epochs = 1
bench.queries = 40
"""


def cli_session(root, capsys) -> dict[str, str]:
    root.mkdir()
    cfg = root / "short.cfg"
    cfg.write_text(SHORT, encoding="utf-8")
    common = ["--config", str(cfg), "--seed", "11"]
    data, model = str(root / "data"), str(root / "model")
    ckpt = str(root / "model" / "model.xrag")
    steps = [
        ["gen", "--out", data],
        ["train", "--data", data, "--out", model],
        ["eval", "--checkpoint", ckpt, "--data", data, "--out", str(root / "eval")],
        ["infer", "--checkpoint", ckpt, "--corpus", str(root / "data" / "corpus.tsv"), "--query", "e2 r1"],
        ["bench", "--checkpoint", ckpt, "--data", data, "--out", str(root / "bench")],
        ["ablate", "--checkpoint", ckpt, "--data", data, "--out", str(root / "ablate")],
        ["corpus", "add", "--corpus", str(root / "data" / "corpus.tsv"), "--id", "extra", "--text", "e0 r0 v1"],
    ]
    stdout = {}
    for step in steps:
        capsys.readouterr()
        assert main(step + common) == 0, step
        stdout[step[0]] = capsys.readouterr().out.replace(str(root), "<root>")
    return stdout


def test_criterion_11_reproducibility(tmp_path, capsys):
    with criterion(11) as detail:
        a = cli_session(tmp_path / "a", capsys)
        b = cli_session(tmp_path / "b", capsys)
        assert a == b
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        different = [str(f) for f in files if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
        detail.update(files=len(files), different=len(different))
        assert not different, different
        assert any(f.suffix == ".xrag" for f in files) and any(f.name == "train_log.tsv" for f in files)
