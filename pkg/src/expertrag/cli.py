"""Command-line harness.

Every subcommand takes ``--config`` (flat ``key = value`` text) and ``--seed``;
all emitted files are a pure function of those two plus the input files.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, costs, evaluation, plotting
from .config import RunConfig, load_config
from .errors import ExpertRAGError, LoadError, UpdateError
from .pipeline import MODES, TRACE_HEADER, ExpertRAG, infer
from .retrieval import Corpus, format_corpus_line, ingest_corpus, parse_corpus_lines
from .task import CORPUS_FILE, FACTS_FILE, TEST_FILE, TRAIN_FILE, gen_task, read_examples, read_facts, write_task
from .training import LOG_HEADER, train
from .vocab import Vocab

log = logging.getLogger("expertrag")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostics instead of usage dumps
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _write(path: Path, lines) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_system(args, run: RunConfig) -> ExpertRAG:
    system = checkpoint.load(args.checkpoint)
    # gate settings in an explicit config override the checkpoint's
    if "gate.mode" in run.explicit:
        system.gate.mode = run.gate_mode
    if "gate.threshold" in run.explicit:
        system.gate.threshold = run.model.gate_threshold
    return system


def _corpus_for(system: ExpertRAG, path: Path) -> Corpus:
    return ingest_corpus(path, system.vocab, system.embedding_table, "checkpoint")


def _data_file(args, name: str) -> Path:
    path = Path(args.data) / name
    if not path.exists():
        raise LoadError(f"missing {path}")
    return path


# -- subcommands --------------------------------------------------------------


def cmd_gen(args, run: RunConfig) -> None:
    task = gen_task(run.task, args.seed)
    paths = write_task(task, _out_dir(args.out))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def cmd_train(args, run: RunConfig) -> None:
    tc = run.task
    vocab = Vocab.for_task(tc.n_entities, tc.n_relations, tc.n_values)
    cfg = run.model.replace(vocab_size=len(vocab))
    system = ExpertRAG(cfg, vocab, args.seed, run.fusion_mode, run.gate_mode)
    corpus = _corpus_for(system, _data_file(args, CORPUS_FILE))
    examples = read_examples(_data_file(args, TRAIN_FILE))
    out = _out_dir(args.out)
    log_path = out / "train_log.tsv"
    fh = open(log_path, "w", encoding="utf-8", newline="\n")
    try:
        fh.write(LOG_HEADER)

        def on_epoch(entry, _system):
            fh.write(entry.line())
            fh.flush()
            log.info("epoch %d loss %.4f retrieval %.3f", entry.epoch, entry.loss, entry.retrieval_fraction)

        try:
            result = train(system, corpus, examples, run.train, args.seed, on_epoch=on_epoch)
        except ExpertRAGError:
            checkpoint.save(system, out / "model.last_good.xrag")
            raise
    finally:
        fh.close()
    digest = checkpoint.save(system, out / "model.xrag")
    plotting.training_curve(result.logs, out / "training_curve.png")
    print(f"checkpoint {out / 'model.xrag'} sha256 {digest}")


def cmd_eval(args, run: RunConfig) -> None:
    system = _load_system(args, run)
    mode = args.mode or run.eval_mode
    corpus = _corpus_for(system, _data_file(args, CORPUS_FILE))
    examples = read_examples(_data_file(args, TEST_FILE))
    metrics, traces = evaluation.evaluate(system, examples, corpus, mode, args.seed)
    out = _out_dir(args.out)
    _write(out / f"eval_{mode}.tsv", [metrics.header(), metrics.row()])
    _write(out / f"traces_{mode}.tsv", [TRACE_HEADER] + traces)
    sys.stdout.write(metrics.header() + metrics.row())


def cmd_infer(args, run: RunConfig) -> None:
    system = _load_system(args, run)
    corpus = _corpus_for(system, Path(args.corpus)) if args.corpus else None
    trace = infer(system.vocab.encode(args.query), system, corpus, args.seed, args.mode or run.eval_mode)
    sys.stdout.write(TRACE_HEADER + trace.to_line("q00000", system.vocab))


def cmd_bench(args, run: RunConfig) -> None:
    system = _load_system(args, run)
    if run.bench_k_docs:
        system = system.with_retrieval_depth(run.bench_k_docs)
    corpus = _corpus_for(system, _data_file(args, CORPUS_FILE))
    examples = read_examples(_data_file(args, TEST_FILE))
    evaluation.check_vocabulary(system, examples)
    rng = np.random.default_rng(args.seed)
    picks = rng.integers(len(examples), size=run.bench_queries)
    queries = [system.vocab.encode(examples[i].query) for i in picks]
    row, params, normal, forced = costs.bench(system, queries, corpus, args.seed, args.config_id)
    out = _out_dir(args.out)
    _write(out / "bench.tsv", [row.header(), row.line()])
    lines = [TRACE_HEADER] + [t.to_line(f"q{i:05d}", system.vocab) for i, t in enumerate(normal)]
    _write(out / "bench_traces.tsv", lines)
    measured_forced = float(np.mean([t.cost.total for t in forced]))
    points = [("learned gate", row.f_hat, row.measured), ("always retrieve", 1.0, measured_forced)]
    plotting.cost_curve(params, points, out / "cost_curve.png")
    sys.stdout.write(row.header() + row.line())


def cmd_ablate(args, run: RunConfig) -> None:
    system = _load_system(args, run)
    corpus = _corpus_for(system, _data_file(args, CORPUS_FILE))
    examples = read_examples(_data_file(args, TEST_FILE))
    out = _out_dir(args.out)
    rows = []
    for mode in MODES:
        metrics, traces = evaluation.evaluate(system, examples, corpus, mode, args.seed)
        rows.append(metrics)
        _write(out / f"traces_{mode}.tsv", [TRACE_HEADER] + traces)
    _write(out / "ablation.tsv", [evaluation.EvalMetrics.header()] + [m.row() for m in rows])
    n_values = sum(1 for t in system.vocab.tokens if t.startswith("v"))
    plotting.ablation_chart(rows, out / "ablation.png", chance=1.0 / n_values if n_values else None)

    facts_path = Path(args.data) / FACTS_FILE
    if facts_path.exists():
        probe = evaluation.corpus_update_probe(system, corpus, read_facts(facts_path), args.seed)
        header = "fact_id\tcorrect_before\tcorrect_after\tanswer_before\tanswer_after\trank_after\tlog_prob_before\tlog_prob_after\thash_unchanged\n"
        line = (
            f"{probe.fact_id}\t{int(probe.correct_before)}\t{int(probe.correct_after)}\t{probe.answer_before or '-'}\t"
            f"{probe.answer_after or '-'}\t{probe.rank_after or '-'}\t{probe.log_prob_before:.10f}\t"
            f"{probe.log_prob_after:.10f}\t{int(probe.hash_before == probe.hash_after)}\n"
        )
        _write(out / "update_probe.tsv", [header, line])
    sys.stdout.writelines([evaluation.EvalMetrics.header()] + [m.row() for m in rows])


def cmd_corpus_add(args, run: RunConfig) -> None:
    path = Path(args.corpus)
    if args.checkpoint:
        vocab = checkpoint.load(args.checkpoint).vocab
    else:
        tc = run.task
        vocab = Vocab.for_task(tc.n_entities, tc.n_relations, tc.n_values)
    existing = parse_corpus_lines(path.read_text(encoding="utf-8").splitlines(True), vocab) if path.exists() else []
    if any(doc_id == args.id for doc_id, _ in existing):
        raise UpdateError(f"document id {args.id!r} already in {path}")
    parse_corpus_lines([f"{args.id}\t{args.text}\n"], vocab)  # validates tokens
    line = format_corpus_line(args.id, args.text.split())
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(line)
    print(f"added {args.id} to {path} ({len(existing) + 1} documents)")


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="expertrag", description="Gated retrieval over a mixture-of-experts generator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate the synthetic fact task")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train generator and gate")
    t.add_argument("--data", required=True, help="directory written by gen")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval", cmd_eval, "evaluate a checkpoint on the test set"),
        ("bench", cmd_bench, "validate the cost model on a query stream"),
        ("ablate", cmd_ablate, "run all inference modes and the corpus-update probe"),
    ):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        if name == "eval":
            e.add_argument("--mode", choices=MODES)
        if name == "bench":
            e.add_argument("--config-id", default="default")
        e.set_defaults(func=func)

    i = sub.add_parser("infer", parents=[common], help="answer one query")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--corpus")
    i.add_argument("--query", required=True)
    i.add_argument("--mode", choices=MODES)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("corpus", help="corpus maintenance")
    csub = c.add_subparsers(dest="corpus_command", required=True, parser_class=_Parser)
    ca = csub.add_parser("add", parents=[common], help="append one document")
    ca.add_argument("--corpus", required=True)
    ca.add_argument("--id", required=True)
    ca.add_argument("--text", required=True)
    ca.add_argument("--checkpoint")
    ca.set_defaults(func=cmd_corpus_add)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not 0 <= args.seed < 2**64:
            raise _UsageError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        run = load_config(args.config)
        args.func(args, run)
    except _UsageError as exc:
        print(f"expertrag: usage error: {exc}", file=sys.stderr)
        return 2
    except ExpertRAGError as exc:
        print(f"expertrag: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"expertrag: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
