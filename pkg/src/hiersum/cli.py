"""Command-line entry point: ``hiersum <subcommand> ...``.

Exit codes: 0 success, 2 configuration or validation error, 1 other failure.
``HIERSUM_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis
from .container import ContainerError
from .data import DataError, Vocabulary, gen_synthetic, load_jsonl, make_batch, write_jsonl
from .decoding import GenerationConfig, greedy_generate
from .experiment import (ABLATION_ROWS, FLAG_NAMES, ExperimentSpec, ablation_grid, load_spec,
                         parse_config_text)
from .model import ConfigError, HierSumModel
from .rouge import corpus_rouge, score_pair
from .training import (CheckpointError, batch_config_for, evaluate, load_checkpoint,
                       model_from_checkpoint, train_loop)

log = logging.getLogger("hiersum")


class UsageError(Exception):
    """Bad input detected by a subcommand (exit code 2)."""


def _default_out() -> str:
    return os.environ.get("HIERSUM_OUT", "runs")


def _overrides(pairs) -> dict[str, str]:
    return parse_config_text("\n".join(pairs or []), "--set")


# ----------------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    lo_d, hi_d = args.n_docs
    lo_f, hi_f = args.facts
    examples = gen_synthetic(args.seed, args.count, (lo_d, hi_d), (lo_f, hi_f), args.keys, args.values)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        n = write_jsonl(examples, out)
    except OSError as exc:
        raise RuntimeError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {n} examples to {out}")
    return 0


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec, out_dir: Path, resume: str | None = None,
                   quiet: bool = False) -> dict:
    """Train one configuration; writes vocab.txt, checkpoint.bin, metrics.jsonl, config.txt."""
    spec, vocab, train, heldout = spec.prepare()
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    (out_dir / "config.txt").write_text(spec.to_text(), encoding="utf-8")
    ckpt_path = out_dir / "checkpoint.bin"
    tcfg = replace(spec.train, checkpoint_path=str(ckpt_path))
    metrics = out_dir / "metrics.jsonl"
    opt_state = None
    if resume:
        ckpt = load_checkpoint(resume, expect_config=spec.model)
        model = model_from_checkpoint(ckpt, seed=tcfg.seed)
        opt_state = ckpt.opt_state
    else:
        model = HierSumModel(spec.model, seed=tcfg.seed)
        metrics.unlink(missing_ok=True)

    def report(step, loss):
        if not quiet and (step % 100 == 0):
            log.info("step %d loss %.4f", step, loss)

    result = train_loop(model, train, vocab, tcfg, heldout, opt_state, metrics, report)
    final = evaluate(model, heldout, vocab)
    final["losses"] = result.losses
    (out_dir / "final_eval.json").write_text(json.dumps({k: v for k, v in final.items() if k != "losses"},
                                                        indent=2), encoding="utf-8")
    return final


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.steps is not None:
        overrides["max_steps"] = str(args.steps)
    spec = load_spec(args.config, overrides)
    out_dir = Path(args.out_dir or spec.out_dir or Path(_default_out()) / "train")
    final = run_experiment(spec, out_dir, args.resume)
    summary = {k: v for k, v in final.items() if k != "losses"}
    print(json.dumps(summary))
    return 0


# ----------------------------------------------------------------------------
# generate
# ----------------------------------------------------------------------------


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.ckpt).with_name("vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != ckpt.model_config.vocab_size:
        raise UsageError(f"vocabulary {vocab_path} has {len(vocab)} tokens, "
                         f"checkpoint expects {ckpt.model_config.vocab_size}")
    model = model_from_checkpoint(ckpt)
    examples = list(load_jsonl(args.input))
    cfg = model.config
    gen = GenerationConfig(max_length=args.max_length or cfg.tgt_trunc, min_length=args.min_length)
    bcfg = batch_config_for(cfg)
    summaries, traces = [], []
    for start in range(0, len(examples), args.batch_size):
        chunk = examples[start:start + args.batch_size]
        out = greedy_generate(model, make_batch(chunk, vocab, bcfg), gen, trace=bool(args.trace))
        summaries += [vocab.decode(s) for s in out.sequences]
        if args.trace:
            for tr in out.traces:
                tr.meta = {f: getattr(cfg, f) for f in FLAG_NAMES}
            traces += out.traces
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(summaries):
            fh.write((json.dumps({"id": i, "summary": s}) if args.format == "jsonl" else s) + "\n")
    if args.trace:
        analysis.save_traces(traces, args.trace)
    print(f"wrote {len(summaries)} summaries to {out_path}")
    return 0


# ----------------------------------------------------------------------------
# evaluate
# ----------------------------------------------------------------------------


def read_summaries(path) -> list[str]:
    """Summaries from JSONL (``summary`` field) or plain text (one per line)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix != ".jsonl":
        return lines
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(obj["summary"])
        except (json.JSONDecodeError, KeyError, TypeError):
            raise UsageError(f"{path}:{lineno}: expected an object with a 'summary' field") from None
    return out


def cmd_evaluate(args) -> int:
    hyps, refs = read_summaries(args.hyp), read_summaries(args.ref)
    if not hyps:
        raise UsageError(f"hypothesis file {args.hyp} is empty")
    if len(hyps) != len(refs):
        raise UsageError(f"{len(hyps)} hypotheses but {len(refs)} references")
    corpus = corpus_rouge(hyps, refs)
    rows = []
    for i, (h, r) in enumerate(zip(hyps, refs)):
        row = {"id": i}
        for name, s in score_pair(h, r).items():
            row.update({f"{name}_precision": s.precision, f"{name}_recall": s.recall, f"{name}_f1": s.f1})
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
            writer.writerow({"id": "corpus", **{k: corpus[k] for k in rows[0] if k != "id"}})
    else:
        with open(out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"id": "corpus", **corpus}) + "\n")
    print(json.dumps({k: corpus[k] for k in ("rouge1", "rouge2", "rougeL")}))
    return 0


# ----------------------------------------------------------------------------
# analyze
# ----------------------------------------------------------------------------


def _analyze_dir(trace_dir):
    traces = analysis.load_traces(trace_dir)
    bad = max(t.max_row_sum_error() for t in traces)
    if bad > 1e-5:
        raise UsageError(f"{trace_dir}: attention rows do not sum to 1 (max error {bad:.2e})")
    self_doc = analysis.self_doc_mass(traces)
    cds_report = analysis.cds(traces)
    return self_doc, cds_report


def cmd_analyze(args) -> int:
    self_doc, cds_report = _analyze_dir(args.trace_dir)
    ratios = None
    if args.baseline_dir:
        base_sd, base_cds = _analyze_dir(args.baseline_dir)
        ratios = {"self_doc_mass_ratio": analysis.compare(self_doc, base_sd)}
        if cds_report.corpus is not None and base_cds.corpus:
            ratios["cds_ratio"] = analysis.compare(cds_report, base_cds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_report(out, self_doc, cds_report, ratios)
    if ratios and args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "method", "baseline", "ratio"])
            writer.writerow(["self_doc_mass", self_doc.corpus, base_sd.corpus, ratios["self_doc_mass_ratio"]])
            if "cds_ratio" in ratios:
                writer.writerow(["cds", cds_report.corpus, base_cds.corpus, ratios["cds_ratio"]])
    summary = {"self_doc_mass": self_doc.corpus, "cds": cds_report.corpus}
    summary.update(ratios or {})
    print(json.dumps(summary))
    return 0


# ----------------------------------------------------------------------------
# ablate
# ----------------------------------------------------------------------------

TABLE_METRICS = ("loss", "token_accuracy", "rouge1", "rouge2", "rougeL")


def ablation_table(results: dict[int, dict]) -> list[dict]:
    """One row per configuration with metric deltas against row 0."""
    ref = results[0]
    table = []
    for row, res in sorted(results.items()):
        entry = {"row": row, **dict(zip(FLAG_NAMES, ABLATION_ROWS[row]))}
        for m in TABLE_METRICS:
            entry[m] = res[m]
            entry[f"delta_{m}"] = res[m] - ref[m]
        entry["loss_step0"] = res["losses"][0]
        entry["loss_final_step"] = res["losses"][-1]
        table.append(entry)
    return table


def cmd_ablate(args) -> int:
    overrides = _overrides(args.set)
    if args.steps is not None:
        overrides["max_steps"] = str(args.steps)
    base = load_spec(args.base_config, overrides)
    grid = ablation_grid(base)
    rows = sorted(grid) if not args.rows else [int(r) for r in args.rows.split(",")]
    if 0 not in rows:
        raise UsageError("row 0 is the reference and must be included")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for row in rows:
        log.info("ablation row %d: %s", row, dict(zip(FLAG_NAMES, ABLATION_ROWS[row])))
        results[row] = run_experiment(grid[row], out_dir / f"row{row}", quiet=True)
    table = ablation_table(results)
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for entry in table:
            fh.write(json.dumps(entry) + "\n")
    for entry in table:
        print(f"row {entry['row']}: " + " ".join(f"{m}={entry[m]:.4f}" for m in TABLE_METRICS))
    return 0


# ----------------------------------------------------------------------------


def _pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(",")
    return int(lo), int(hi or lo)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiersum", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic fact-merge examples as JSONL")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--n-docs", type=_pair, default=(2, 4), help="min,max documents per example")
    g.add_argument("--facts", type=_pair, default=(1, 2), help="min,max facts per document")
    g.add_argument("--keys", type=int, default=10)
    g.add_argument("--values", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--input", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--vocab")
    gen.add_argument("--trace", metavar="DIR")
    gen.add_argument("--format", choices=("jsonl", "text"), default="jsonl")
    gen.add_argument("--max-length", type=int)
    gen.add_argument("--min-length", type=int, default=1)
    gen.add_argument("--batch-size", type=int, default=50)
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="ROUGE-1/2/L of hypotheses against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="self-document mass and CDS from trace files")
    a.add_argument("--trace-dir", required=True)
    a.add_argument("--baseline-dir")
    a.add_argument("--out", required=True)
    a.add_argument("--csv")
    a.set_defaults(func=cmd_analyze)

    ab = sub.add_parser("ablate", help="train the six ablation rows and compare")
    ab.add_argument("--base-config", required=True)
    ab.add_argument("--out-dir", default=None)
    ab.add_argument("--steps", type=int)
    ab.add_argument("--rows", help="comma-separated subset of rows (must include 0)")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "out_dir", "missing") is None and args.command == "ablate":
        args.out_dir = str(Path(_default_out()) / "ablation")
    try:
        return args.func(args)
    except (ConfigError, DataError, UsageError, CheckpointError, ContainerError,
            analysis.TraceError, analysis.UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
