"""Command-line entry point: ``clinsum {synth,distill,train,summarize,evaluate,verify}``.

Settings come from an optional JSON config file::

    {"model": {...ModelConfig fields...},
     "dkd": {"n_k": 7, "n_r": 5},
     "paths": {"corpus": ..., "triples": ..., "features": ..., "checkpoint_dir": ..., "report": ...}}

and command-line flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusError, department_labels, load_corpus, save_corpus, split_corpus, tokenize
from .knowledge import DkdConfig, KnowledgeEmbedder, TripleStore, TripleStoreError, distill
from .metrics import EvalReport, evaluate
from .model import ConfigError, ModelConfig, SequenceTooLong
from .training import (CheckpointError, EvidenceBuilder, build_model, load_checkpoint, predict_department,
                       prepare, rouge_l_on, save_checkpoint, summarize, train_examples)
from .visual import FeatureFileError, UnknownImageError, load_features

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("clinsum")


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dkd: DkdConfig = field(default_factory=DkdConfig)
    corpus: Path | None = None
    triples: Path | None = None
    features: Path | None = None
    checkpoint_dir: Path | None = None
    report: Path | None = None

    def require(self, *names: str) -> None:
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"missing path: {name}")
            if not Path(path).exists():
                raise ConfigError(f"{name} path does not exist: {path}")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    model_fields = dict(raw.get("model", {}))
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("target_field", "target_field")):
        val = getattr(args, flag, None)
        if val is not None:
            model_fields[key] = val
    try:
        model = ModelConfig.from_dict(model_fields)
        dkd = DkdConfig(**raw.get("dkd", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    paths = dict(raw.get("paths", {}))
    for name in ("corpus", "triples", "features", "checkpoint_dir", "report"):
        val = getattr(args, name, None)
        if val is not None:
            paths[name] = val
    return RunConfig(model, dkd, **{k: Path(v) for k, v in paths.items() if v is not None})


def _write_lines(path: Path | None, lines: list[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_synth(args, rc: RunConfig) -> int:
    from .synthetic import generate_synthetic
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(args.n_dialogues, args.n_departments, args.vocab_hint,
                              seed=rc.model.seed, d_v=rc.model.d_v)
    save_corpus(data.corpus, out / "corpus.jsonl")
    data.triples.save(out / "triples.tsv")
    data.features.save(out / "features.tsv")
    log.info("wrote %d dialogues to %s", len(data.corpus), out)
    return EXIT_OK


def cmd_distill(args, rc: RunConfig) -> int:
    rc.require("corpus", "triples")
    corpus = load_corpus(rc.corpus)
    store = TripleStore.load(rc.triples)
    lines = [distill(d.context(), store, rc.dkd).dumps(d.id) for d in corpus]
    _write_lines(Path(args.out) if args.out else None, lines)
    return EXIT_OK


def _evidence(rc: RunConfig, embedder: KnowledgeEmbedder | None = None) -> EvidenceBuilder:
    rc.require("triples", "features")
    store = TripleStore.load(rc.triples)
    feats = load_features(rc.features, d_v=rc.model.d_v)
    if feats.d_v != rc.model.d_v:
        raise DataError(f"feature width {feats.d_v} does not match model d_v={rc.model.d_v}")
    if embedder is None:
        embedder = KnowledgeEmbedder.from_store(store, rc.model.d_kn, seed=rc.model.seed)
    return EvidenceBuilder(store, feats, embedder, rc.dkd)


def cmd_train(args, rc: RunConfig) -> int:
    rc.require("corpus")
    if rc.checkpoint_dir is None:
        raise ConfigError("missing path: checkpoint_dir")
    corpus = load_corpus(rc.corpus)
    if not corpus:
        raise DataError(f"{rc.corpus}: empty corpus")
    ev = _evidence(rc)
    train_set, val_set, _ = split_corpus(corpus, (0.8, 0.05, 0.15), rc.model.seed)
    labels = department_labels(corpus)
    cfg = rc.model.replace(n_departments=max(rc.model.n_departments, len(labels)))
    model = build_model(train_set, cfg)
    # labels from the full corpus so val/test departments resolve
    model.departments = labels + [f"<unused{i}>" for i in range(cfg.n_departments - len(labels))]
    train_ex = prepare(train_set, model, ev)
    val_ex = prepare(val_set, model, ev) or train_ex
    ckdir = Path(rc.checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    best = {"score": -1.0, "epoch": 0}

    def on_epoch(epoch, m, rec):
        score = rouge_l_on(m, val_ex)
        rec["val_rougeL"] = score
        if score > best["score"]:
            best.update(score=score, epoch=epoch)
            save_checkpoint(ckdir / "best.npz", m, ev.embedder)

    result = train_examples(model, train_ex, checkpoint_dir=ckdir / "epochs" if args.keep_epochs else None,
                            log_path=ckdir / "train_log.jsonl", on_epoch=on_epoch, embedder=ev.embedder)
    save_checkpoint(ckdir / "last.npz", result.model, ev.embedder)
    log.info("best val ROUGE-L %.4f at epoch %d", best["score"], best["epoch"])
    return EXIT_OK


def cmd_summarize(args, rc: RunConfig) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else (rc.checkpoint_dir / "best.npz" if rc.checkpoint_dir else None)
    if ckpt is None or not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    dialogues_path = Path(args.dialogues) if args.dialogues else rc.corpus
    if dialogues_path is None or not dialogues_path.exists():
        raise ConfigError(f"dialogue file not found: {dialogues_path}")
    model, embedder = load_checkpoint(ckpt)
    if model.vocab is None or embedder is None or model.departments is None:
        raise CheckpointError(f"{ckpt}: checkpoint lacks vocabulary, labels or knowledge embedder")
    rc.model = model.config
    ev = _evidence(rc, embedder)
    if embedder.d_kn != model.config.d_kn:
        raise CheckpointError(f"{ckpt}: embedder width {embedder.d_kn} != d_kn {model.config.d_kn}")
    dialogues = load_corpus(dialogues_path)
    lines = []
    for d in dialogues:
        ex = prepare([d], model, ev, labels=False)[0]
        rec = {"id": d.id, "predicted_department": predict_department(model, ex),
               "generated_text": summarize(model, ex, args.strategy, args.beam_size)}
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    _write_lines(Path(args.out) if args.out else None, lines)
    return EXIT_OK


def evaluate_files(predictions: Path, gold: Path, target_field: str = "summary") -> EvalReport:
    preds = {}
    with open(predictions, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    preds[str(rec["id"])] = rec
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"{predictions}:{lineno}: {exc}") from None
    gold_corpus = {d.id: d for d in load_corpus(gold)}
    missing = sorted(set(gold_corpus) ^ set(preds))
    if missing:
        raise DataError(f"prediction/gold ids do not align; unmatched ids: {', '.join(missing)}")
    ids = sorted(gold_corpus)
    cands = [tokenize(preds[i]["generated_text"]) for i in ids]
    refs = [tokenize(getattr(gold_corpus[i], target_field)) for i in ids]
    if all("predicted_department" in preds[i] for i in ids):
        return evaluate(cands, refs, [preds[i]["predicted_department"] for i in ids],
                        [gold_corpus[i].department for i in ids])
    return evaluate(cands, refs)


def cmd_evaluate(args, rc: RunConfig) -> int:
    for p in (args.predictions, args.gold):
        if not Path(p).exists():
            raise ConfigError(f"file not found: {p}")
    report = evaluate_files(Path(args.predictions), Path(args.gold), rc.model.target_field)
    out = Path(args.out) if args.out else rc.report
    if out is not None:
        _write_lines(out, [report.to_json()])
    print(report.table())
    return EXIT_OK


def cmd_verify(args, rc: RunConfig) -> int:
    from .verify import run_checks
    t0 = time.perf_counter()
    results = run_checks(mutate=args.mutate)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'verification FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (file or directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus")
    data.add_argument("--triples")
    data.add_argument("--features")

    ap = argparse.ArgumentParser(prog="clinsum", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus, triple store and feature file")
    p.add_argument("--n-dialogues", type=int, default=20)
    p.add_argument("--n-departments", type=int, default=4)
    p.add_argument("--vocab-hint", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("distill", parents=[common, data], help="per-dialogue knowledge subgraphs as JSON lines")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", parents=[common, data], help="train and keep the best-by-val-ROUGE-L checkpoint")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--target-field", dest="target_field", choices=["summary", "mcs", "doctor_impression"])
    p.add_argument("--keep-epochs", action="store_true", help="also keep one checkpoint per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("summarize", parents=[common, data], help="generate summaries and departments")
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--dialogues", help="JSONL dialogues (defaults to --corpus)")
    p.add_argument("--strategy", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-size", type=int, default=1)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against gold dialogues")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--target-field", dest="target_field", choices=["summary", "mcs", "doctor_impression"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", parents=[common], help="run the micro-scale property checks")
    p.add_argument("--mutate", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_run_config(args)
        return args.func(args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, TripleStoreError, FeatureFileError, UnknownImageError, CheckpointError,
            DataError, SequenceTooLong) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
