import json

import numpy as np
import pytest

from clinsum.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, evaluate_files, main
from clinsum.corpus import load_corpus, save_corpus
from clinsum.training import load_checkpoint

MODEL = dict(d_model=16, n_heads=2, n_encoder_layers=4, n_decoder_layers=1, d_ff=32, d_v=8, d_kn=8,
             max_src_len=80, max_tgt_len=16, learning_rate=3e-3, batch_size=4, epochs=2, n_departments=4)


def write_config(root, **model):
    cfg = {"model": {**MODEL, **model},
           "paths": {"corpus": str(root / "data/corpus.jsonl"), "triples": str(root / "data/triples.tsv"),
                     "features": str(root / "data/features.tsv")}}
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    assert main(["synth", "--config", cfg, "--out", str(root / "data"), "--n-dialogues", "20"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--checkpoint-dir", str(root / "ck")]) == EXIT_OK
    return root, cfg


def test_synth_outputs(run):
    root, _ = run
    assert len(load_corpus(root / "data/corpus.jsonl")) == 20
    first = (root / "data/features.tsv").read_text().splitlines()[0]
    assert len(first.split("\t")[1].split(",")) == 8


def test_distill(run):
    root, cfg = run
    a, b = root / "d1.jsonl", root / "d2.jsonl"
    assert main(["distill", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["distill", "--config", cfg, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    recs = [json.loads(x) for x in a.read_text().splitlines()]
    assert len(recs) == 20
    assert all(len(r["triples"]) <= 35 for r in recs)


def test_train_outputs(run):
    root, _ = run
    log = (root / "ck/train_log.jsonl").read_text().splitlines()
    assert len(log) == 2
    rec = json.loads(log[0])
    assert {"epoch", "L", "CL", "GL", "dept_accuracy", "val_rougeL"} <= set(rec)
    assert (root / "ck/best.npz").exists() and (root / "ck/last.npz").exists()


def test_resumed_probe(run):
    root, _ = run
    m1, _ = load_checkpoint(root / "ck/last.npz")
    m2, _ = load_checkpoint(root / "ck/last.npz")
    rng = np.random.default_rng(0)
    src, E_v, E_kn = [5, 6, 7, 8], rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    a = m1.forward(src, [1, 5, 2], E_v, E_kn)
    b = m2.forward(src, [1, 5, 2], E_v, E_kn)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_summarize_and_evaluate(run):
    root, cfg = run
    outs = []
    for k in range(2):
        out = root / f"pred{k}.jsonl"
        assert main(["summarize", "--config", cfg, "--checkpoint-dir", str(root / "ck"), "--out", str(out)]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    recs = [json.loads(x) for x in outs[0].read_text().splitlines()]
    gold = load_corpus(root / "data/corpus.jsonl")
    assert len(recs) == len(gold)
    labels = {d.department for d in gold}
    assert all(r["predicted_department"] in labels for r in recs)
    assert main(["evaluate", "--predictions", str(outs[0]), "--gold", str(root / "data/corpus.jsonl"),
                 "--out", str(root / "report.json")]) == EXIT_OK
    rep = json.loads((root / "report.json").read_text())
    assert rep["n_samples"] == 20 and 0.0 <= rep["rougeL"] <= 1.0


def gold_as_predictions(gold, order=None):
    order = range(len(gold)) if order is None else order
    return "".join(json.dumps({"id": gold[i].id, "predicted_department": gold[i].department,
                               "generated_text": gold[i].summary}) + "\n" for i in order)


def test_evaluate_identity_and_order(run, tmp_path):
    root, _ = run
    gold = load_corpus(root / "data/corpus.jsonl")
    (tmp_path / "a.jsonl").write_text(gold_as_predictions(gold))
    rev = list(range(len(gold)))[::-1]
    (tmp_path / "b.jsonl").write_text(gold_as_predictions(gold, rev))
    a = evaluate_files(tmp_path / "a.jsonl", root / "data/corpus.jsonl")
    b = evaluate_files(tmp_path / "b.jsonl", root / "data/corpus.jsonl")
    assert a.bleu == a.rougeL == a.jaccard == a.dept_accuracy == 1.0
    assert a.to_json() == b.to_json()


def test_evaluate_misaligned(run, tmp_path, capsys):
    root, _ = run
    gold = load_corpus(root / "data/corpus.jsonl")
    (tmp_path / "p.jsonl").write_text(gold_as_predictions(gold, range(len(gold) - 1)))
    code = main(["evaluate", "--predictions", str(tmp_path / "p.jsonl"), "--gold", str(root / "data/corpus.jsonl")])
    assert code == EXIT_DATA
    assert gold[-1].id in capsys.readouterr().err


def test_evaluate_macro_f1_fixture(run, tmp_path):
    root, _ = run
    gold = load_corpus(root / "data/corpus.jsonl")[:6]
    gold_labels = list("aaabbc")
    pred_labels = list("aabbcc")
    gold = [type(d)(**{**d.__dict__, "department": g}) for d, g in zip(gold, gold_labels)]
    save_corpus(gold, tmp_path / "g.jsonl")
    (tmp_path / "p.jsonl").write_text("".join(
        json.dumps({"id": d.id, "predicted_department": p, "generated_text": d.summary}) + "\n"
        for d, p in zip(gold, pred_labels)))
    rep = evaluate_files(tmp_path / "p.jsonl", tmp_path / "g.jsonl")
    assert rep.dept_macro_f1 == pytest.approx(59 / 90, abs=1e-12)
    assert rep.dept_accuracy == pytest.approx(4 / 6)


def test_verify_pass_and_mutation(capsys):
    assert main(["verify"]) == EXIT_OK
    assert "all checks passed" in capsys.readouterr().out
    assert main(["verify", "--mutate", "sigmoid"]) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_corpus(self, tmp_path):
        assert main(["distill", "--corpus", str(tmp_path / "nope.jsonl"), "--triples", "x"]) == EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{oops")
        assert main(["distill", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG

    def test_invalid_model_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"model": {"n_heads": 3}}))
        assert main(["verify", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG

    def test_malformed_corpus(self, run, tmp_path):
        root, _ = run
        (tmp_path / "c.jsonl").write_text("{broken\n")
        assert main(["distill", "--corpus", str(tmp_path / "c.jsonl"),
                     "--triples", str(root / "data/triples.tsv")]) == EXIT_DATA

    def test_feature_width_mismatch(self, run, tmp_path):
        root, _ = run
        cfg = write_config(tmp_path, d_v=5)
        (tmp_path / "cfg.json").write_text((tmp_path / "cfg.json").read_text().replace(str(tmp_path), str(root)))
        assert main(["train", "--config", cfg, "--checkpoint-dir", str(tmp_path / "ck")]) == EXIT_DATA

    def test_summarize_without_checkpoint(self, run, tmp_path):
        _, cfg = run
        assert main(["summarize", "--config", cfg, "--checkpoint", str(tmp_path / "none.npz")]) == EXIT_CONFIG

    def test_corrupt_checkpoint(self, run, tmp_path):
        _, cfg = run
        (tmp_path / "bad.npz").write_bytes(b"not a checkpoint")
        assert main(["summarize", "--config", cfg, "--checkpoint", str(tmp_path / "bad.npz")]) == EXIT_DATA
