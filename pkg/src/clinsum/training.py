"""Data preparation, Adam training with gradient accumulation, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import Dialogue, EncodedDialogue, Vocabulary, build_vocab, department_labels, encode_dialogue, tokenize
from .knowledge import DkdConfig, KnowledgeEmbedder, TripleStore, distill, encode_knowledge, linearize_triples
from .metrics import rouge_l
from .model import ModelConfig, SummarizerModel, combine_losses, joint_loss
from .visual import VisualFeatureStore, pool_dialogue_visuals

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EvidenceBuilder:
    """Turns a dialogue into its (E_v, E_kn) evidence rows."""

    triples: TripleStore
    features: VisualFeatureStore
    embedder: KnowledgeEmbedder
    dkd: DkdConfig = field(default_factory=DkdConfig)

    def evidence(self, d: Dialogue) -> tuple[np.ndarray, np.ndarray]:
        ctx = distill(d.context(), self.triples, self.dkd)
        E_kn = encode_knowledge(linearize_triples(ctx), self.embedder)
        E_v = pool_dialogue_visuals(d.image_ids, self.features)
        return E_v, E_kn


@dataclass
class Example:
    id: str
    enc: EncodedDialogue
    E_v: np.ndarray
    E_kn: np.ndarray
    reference: str


def prepare(corpus: Sequence[Dialogue], model: SummarizerModel, evidence: EvidenceBuilder,
            labels: bool = True) -> list[Example]:
    """Encode dialogues and attach evidence; ``labels=False`` skips department lookup."""
    c = model.config
    out = []
    for d in corpus:
        enc = encode_dialogue(d, model.vocab, c.max_src_len, c.target_field,
                              model.departments if labels else None,
                              max_tgt_len=c.max_tgt_len + 1)
        E_v, E_kn = evidence.evidence(d)
        out.append(Example(d.id, enc, E_v, E_kn, getattr(d, c.target_field)))
    return out


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def example_loss(model: SummarizerModel, ex: Example):
    dec_logits, dept_logits = model.forward(ex.enc.src, ex.enc.tgt, ex.E_v, ex.E_kn)
    L, CL, GL = joint_loss(dec_logits, ex.enc.tgt[1:], dept_logits, ex.enc.dept, model.config)
    return L, CL, GL, dept_logits


def evaluate_loss(model: SummarizerModel, examples: Sequence[Example]) -> dict:
    """Mean CL/GL (and their combination) plus department accuracy, without recording."""
    cls, gls, hits = [], [], 0
    with T.no_grad():
        for ex in examples:
            _, CL, GL, dl = example_loss(model, ex)
            cls.append(CL.item())
            gls.append(GL.item())
            hits += int(np.argmax(dl.values[0]) == ex.enc.dept)
    cl, gl = float(np.mean(cls)), float(np.mean(gls))
    return {"L": combine_losses(cl, gl, model.config), "CL": cl, "GL": gl,
            "dept_accuracy": hits / len(examples)}


@dataclass
class TrainResult:
    model: SummarizerModel
    log: list[dict]
    initial: dict
    steps: list[dict] = field(default_factory=list)


def train_examples(
    model: SummarizerModel,
    examples: Sequence[Example],
    epochs: int | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[int, SummarizerModel, dict], None] | None = None,
    embedder: KnowledgeEmbedder | None = None,
) -> TrainResult:
    """Adam over shuffled mini-batches; each batch accumulates per-dialogue tapes.

    The per-epoch record holds mean CL, GL and the combined L, the training
    department accuracy seen during the epoch, and anything ``on_epoch`` adds.
    """
    if not examples:
        raise TrainingError("cannot train on an empty corpus")
    c = model.config
    epochs = c.epochs if epochs is None else epochs
    rng = np.random.default_rng(c.seed)
    opt = Adam(model.parameters(), c.learning_rate)
    initial = evaluate_loss(model, examples)
    history, steps = [], []
    if log_path is not None:
        Path(log_path).write_text("")
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(examples))
        cls, gls, hits = [], [], 0
        for start in range(0, len(order), c.batch_size):
            batch = order[start:start + c.batch_size]
            opt.zero_grad()
            for idx in batch:
                ex = examples[idx]
                with T.Tape() as tape:
                    L, CL, GL, dl = example_loss(model, ex)
                    scaled = T.scale(L, 1.0 / len(batch))
                T.backward(scaled, tape)
                cls.append(CL.item())
                gls.append(GL.item())
                hits += int(np.argmax(dl.values[0]) == ex.enc.dept)
                steps.append({"epoch": epoch, "id": ex.id, "L": L.item(), "CL": CL.item(), "GL": GL.item()})
            opt.step()
        cl, gl = float(np.mean(cls)), float(np.mean(gls))
        rec = {"epoch": epoch, "L": combine_losses(cl, gl, c), "CL": cl, "GL": gl,
               "dept_accuracy": hits / len(examples)}
        if on_epoch is not None:
            on_epoch(epoch, model, rec)
        history.append(rec)
        log.info("epoch %d L=%.6f CL=%.6f GL=%.6f acc=%.3f", epoch, rec["L"], cl, gl, rec["dept_accuracy"])
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:03d}.npz", model, embedder)
    return TrainResult(model, history, initial, steps)


def build_model(corpus: Sequence[Dialogue], config: ModelConfig, min_count: int = 1) -> SummarizerModel:
    """Vocabulary and department labels from ``corpus``; sizes are written into the config."""
    if not corpus:
        raise TrainingError("cannot train on an empty corpus")
    vocab = build_vocab(corpus, min_count)
    depts = department_labels(corpus)
    if len(depts) > config.n_departments:
        raise TrainingError(f"corpus has {len(depts)} departments, config allows {config.n_departments}")
    # pad the label set so the head width stays n_departments
    depts = depts + [f"<unused{i}>" for i in range(config.n_departments - len(depts))]
    return SummarizerModel(config.replace(vocab_size=len(vocab)), vocab, depts)


def train(
    corpus: Sequence[Dialogue],
    evidence: EvidenceBuilder,
    config: ModelConfig,
    **kwargs,
) -> TrainResult:
    model = build_model(corpus, config)
    return train_examples(model, prepare(corpus, model, evidence), embedder=evidence.embedder, **kwargs)


def summarize(model: SummarizerModel, ex: Example, strategy: str = "greedy", beam_size: int = 1) -> str:
    ids = model.generate(ex.enc.src, ex.E_v, ex.E_kn, strategy=strategy, beam_size=beam_size)
    return " ".join(model.vocab.decode(ids))


def predict_department(model: SummarizerModel, ex: Example) -> str:
    with T.no_grad():
        logits = model.classify_department(model.encode(ex.enc.src, ex.E_v, ex.E_kn)).values[0].copy()
    # padding labels are never predicted
    for i, name in enumerate(model.departments):
        if name.startswith("<unused"):
            logits[i] = -np.inf
    return model.departments[int(np.argmax(logits))]


def rouge_l_on(model: SummarizerModel, examples: Sequence[Example]) -> float:
    scores = [rouge_l(tokenize(summarize(model, ex)), tokenize(ex.reference))["f1"] for ex in examples]
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: SummarizerModel, embedder: KnowledgeEmbedder | None = None) -> None:
    meta = {
        "config": model.config.to_dict(),
        "vocab": model.vocab.itos if model.vocab is not None else None,
        "departments": model.departments,
        "param_names": list(model.params),
        "embedder": None if embedder is None else {"seed": embedder.seed, "d_kn": embedder.d_kn,
                                                   "tokens": list(embedder.index)},
    }
    arrays = {f"p{i}": t.values for i, t in enumerate(model.params.values())}
    if embedder is not None:
        arrays["embedder_table"] = embedder.table
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> tuple[SummarizerModel, KnowledgeEmbedder | None]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    vocab = Vocabulary(meta["vocab"][4:]) if meta["vocab"] is not None else None
    model = SummarizerModel(ModelConfig.from_dict(meta["config"]), vocab, meta["departments"])
    if list(model.params) != meta["param_names"]:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    for i, t in enumerate(model.params.values()):
        arr = arrays[f"p{i}"]
        if arr.shape != t.values.shape:
            raise CheckpointError(f"{path}: {t.name} has shape {arr.shape}, expected {t.values.shape}")
        t.values[...] = arr
    embedder = None
    if meta["embedder"] is not None:
        e = meta["embedder"]
        embedder = KnowledgeEmbedder.__new__(KnowledgeEmbedder)
        embedder.d_kn, embedder.seed = e["d_kn"], e["seed"]
        embedder.index = {t: i for i, t in enumerate(e["tokens"])}
        embedder.table = arrays["embedder_table"]
    return model, embedder
