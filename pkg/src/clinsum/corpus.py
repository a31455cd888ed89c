"""Clinical dialogues: data model, tokenizer, vocabulary, splits and JSONL I/O."""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SPEAKER_TAGS = {"patient": "<patient>", "doctor": "<doctor>"}
TARGET_FIELDS = ("summary", "mcs", "doctor_impression")

_PUNCT = set(string.punctuation)


class CorpusError(ValueError):
    """Malformed corpus record or invalid corpus operation."""


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.speaker not in SPEAKER_TAGS:
            raise CorpusError(f"unknown speaker {self.speaker!r}")
        if not self.text and not self.image_ids:
            raise CorpusError("utterance text may be empty only when images are attached")
        object.__setattr__(self, "image_ids", tuple(self.image_ids))


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    department: str
    summary: str
    mcs: str
    doctor_impression: str
    disease: str | None = None
    # intent/symptom tags ride along untouched
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise CorpusError(f"dialogue {self.id!r} has no utterances")
        for name in TARGET_FIELDS:
            if not getattr(self, name):
                raise CorpusError(f"dialogue {self.id!r}: empty {name}")

    @property
    def image_ids(self) -> list[str]:
        return [i for u in self.utterances for i in u.image_ids]

    def context(self) -> list[str]:
        return [u.text for u in self.utterances]

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "utterances": [
                {"speaker": u.speaker, "text": u.text, "image_ids": list(u.image_ids)}
                for u in self.utterances
            ],
            "department": self.department,
            "disease": self.disease,
            "summary": self.summary,
            "mcs": self.mcs,
            "doctor_impression": self.doctor_impression,
        }
        if self.metadata:
            rec["metadata"] = self.metadata
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Dialogue":
        try:
            utts = [Utterance(u["speaker"], u.get("text", ""), tuple(u.get("image_ids", ())))
                    for u in rec["utterances"]]
            return cls(
                id=str(rec["id"]),
                utterances=tuple(utts),
                department=rec["department"],
                summary=rec["summary"],
                mcs=rec["mcs"],
                doctor_impression=rec["doctor_impression"],
                disease=rec.get("disease"),
                metadata=rec.get("metadata", {}),
            )
        except KeyError as exc:
            raise CorpusError(f"missing field {exc.args[0]!r}") from None


def load_corpus(path: str | Path) -> list[Dialogue]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Dialogue.from_record(json.loads(line)))
            except (json.JSONDecodeError, CorpusError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return out


def save_corpus(corpus: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(json.dumps(d.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel leading/trailing punctuation.

    >>> tokenize("Skin rash!")
    ['skin', 'rash', '!']
    """
    tokens: list[str] = []
    for word in text.lower().split():
        i, j = 0, len(word)
        while i < j and word[i] in _PUNCT:
            i += 1
        while j > i and word[j - 1] in _PUNCT:
            j -= 1
        tokens.extend(word[:i])
        if i < j:
            tokens.append(word[i:j])
        tokens.extend(word[j:])
    return tokens


class Vocabulary:
    """Token/id bijection with ids 0..3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out


def _dialogue_tokens(d: Dialogue) -> list[str]:
    toks = [SPEAKER_TAGS[u.speaker] for u in d.utterances]
    for u in d.utterances:
        toks.extend(tokenize(u.text))
    for name in TARGET_FIELDS:
        toks.extend(tokenize(getattr(d, name)))
    return toks


def build_vocab(corpus: Sequence[Dialogue], min_count: int = 1) -> Vocabulary:
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for d in corpus for t in _dialogue_tokens(d))
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class EncodedDialogue:
    src: list[int]
    tgt: list[int]
    dept: int
    image_ids: list[str]


def encode_dialogue(
    d: Dialogue,
    vocab: Vocabulary,
    max_src_len: int,
    target_field: str = "summary",
    departments: Sequence[str] | None = None,
    max_tgt_len: int | None = None,
) -> EncodedDialogue:
    """Speaker-tagged source ids (prefix-truncated) and BOS/EOS-framed target ids."""
    if target_field not in TARGET_FIELDS:
        raise CorpusError(f"target_field must be one of {TARGET_FIELDS}")
    if departments is None:
        dept = -1
    else:
        try:
            dept = list(departments).index(d.department)
        except ValueError:
            raise CorpusError(f"dialogue {d.id!r}: unknown department {d.department!r}") from None
    src: list[int] = []
    for u in d.utterances:
        src.append(vocab.id(SPEAKER_TAGS[u.speaker]))
        src.extend(vocab.ids(tokenize(u.text)))
    src = src[:max_src_len]
    tgt = [BOS] + vocab.ids(tokenize(getattr(d, target_field))) + [EOS]
    if max_tgt_len is not None:
        tgt = tgt[:max_tgt_len]
    return EncodedDialogue(src, tgt, dept, d.image_ids)


def department_labels(corpus: Iterable[Dialogue]) -> list[str]:
    return sorted({d.department for d in corpus})


def split_corpus(
    corpus: Sequence[Dialogue],
    fractions: tuple[float, float, float] = (0.8, 0.05, 0.15),
    seed: int = 0,
) -> tuple[list[Dialogue], list[Dialogue], list[Dialogue]]:
    """Seeded shuffle followed by contiguous train/val/test slicing."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    items = [corpus[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]
