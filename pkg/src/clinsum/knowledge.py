"""Discourse-aware knowledge distillation.

Keywords are pulled from a conversation with a small statistical scorer, each
keyword fetches a bounded number of triples from a local triple store, and the
resulting subgraph is pooled into a single evidence vector.
"""

from __future__ import annotations

import json
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import tokenize

# fixed list, 100 entries
STOPWORDS = frozenset("""
a about after again all am an and any are as at be because been before being
both but by can could did do does down each few for from had has have he her
here him his how i if in into is it its just me more most my no not now of on
only or other our out over same she should so some such than that the their them
then there these they this those through to too under up very was we were what
when where which while who why will with would you your
""".split())


class TripleStoreError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeTriple:
    head: str
    relation: str
    tail: str
    weight: float = 1.0

    def __post_init__(self):
        if not self.head or not self.tail:
            raise TripleStoreError("triple head and tail must be nonempty")
        if not self.weight >= 0:
            raise TripleStoreError(f"triple weight must be >= 0, got {self.weight}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.head.lower(), self.relation, self.tail)

    def tokens(self) -> list[str]:
        return [self.head, self.relation, self.tail]


def _canonical(t: KnowledgeTriple):
    return (-t.weight, t.relation, t.tail)


class TripleStore:
    """Case-insensitive head -> triples lookup, each list in canonical order."""

    def __init__(self, triples: Iterable[KnowledgeTriple] = ()):
        entries: dict[str, list[KnowledgeTriple]] = defaultdict(list)
        for t in triples:
            entries[t.head.lower()].append(t)
        self.entries = {h: sorted(ts, key=_canonical) for h, ts in entries.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def lookup(self, entity: str) -> list[KnowledgeTriple]:
        return list(self.entries.get(entity.lower(), ()))

    def __iter__(self):
        for head in sorted(self.entries):
            yield from self.entries[head]

    @classmethod
    def load(cls, path: str | Path) -> "TripleStore":
        triples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise TripleStoreError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
                head, rel, tail, w = parts
                try:
                    triples.append(KnowledgeTriple(head, rel, tail, float(w)))
                except ValueError as exc:
                    raise TripleStoreError(f"{path}:{lineno}: {exc}") from None
        return cls(triples)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self:
                fh.write(f"{t.head}\t{t.relation}\t{t.tail}\t{t.weight!r}\n")


@dataclass(frozen=True)
class DkdConfig:
    n_k: int = 7
    n_r: int = 5

    def __post_init__(self):
        if self.n_k < 1 or self.n_r < 1:
            raise ValueError("n_k and n_r must be >= 1")


@dataclass
class DistilledContext:
    keywords: list[str] = field(default_factory=list)
    triples: list[KnowledgeTriple] = field(default_factory=list)

    def to_record(self, dialogue_id: str | None = None) -> dict:
        rec = {
            "keywords": list(self.keywords),
            "triples": [[t.head, t.relation, t.tail, t.weight] for t in self.triples],
        }
        if dialogue_id is not None:
            rec = {"id": dialogue_id, **rec}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "DistilledContext":
        return cls(list(rec["keywords"]), [KnowledgeTriple(*t) for t in rec["triples"]])

    def dumps(self, dialogue_id: str | None = None) -> str:
        return json.dumps(self.to_record(dialogue_id), sort_keys=True, ensure_ascii=False)


def _is_candidate(tok: str) -> bool:
    return tok not in STOPWORDS and any(ch.isalnum() for ch in tok)


def extract_keywords(context: Sequence[str], n_k: int = 7) -> list[str]:
    """Top ``n_k`` single-token keywords, best first.

    score = tf * (1 + 1 / (1 + first_position)), where first_position is the
    index of the token's first occurrence among candidate tokens. Ties go to
    the lexicographically smaller token.
    """
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    tf: dict[str, int] = defaultdict(int)
    first: dict[str, int] = {}
    pos = 0
    for utt in context:
        for tok in tokenize(utt):
            if not _is_candidate(tok):
                continue
            tf[tok] += 1
            first.setdefault(tok, pos)
            pos += 1
    scored = sorted(tf, key=lambda t: (-tf[t] * (1.0 + 1.0 / (1.0 + first[t])), t))
    return scored[:n_k]


def retrieve_concepts(keywords: Sequence[str], store: TripleStore, n_r: int = 5) -> DistilledContext:
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    seen: set[tuple[str, str, str]] = set()
    out: list[KnowledgeTriple] = []
    for kw in keywords:
        taken = 0
        for t in store.lookup(kw):
            if taken == n_r:
                break
            if t.key in seen:
                continue
            seen.add(t.key)
            out.append(t)
            taken += 1
    return DistilledContext(list(keywords), out)


def distill(context: Sequence[str], store: TripleStore, config: DkdConfig = DkdConfig()) -> DistilledContext:
    return retrieve_concepts(extract_keywords(context, config.n_k), store, config.n_r)


def linearize_triples(ctx: DistilledContext) -> list[str]:
    return [tok for t in ctx.triples for tok in t.tokens()]


class KnowledgeEmbedder:
    """Fixed token-embedding table of width ``d_kn`` for knowledge tokens.

    Rows are drawn per token from a generator seeded by ``(seed, crc32(token))``
    so a token's vector does not depend on which other tokens are present.
    Row 0 is the unknown-token vector.
    """

    UNK = "<unk>"

    def __init__(self, tokens: Iterable[str], d_kn: int, seed: int = 0):
        self.d_kn = d_kn
        self.seed = seed
        vocab = [self.UNK] + sorted(set(tokens) - {self.UNK})
        self.index = {t: i for i, t in enumerate(vocab)}
        self.table = np.stack([self._row(t) for t in vocab]) if vocab else np.zeros((0, d_kn))

    def _row(self, token: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, zlib.crc32(token.encode("utf-8"))])
        return rng.normal(0.0, 1.0, self.d_kn)

    @classmethod
    def from_store(cls, store: TripleStore, d_kn: int, seed: int = 0) -> "KnowledgeEmbedder":
        return cls((tok for t in store for tok in t.tokens()), d_kn, seed)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]


def encode_knowledge(tokens: Sequence[str], embedder: KnowledgeEmbedder) -> np.ndarray:
    """Mean token embedding as a 1 x d_kn array; zeros for no tokens."""
    if not tokens:
        return np.zeros((1, embedder.d_kn))
    return embedder.table[embedder.ids(tokens)].mean(axis=0, keepdims=True)
