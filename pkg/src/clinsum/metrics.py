"""Automatic summary metrics: BLEU, ROUGE-1/2/L, an exact-match METEOR and Jaccard.

All functions take pre-tokenized sequences (lists of strings).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

BLEU_FLOOR = 1e-9

Tokens = Sequence[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> dict:
    """Corpus BLEU with single references.

    Returns the clipped precisions ``b1..b{max_n}`` and the composite ``bleu``
    (brevity penalty times the geometric mean of the floored precisions).
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            total[n - 1] += sum(cc.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - r_len / c_len))
    log_mean = sum(math.log(max(p, BLEU_FLOOR)) for p in precisions) / max_n
    out = {f"b{n}": p for n, p in enumerate(precisions, 1)}
    out["bp"] = bp
    out["bleu"] = bp * math.exp(log_mean)
    return out


def _prf(overlap: int, n_cand: int, n_ref: int) -> dict:
    if n_cand == 0 or n_ref == 0:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    p, r = overlap / n_cand, overlap / n_ref
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def rouge_n(candidate: Tokens, reference: Tokens, n: int = 1) -> dict:
    if n < 1:
        raise ValueError("n must be >= 1")
    cc, rc = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum(min(c, rc[g]) for g, c in cc.items())
    return _prf(overlap, sum(cc.values()), sum(rc.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens) -> dict:
    return _prf(lcs_length(candidate, reference), len(candidate), len(reference))


def meteor_lite(candidate: Tokens, reference: Tokens) -> float:
    """METEOR with exact-match alignment only (no stemming or synonyms).

    Each candidate token, left to right, takes the leftmost unused equal
    reference token. F_mean = 10PR / (R + 9P), penalty = 0.5 (chunks/m)^3.
    """
    used = [False] * len(reference)
    alignment: list[int] = []
    for tok in candidate:
        for j, rtok in enumerate(reference):
            if not used[j] and rtok == tok:
                used[j] = True
                alignment.append(j)
                break
        else:
            alignment.append(-1)
    pairs = [j for j in alignment if j >= 0]
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 0
    prev = None
    for j in alignment:
        if j >= 0 and (prev is None or j != prev + 1):
            chunks += 1
        prev = j if j >= 0 else None
    p, r = m / len(candidate), m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def jaccard(candidate: Tokens, reference: Tokens) -> float:
    a, b = set(candidate), set(reference)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class EvalReport:
    b1: float
    b2: float
    b3: float
    b4: float
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    jaccard: float
    n_samples: int
    dept_accuracy: float | None = None
    dept_macro_f1: float | None = None

    COLUMNS = ("b1", "b2", "b3", "b4", "bleu", "rouge1", "rouge2", "rougeL", "meteor", "jaccard")
    HEADERS = ("B-1", "B-2", "B-3", "B-4", "BLEU", "R-1", "R-2", "R-L", "METEOR", "Jaccard")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self) -> str:
        """Scores x100 in the usual column order, as a two-line text table."""
        heads = list(self.HEADERS)
        vals = [f"{100 * getattr(self, c):.2f}" for c in self.COLUMNS]
        if self.dept_accuracy is not None:
            heads += ["Dept-Acc", "Dept-F1"]
            vals += [f"{100 * self.dept_accuracy:.2f}", f"{100 * (self.dept_macro_f1 or 0.0):.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        fmt = lambda row: " | ".join(x.rjust(w) for x, w in zip(row, widths))
        return fmt(heads) + "\n" + fmt(vals)


def macro_f1(predicted: Sequence[str], gold: Sequence[str]) -> float:
    """Unweighted mean of per-class F1 over every label seen in either list."""
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold label lists differ in length")
    labels = sorted(set(predicted) | set(gold))
    if not labels:
        return 0.0
    scores = []
    for lab in labels:
        tp = sum(p == lab and g == lab for p, g in zip(predicted, gold))
        fp = sum(p == lab and g != lab for p, g in zip(predicted, gold))
        fn = sum(p != lab and g == lab for p, g in zip(predicted, gold))
        scores.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return sum(scores) / len(scores)


def evaluate(candidates: Sequence[Tokens], references: Sequence[Tokens],
             predicted_depts: Sequence[str] | None = None,
             gold_depts: Sequence[str] | None = None) -> EvalReport:
    """Corpus BLEU plus per-sample averages of the other metrics."""
    n = len(candidates)
    if n == 0:
        raise ValueError("nothing to evaluate")
    b = bleu(candidates, references)
    pairs = list(zip(candidates, references))
    mean = lambda xs: sum(xs) / n
    report = EvalReport(
        b1=b["b1"], b2=b["b2"], b3=b["b3"], b4=b["b4"], bleu=b["bleu"],
        rouge1=mean([rouge_n(c, r, 1)["f1"] for c, r in pairs]),
        rouge2=mean([rouge_n(c, r, 2)["f1"] for c, r in pairs]),
        rougeL=mean([rouge_l(c, r)["f1"] for c, r in pairs]),
        meteor=mean([meteor_lite(c, r) for c, r in pairs]),
        jaccard=mean([jaccard(c, r) for c, r in pairs]),
        n_samples=n,
    )
    if predicted_depts is not None and gold_depts is not None:
        report.dept_accuracy = sum(p == g for p, g in zip(predicted_depts, gold_depts)) / len(gold_depts)
        report.dept_macro_f1 = macro_f1(predicted_depts, gold_depts)
    return report
