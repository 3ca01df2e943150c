"""ROUGE-1/2/L precision, recall and F1.

Text is lowercased and split on whitespace; no stemming. ROUGE-L is the
sentence-level variant over the whole token sequence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, n_hyp: int, n_ref: int) -> "RougeScore":
        p = overlap / n_hyp if n_hyp else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def normalize(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return text.lower().split()
    return [t.lower() for t in text]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp, ref, n: int = 1) -> RougeScore:
    if n < 1:
        raise ValueError("n must be >= 1")
    h, r = ngrams(normalize(hyp), n), ngrams(normalize(ref), n)
    overlap = sum((h & r).values())
    return RougeScore.from_counts(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length by dynamic programming (two rows)."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref) -> RougeScore:
    h, r = normalize(hyp), normalize(ref)
    return RougeScore.from_counts(lcs_length(h, r), len(h), len(r))


def score_pair(hyp, ref) -> dict[str, RougeScore]:
    return {"rouge1": rouge_n(hyp, ref, 1), "rouge2": rouge_n(hyp, ref, 2), "rougeL": rouge_l(hyp, ref)}


def corpus_rouge(hyps: Sequence[str], refs: Sequence[str]) -> dict[str, float]:
    """Mean P/R/F1 per variant; the bare variant key holds mean F1."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("no pairs to score")
    totals: dict[str, float] = {}
    for h, r in zip(hyps, refs):
        for name, s in score_pair(h, r).items():
            for part, val in (("precision", s.precision), ("recall", s.recall), ("f1", s.f1)):
                key = f"{name}_{part}"
                totals[key] = totals.get(key, 0.0) + val
    out = {k: v / len(hyps) for k, v in totals.items()}
    for name in ("rouge1", "rouge2", "rougeL"):
        out[name] = out[f"{name}_f1"]
    return out
