"""Vocabulary, JSONL loading, the synthetic fact-merge task, and batching.

A multi-document example is rendered as one concatenated source sequence.
With ``use_sod`` every document (the first one included) is prefixed with the
start-of-document token ``<s>``; with ``pos_restart`` position ids start again
at 0 at each document's first position.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, SOD, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, SOD_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, SOD, EOS, UNK)

#: doc_index value carried by PAD positions
PAD_DOC = -1


class DataError(ValueError):
    """Malformed dataset input or an example that cannot be batched."""


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class RawExample:
    documents: tuple[str, ...]
    summary: str

    def to_json(self) -> dict:
        return {"documents": list(self.documents), "summary": self.summary}


class Vocabulary:
    """Token <-> id bijection with PAD, SOD, EOS, UNK pinned at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text: str | Sequence[str]) -> list[int]:
        toks = tokenize(text) if isinstance(text, str) else text
        return [self.stoi.get(t, UNK_ID) for t in toks]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD_ID, SOD_ID, EOS_ID):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                try:
                    rows.append((int(idx), tok))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: expected 'token<TAB>id'") from None
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise DataError(f"{path}: ids are not contiguous from 0")
        return cls([t for _, t in rows])


def build_vocab(corpus: Iterable[RawExample], min_freq: int = 1) -> Vocabulary:
    """Count whitespace tokens over documents and summaries.

    Ordering is by descending frequency, ties broken lexicographically.
    """
    counts: Counter[str] = Counter()
    seen = False
    for ex in corpus:
        seen = True
        for doc in ex.documents:
            counts.update(tokenize(doc))
        counts.update(tokenize(ex.summary))
    if not seen:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def parse_example(obj, where: str = "") -> RawExample:
    if not isinstance(obj, dict):
        raise DataError(f"{where}expected a JSON object")
    for key in ("documents", "summary"):
        if key not in obj:
            raise DataError(f"{where}missing field '{key}'")
    docs, summary = obj["documents"], obj["summary"]
    if not isinstance(docs, list) or not all(isinstance(d, str) for d in docs):
        raise DataError(f"{where}field 'documents' must be an array of strings")
    if not docs:
        raise DataError(f"{where}field 'documents' is empty")
    if not isinstance(summary, str):
        raise DataError(f"{where}field 'summary' must be a string")
    return RawExample(tuple(docs), summary)


def load_jsonl(path) -> Iterator[RawExample]:
    """Yield examples in file order; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            yield parse_example(obj, f"{path}:{lineno}: ")


def write_jsonl(examples: Iterable[RawExample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


# ----------------------------------------------------------------------------
# synthetic task
# ----------------------------------------------------------------------------


def gen_synthetic(seed: int, count: int, n_docs_range=(2, 4), facts_per_doc_range=(1, 2),
                  n_keys: int = 10, n_values: int = 4) -> Iterator[RawExample]:
    """Seeded fact-merge examples.

    Keys ``k0..k{n_keys-1}`` each take one of ``n_values`` values
    ``v<i>_<j>``. Every document states a disjoint subset of facts as
    ``k<i> = v<i>_<j>`` lines; the summary lists the values of every mentioned
    key in global key order.
    """
    lo_d, hi_d = n_docs_range
    lo_f, hi_f = facts_per_doc_range
    if not (1 <= lo_d <= hi_d) or not (1 <= lo_f <= hi_f):
        raise DataError("document and fact ranges must be non-empty and positive")
    if hi_d * hi_f > n_keys:
        raise DataError(f"need at least {hi_d * hi_f} keys for disjoint facts, have {n_keys}")
    rng = random.Random(seed)
    for _ in range(count):
        n_docs = rng.randint(lo_d, hi_d)
        sizes = [rng.randint(lo_f, hi_f) for _ in range(n_docs)]
        keys = rng.sample(range(n_keys), sum(sizes))
        values = {k: rng.randrange(n_values) for k in keys}
        docs, start = [], 0
        for size in sizes:
            lines = [f"k{k} = v{k}_{values[k]}" for k in keys[start:start + size]]
            docs.append("\n".join(lines))
            start += size
        summary = " ".join(f"v{k}_{values[k]}" for k in sorted(keys))
        yield RawExample(tuple(docs), summary)


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------


@dataclass
class BatchConfig:
    use_sod: bool = True
    pos_restart: bool = True
    src_trunc: int = 4096
    tgt_trunc: int = 1024


@dataclass
class MultiDocBatch:
    """Padded arrays for one batch; all ``[B, K]`` or ``[B, T]``."""

    input_ids: np.ndarray
    doc_index: np.ndarray
    position_ids: np.ndarray
    sod_mask: np.ndarray
    pad_mask: np.ndarray
    decoder_input_ids: np.ndarray
    labels: np.ndarray
    n_docs: np.ndarray = field(default=None)

    @property
    def batch_size(self) -> int:
        return self.input_ids.shape[0]

    def source_only(self) -> "MultiDocBatch":
        """Copy without decoder targets (for generation)."""
        b = self.batch_size
        empty = np.zeros((b, 0), dtype=np.int64)
        return MultiDocBatch(self.input_ids, self.doc_index, self.position_ids, self.sod_mask,
                             self.pad_mask, empty, empty, self.n_docs)

    def select(self, rows) -> "MultiDocBatch":
        rows = np.asarray(rows)
        return MultiDocBatch(*(getattr(self, f)[rows] for f in (
            "input_ids", "doc_index", "position_ids", "sod_mask", "pad_mask",
            "decoder_input_ids", "labels", "n_docs")))


def _doc_budgets(lengths: list[int], budget: int) -> list[int]:
    """Split ``budget`` tokens across documents proportionally, min 1 each."""
    total = sum(lengths)
    if total <= budget:
        return list(lengths)
    alloc = [max(1, (budget * n) // total) for n in lengths]
    # the min-1 floor can overshoot; take tokens back from the largest shares
    while sum(alloc) > budget:
        i = max(range(len(alloc)), key=lambda j: alloc[j])
        alloc[i] -= 1
    return alloc


def render_source(docs: list[list[int]], cfg: BatchConfig):
    """Flatten documents into (ids, doc_index, position_ids, sod_mask)."""
    docs = [d for d in docs if d]
    if not docs:
        raise DataError("example has no non-empty document")
    per_doc_overhead = 1 if cfg.use_sod else 0
    n = len(docs)
    budget = cfg.src_trunc - per_doc_overhead * n
    if budget < n:
        raise DataError(f"src_trunc={cfg.src_trunc} cannot hold {n} documents")
    alloc = _doc_budgets([len(d) for d in docs], budget)
    ids, doc_idx, pos, sod = [], [], [], []
    for i, (d, keep) in enumerate(zip(docs, alloc)):
        toks = ([SOD_ID] if cfg.use_sod else []) + list(d[:keep])
        ids.extend(toks)
        doc_idx.extend([i] * len(toks))
        sod.extend([cfg.use_sod] + [False] * (len(toks) - 1))
        if cfg.pos_restart:
            pos.extend(range(len(toks)))
        else:
            pos.extend(range(len(pos), len(pos) + len(toks)))
    return ids, doc_idx, pos, sod


def make_batch(examples: Sequence[RawExample], vocab: Vocabulary, cfg: BatchConfig) -> MultiDocBatch:
    if not examples:
        raise DataError("cannot batch zero examples")
    rows = []
    for ex in examples:
        docs = [vocab.encode(d) for d in ex.documents]
        if not any(docs):
            raise DataError("every document of the example is empty")
        src = render_source(docs, cfg)
        summary = vocab.encode(ex.summary)[: cfg.tgt_trunc - 1]
        rows.append((src, [SOD_ID] + summary, summary + [EOS_ID], len(set(src[1]))))
    b = len(rows)
    k = max(len(r[0][0]) for r in rows)
    t = max(len(r[1]) for r in rows)
    input_ids = np.full((b, k), PAD_ID, dtype=np.int64)
    doc_index = np.full((b, k), PAD_DOC, dtype=np.int64)
    position_ids = np.zeros((b, k), dtype=np.int64)
    sod_mask = np.zeros((b, k), dtype=bool)
    pad_mask = np.ones((b, k), dtype=bool)
    dec_in = np.full((b, t), PAD_ID, dtype=np.int64)
    labels = np.full((b, t), PAD_ID, dtype=np.int64)
    n_docs = np.zeros(b, dtype=np.int64)
    for i, ((ids, di, pos, sod), din, lab, nd) in enumerate(rows):
        n = len(ids)
        input_ids[i, :n] = ids
        doc_index[i, :n] = di
        position_ids[i, :n] = pos
        sod_mask[i, :n] = sod
        pad_mask[i, :n] = False
        dec_in[i, :len(din)] = din
        labels[i, :len(lab)] = lab
        n_docs[i] = nd
    return MultiDocBatch(input_ids, doc_index, position_ids, sod_mask, pad_mask, dec_in, labels, n_docs)
