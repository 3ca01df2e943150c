"""Attention analysis: encoder self-document mass and decoder CDS.

Self-document mass is the share of a source token's encoder self-attention
that lands on its own document, averaged over layers and heads and then over
non-SOD tokens.

CDS (cross-document standard deviation) for one generated token: average its
cross-attention over layers and heads, sum it per document, softmax the
per-document sums, and take the population standard deviation. An example's
CDS is the mean over its generated tokens. Low CDS means the token spreads
attention across documents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .container import read_container, write_container


class UndefinedMetricError(ValueError):
    """CDS needs at least two documents."""


class TraceError(ValueError):
    pass


@dataclass
class AttentionTrace:
    """Attention weights of one example, PAD positions already dropped.

    ``encoder_self``: ``[L, H, K, K]``; ``decoder_cross``: ``[T, L, H, K]``
    (one row per generated token); ``doc_index`` / ``sod_mask`` /
    ``pad_mask``: ``[K]``.
    """

    encoder_self: np.ndarray | None
    decoder_cross: np.ndarray | None
    doc_index: np.ndarray
    sod_mask: np.ndarray
    pad_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return len(np.unique(self.doc_index[~self.pad_mask]))

    def max_row_sum_error(self) -> float:
        errs = [0.0]
        for w in (self.encoder_self, self.decoder_cross):
            if w is not None and w.size:
                errs.append(float(np.abs(w.sum(axis=-1) - 1.0).max()))
        return max(errs)

    def save(self, path) -> None:
        tensors = [("doc_index", self.doc_index), ("sod_mask", self.sod_mask),
                   ("pad_mask", self.pad_mask)]
        if self.encoder_self is not None:
            tensors.append(("encoder_self", self.encoder_self))
        if self.decoder_cross is not None:
            tensors.append(("decoder_cross", self.decoder_cross))
        write_container(path, {"trace": dict(self.meta)}, tensors)

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        sections, t = read_container(path)
        return cls(
            encoder_self=t.get("encoder_self"),
            decoder_cross=t.get("decoder_cross"),
            doc_index=t["doc_index"].astype(np.int64),
            sod_mask=t["sod_mask"].astype(bool),
            pad_mask=t["pad_mask"].astype(bool),
            meta=sections.get("trace", {}),
        )


def save_traces(traces: Sequence[AttentionTrace], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tr in enumerate(traces):
        p = directory / f"trace_{i:05d}.bin"
        tr.save(p)
        paths.append(p)
    return paths


def load_traces(directory) -> list[AttentionTrace]:
    paths = sorted(Path(directory).glob("trace_*.bin"))
    if not paths:
        raise TraceError(f"no trace files in {directory}")
    return [AttentionTrace.load(p) for p in paths]


# ----------------------------------------------------------------------------
# encoder: self-document mass
# ----------------------------------------------------------------------------


@dataclass
class SelfDocReport:
    per_example: list[float]
    corpus: float


def token_self_doc_mass(trace: AttentionTrace) -> np.ndarray:
    """Per non-SOD, non-PAD source token: own-document share of attention.

    Each row is divided by its own total, so rows that only touch their own
    document give exactly 1.0.
    """
    if trace.encoder_self is None:
        raise TraceError("trace has no encoder self-attention weights")
    w = trace.encoder_self.mean(axis=(0, 1))          # [K, K]
    same = trace.doc_index[:, None] == trace.doc_index[None, :]
    own = np.where(same, w, 0.0).sum(axis=-1)
    mass = own / w.sum(axis=-1)
    keep = ~trace.sod_mask & ~trace.pad_mask
    return mass[keep]


def self_doc_mass(traces: AttentionTrace | Iterable[AttentionTrace]) -> SelfDocReport:
    if isinstance(traces, AttentionTrace):
        traces = [traces]
    per_example = [float(token_self_doc_mass(t).mean()) for t in traces]
    if not per_example:
        raise TraceError("no traces given")
    return SelfDocReport(per_example, float(np.mean(per_example)))


# ----------------------------------------------------------------------------
# decoder: CDS
# ----------------------------------------------------------------------------


@dataclass
class CdsReport:
    per_token: list[list[float] | None]
    per_example: list[float | None]
    corpus: float | None
    undefined: list[int]


def doc_aggregates(weights: np.ndarray, doc_index: np.ndarray) -> np.ndarray:
    """Sum head/layer-averaged weights ``[T, L, H, K]`` per document -> ``[T, N]``."""
    avg = weights.mean(axis=(1, 2))                   # [T, K]
    docs = np.unique(doc_index)
    onehot = (doc_index[:, None] == docs[None, :]).astype(np.float64)
    return avg @ onehot


def cds_from_aggregates(agg: np.ndarray) -> np.ndarray:
    """Population std of softmax(agg) along the last axis."""
    z = agg - agg.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.std(axis=-1)


def token_cds(trace: AttentionTrace) -> np.ndarray:
    if trace.decoder_cross is None:
        raise TraceError("trace has no decoder cross-attention weights")
    keep = ~trace.pad_mask
    if len(np.unique(trace.doc_index[keep])) < 2:
        raise UndefinedMetricError("CDS is undefined for a single document")
    agg = doc_aggregates(trace.decoder_cross[..., keep], trace.doc_index[keep])
    return cds_from_aggregates(agg)


def cds(traces: AttentionTrace | Iterable[AttentionTrace]) -> CdsReport:
    """CDS per token, per example and over the corpus.

    A single trace with one document raises; in a collection such examples
    are reported as ``None`` and listed in ``undefined``.
    """
    if isinstance(traces, AttentionTrace):
        per_tok = token_cds(traces)
        return CdsReport([per_tok.tolist()], [float(per_tok.mean())], float(per_tok.mean()), [])
    per_token, per_example, undefined = [], [], []
    for i, tr in enumerate(traces):
        try:
            vals = token_cds(tr)
        except UndefinedMetricError:
            per_token.append(None)
            per_example.append(None)
            undefined.append(i)
            continue
        per_token.append(vals.tolist())
        per_example.append(float(vals.mean()) if vals.size else None)
    defined = [v for v in per_example if v is not None]
    return CdsReport(per_token, per_example, float(np.mean(defined)) if defined else None, undefined)


def compare(report, baseline) -> float:
    """Ratio of corpus values (method / baseline), e.g. relative CDS."""
    a, b = report.corpus, baseline.corpus
    if a is None or b is None or b == 0:
        raise UndefinedMetricError("cannot form a ratio with an undefined or zero baseline")
    return a / b


def write_report(path, self_doc: SelfDocReport | None, cds_report: CdsReport | None,
                 ratios: dict | None = None) -> None:
    """JSONL: one line per example, then a ``corpus`` summary line."""
    n = max(len(self_doc.per_example) if self_doc else 0,
            len(cds_report.per_example) if cds_report else 0)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            row = {"example": i}
            if self_doc:
                row["self_doc_mass"] = self_doc.per_example[i]
            if cds_report:
                row["cds"] = cds_report.per_example[i]
            fh.write(json.dumps(row) + "\n")
        summary = {"corpus": True}
        if self_doc:
            summary["self_doc_mass"] = self_doc.corpus
        if cds_report:
            summary["cds"] = cds_report.corpus
            summary["cds_undefined"] = cds_report.undefined
        if ratios:
            summary.update(ratios)
        fh.write(json.dumps(summary) + "\n")
