"""Greedy autoregressive generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import AttentionTrace
from .data import EOS_ID, PAD_ID, SOD_ID, MultiDocBatch
from .model import ForwardTrace, HierSumModel
from .tensor import no_grad


@dataclass
class GenerationConfig:
    max_length: int = 32
    min_length: int = 1
    stop_token: int = EOS_ID

    def validate(self, tgt_trunc: int | None = None) -> "GenerationConfig":
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if tgt_trunc is not None and self.max_length > tgt_trunc:
            raise ValueError(f"max_length {self.max_length} exceeds tgt_trunc {tgt_trunc}")
        return self


@dataclass
class GenerationOutput:
    sequences: list[list[int]]
    traces: list[AttentionTrace] | None = None
    cross_records: list | None = None


def greedy_generate(model: HierSumModel, batch: MultiDocBatch, gen: GenerationConfig,
                    trace: bool = False) -> GenerationOutput:
    """Decode every batch row greedily from SOD.

    PAD and SOD are never emitted; EOS is masked out until ``min_length``
    tokens have been produced. Argmax ties go to the lowest token id. The
    emitted EOS, if any, is kept as the last token.

    With ``trace`` each row gets an :class:`AttentionTrace` holding encoder
    self-attention and, per generated token, the cross-attention of every
    layer and head; ``cross_records`` keeps the document-scaled intermediates
    of every step when hierarchical decoding is on.
    """
    gen.validate(model.config.tgt_trunc)
    b = batch.batch_size
    prefix = np.full((b, 1), SOD_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    seqs: list[list[int]] = [[] for _ in range(b)]
    enc_trace = ForwardTrace.empty() if trace else None
    cross_steps: list[np.ndarray] = []
    records: list = []
    with no_grad():
        enc = model.encode(batch, enc_trace)
        for step in range(gen.max_length):
            ft = ForwardTrace.empty() if trace else None
            logits = model.decode_step(prefix, enc, batch, ft).data.copy()
            logits[:, PAD_ID] = -np.inf
            logits[:, SOD_ID] = -np.inf
            if step + 1 < gen.min_length:
                logits[:, gen.stop_token] = -np.inf
            nxt = logits.argmax(axis=-1)
            if trace:
                # [L, B, H, K] at the newest position
                cross_steps.append(np.stack([w[:, :, -1, :] for w in ft.decoder_cross]))
                records.append(ft.cross_records)
            for i in range(b):
                if not done[i]:
                    seqs[i].append(int(nxt[i]))
                    done[i] = nxt[i] == gen.stop_token
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)

    if not trace:
        return GenerationOutput(seqs)
    enc_self = np.stack(enc_trace.encoder_self, axis=1)   # [B, L, H, K, K]
    cross = np.stack(cross_steps, axis=2)                  # [L, B, T, H, K]
    traces = []
    for i in range(b):
        keep = ~batch.pad_mask[i]
        t_i = len(seqs[i])
        traces.append(AttentionTrace(
            encoder_self=enc_self[i][..., keep, :][..., keep],
            decoder_cross=cross[:, i, :t_i].transpose(1, 0, 2, 3)[..., keep],
            doc_index=batch.doc_index[i, keep],
            sod_mask=batch.sod_mask[i, keep],
            pad_mask=batch.pad_mask[i, keep],
        ))
    return GenerationOutput(seqs, traces, records)
