"""Boolean attention-permission matrices (``True`` = query may attend key).

All builders accept single rows (``[K]``) or batches (``[B, K]``) and return
``[K, K]`` or ``[B, K, K]`` respectively.
"""

from __future__ import annotations

import numpy as np


class MaskError(ValueError):
    pass


def full_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Every query sees every non-PAD key."""
    pad = np.asarray(pad_mask, dtype=bool)
    k = pad.shape[-1]
    return np.broadcast_to(~pad[..., None, :], pad.shape[:-1] + (k, k)).copy()


def _check_sod_layout(doc_index: np.ndarray, sod_mask: np.ndarray, pad: np.ndarray) -> None:
    prev = np.concatenate([np.full(doc_index.shape[:-1] + (1,), -2), doc_index[..., :-1]], axis=-1)
    first = (doc_index != prev) & ~pad
    if (sod_mask & pad).any():
        raise MaskError("sod_mask marks a PAD position")
    if (sod_mask & ~first).any():
        raise MaskError("sod_mask marks a position that does not start a document")


def hierarchical_mask(doc_index: np.ndarray, sod_mask: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Intra-document attention plus SOD <-> SOD links across documents.

    A non-SOD query sees the non-PAD keys of its own document (its own SOD
    included). A SOD query additionally sees the SOD of every other document.
    """
    doc = np.asarray(doc_index)
    sod = np.asarray(sod_mask, dtype=bool)
    pad = np.asarray(pad_mask, dtype=bool)
    _check_sod_layout(doc, sod, pad)
    same_doc = doc[..., :, None] == doc[..., None, :]
    sod_pair = sod[..., :, None] & sod[..., None, :]
    return (same_doc | sod_pair) & ~pad[..., None, :]


def causal_mask(t: int) -> np.ndarray:
    if t < 1:
        raise MaskError("causal mask needs T >= 1")
    return np.tril(np.ones((t, t), dtype=bool))


def encoder_mask(doc_index, sod_mask, pad_mask, hierarchical: bool) -> np.ndarray:
    """Mask used by the encoder, with PAD query rows opened to all real keys.

    PAD queries never feed a real position, but their softmax rows must not be
    empty.
    """
    pad = np.asarray(pad_mask, dtype=bool)
    allow = hierarchical_mask(doc_index, sod_mask, pad) if hierarchical else full_mask(pad)
    return allow | (pad[..., :, None] & ~pad[..., None, :])
