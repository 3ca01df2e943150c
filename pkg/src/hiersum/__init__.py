"""Hierarchical encoding and decoding for multi-document summarization.

A small numpy encoder-decoder transformer where encoder tokens attend only
within their own document (start-of-document tokens also see each other) and
decoder cross-attention is normalized per document and rescaled by the
start-of-document scores.
"""

from .data import (EOS_ID, PAD_ID, SOD_ID, UNK_ID, BatchConfig, MultiDocBatch, RawExample,
                   Vocabulary, build_vocab, gen_synthetic, load_jsonl, make_batch)
from .masks import causal_mask, full_mask, hierarchical_mask
from .model import HierSumModel, ModelConfig, doc_scaled_softmax, init_params, parameter_count
from .tensor import Tensor, no_grad

__all__ = [
    "EOS_ID", "PAD_ID", "SOD_ID", "UNK_ID", "BatchConfig", "MultiDocBatch", "RawExample",
    "Vocabulary", "build_vocab", "gen_synthetic", "load_jsonl", "make_batch", "causal_mask",
    "full_mask", "hierarchical_mask", "HierSumModel", "ModelConfig", "doc_scaled_softmax",
    "init_params", "parameter_count", "Tensor", "no_grad",
]
__version__ = "0.1.0"
