"""Encoder-decoder transformer with hierarchical encoding and decoding.

The encoder runs post-LN self-attention under either the full mask or the
hierarchical mask (:func:`hiersum.masks.hierarchical_mask`). The decoder keeps
ordinary causal self-attention; its cross-attention is either a plain softmax
over all source positions or the document-scaled variant computed by
:func:`doc_scaled_softmax`:

    p[n, k] = softmax over the tokens k of document n of a[n, k]
    s[n]    = softmax over documents of a[n, 0]   (score of document n's SOD)
    w[n, k] = s[n] * p[n, k]

Output logits use the token embedding matrix (tied weights).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import masks
from .data import PAD_ID, SOD_ID, MultiDocBatch
from .tensor import (Tensor, cross_entropy, dropout, embedding, layer_norm, masked_softmax,
                     matmul)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    vocab_size: int = 64
    max_positions: int = 64
    src_trunc: int = 128
    tgt_trunc: int = 32
    use_sod: bool = True
    hier_enc: bool = True
    hier_dec: bool = True
    pos_restart: bool = True
    dropout: float = 0.0

    def validate(self) -> "ModelConfig":
        for f in ("d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers", "vocab_size",
                  "max_positions", "src_trunc", "tgt_trunc"):
            if int(getattr(self, f)) < 1:
                raise ConfigError(f"{f} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.hier_enc or self.hier_dec) and not self.use_sod:
            raise ConfigError("hier_enc and hier_dec require use_sod")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                kwargs[f.name] = _coerce(d[f.name], f.type)
        return cls(**kwargs)


def _coerce(value, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"not a boolean: {value!r}")
        return bool(value)
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form for the number of scalars created by :func:`init_params`.

    ``V*d + 2*P*d + 4*d + Le*(attn + ffn + 4*d) + Ld*(2*attn + ffn + 6*d)``
    with ``attn = 4*d*d + 4*d`` and ``ffn = 2*d*d_ff + d_ff + d``.
    """
    d, f = cfg.d_model, cfg.d_ff
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    return (cfg.vocab_size * d + 2 * cfg.max_positions * d + 4 * d
            + cfg.n_enc_layers * (attn + ffn + 4 * d)
            + cfg.n_dec_layers * (2 * attn + ffn + 6 * d))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic initialization.

    Projections are N(0, 1/fan_in) so pre-softmax scores have roughly unit
    variance; embeddings are N(0, 0.02^2) so the tied output starts near
    uniform; layer norms start at gain 1, bias 0.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    params: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out):
        params[f"{name}.w"] = rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        params[f"{name}.g"] = np.ones(d)
        params[f"{name}.b"] = np.zeros(d)

    def attention(name):
        for proj in ("q", "k", "v", "o"):
            linear(f"{name}.{proj}", d, d)

    params["tok_emb"] = rng.normal(0.0, 0.02, (cfg.vocab_size, d))
    params["enc_pos"] = rng.normal(0.0, 0.02, (cfg.max_positions, d))
    params["dec_pos"] = rng.normal(0.0, 0.02, (cfg.max_positions, d))
    norm("enc_emb_ln")
    norm("dec_emb_ln")
    for i in range(cfg.n_enc_layers):
        attention(f"enc.{i}.self")
        norm(f"enc.{i}.ln1")
        linear(f"enc.{i}.ff1", d, f)
        linear(f"enc.{i}.ff2", f, d)
        norm(f"enc.{i}.ln2")
    for i in range(cfg.n_dec_layers):
        attention(f"dec.{i}.self")
        norm(f"dec.{i}.ln1")
        attention(f"dec.{i}.cross")
        norm(f"dec.{i}.ln2")
        linear(f"dec.{i}.ff1", d, f)
        linear(f"dec.{i}.ff2", f, d)
        norm(f"dec.{i}.ln3")
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


# ----------------------------------------------------------------------------
# document-scaled cross-attention
# ----------------------------------------------------------------------------


@dataclass
class DocScaledCrossAttention:
    """Intermediate quantities of one document-scaled cross-attention call.

    Shapes: ``raw_scores``, ``per_doc_weights``, ``normalized_weights`` are
    ``[B, H, T, K]``; ``doc_scaling`` is ``[B, H, T, N]``; ``doc_present`` is
    ``[B, N]``. PAD positions hold 0 weight.
    """

    raw_scores: np.ndarray
    per_doc_weights: np.ndarray
    doc_scaling: np.ndarray
    normalized_weights: np.ndarray
    doc_index: np.ndarray
    doc_present: np.ndarray


def doc_layout(doc_index: np.ndarray, sod_mask: np.ndarray, pad_mask: np.ndarray):
    """Membership ``[B,K,N]``, SOD selector ``[B,K,N]`` and presence ``[B,N]``.

    Raises if some present document does not start with a SOD position.
    """
    doc_index = np.asarray(doc_index)
    pad = np.asarray(pad_mask, dtype=bool)
    n = int(doc_index.max()) + 1
    member = (doc_index[..., None] == np.arange(n)) & ~pad[..., None]
    present = member.any(axis=-2)
    first = np.argmax(member, axis=-2)  # [B, N]
    sod_sel = np.zeros(member.shape, dtype=bool)
    b_idx, n_idx = np.nonzero(present)
    sod_sel[b_idx, first[b_idx, n_idx], n_idx] = True
    if not np.asarray(sod_mask, dtype=bool)[b_idx, first[b_idx, n_idx]].all():
        raise ConfigError("document-scaled attention needs a SOD token at every document start")
    return member, sod_sel, present


def doc_scaled_softmax(scores: Tensor, doc_index, sod_mask, pad_mask,
                       record: list | None = None) -> Tensor:
    """Per-document softmax rescaled by a softmax over SOD scores.

    ``scores`` is ``[B, H, T, K]``; layout arrays are ``[B, K]``. When
    ``record`` is a list, a :class:`DocScaledCrossAttention` is appended.
    """
    member_b, sod_b, present = doc_layout(doc_index, sod_mask, pad_mask)
    member = member_b.astype(np.float64)[:, None]          # [B,1,K,N]
    member_t = np.swapaxes(member, -1, -2)                  # [B,1,N,K]
    sod_sel = sod_b.astype(np.float64)[:, None]
    valid = member_b.any(axis=-1)[:, None, None, :]         # non-PAD keys [B,1,1,K]
    present4 = present[:, None, None, :]                    # [B,1,1,N]

    a = scores.data
    seg_max = np.where(member_b[:, None, None], a[..., None], -np.inf).max(axis=-2)
    seg_max = np.where(present4, seg_max, 0.0)              # [B,H,T,N]
    e = np.where(valid, np.exp(np.where(valid, a - seg_max @ member_t, 0.0)), 0.0)
    z = e @ member                                          # [B,H,T,N]
    z_k = np.where(present4, z, 1.0) @ member_t
    p = np.where(valid, e / np.where(valid, z_k, 1.0), 0.0)

    sod_scores = a @ sod_sel                                # [B,H,T,N]
    s_max = np.where(present4, sod_scores, -np.inf).max(axis=-1, keepdims=True)
    s_e = np.where(present4, np.exp(np.where(present4, sod_scores - s_max, 0.0)), 0.0)
    s = s_e / s_e.sum(axis=-1, keepdims=True)
    w = p * (s @ member_t)

    if record is not None:
        record.append(DocScaledCrossAttention(a.copy(), p, s, w, np.asarray(doc_index), present))

    def backward(g):
        gp = g * (s @ member_t)
        seg_dot = (p * gp) @ member                         # [B,H,T,N]
        ga = p * (gp - seg_dot @ member_t)
        gs = (g * p) @ member
        ga_sod = s * (gs - (s * gs).sum(axis=-1, keepdims=True))
        ga = ga + ga_sod @ np.swapaxes(sod_sel, -1, -2)
        return (ga,)

    return Tensor._make(w, (scores,), backward)


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Attention weights captured during a forward pass.

    ``encoder_self[l]`` is ``[B, H, K, K]``; ``decoder_cross[l]`` is
    ``[B, H, T, K]``; ``cross_records[l]`` holds the document-scaled
    intermediates when hierarchical decoding is on.
    """

    encoder_self: list
    decoder_cross: list
    cross_records: list

    @classmethod
    def empty(cls) -> "ForwardTrace":
        return cls([], [], [])


class HierSumModel:
    """Parameters plus forward passes; stateless apart from the dropout RNG."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config.validate()
        self.params = init_params(config, seed) if params is None else params
        self.training = False
        self._rng = np.random.default_rng(seed + 1)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- building blocks ----------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout, self._rng, self.training)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h = self.config.n_heads
        return x.reshape(b, t, h, self.config.d_head).transpose(0, 2, 1, 3)

    def _attention(self, xq: Tensor, xkv: Tensor, name: str, allow: np.ndarray,
                   doc_layout_arrays=None, store: list | None = None,
                   record: list | None = None) -> Tensor:
        q = self._split_heads(self._linear(xq, f"{name}.q"))
        k = self._split_heads(self._linear(xkv, f"{name}.k"))
        v = self._split_heads(self._linear(xkv, f"{name}.v"))
        scores = matmul(q, k.T) * (1.0 / math.sqrt(self.config.d_head))
        if doc_layout_arrays is not None:
            weights = doc_scaled_softmax(scores, *doc_layout_arrays, record=record)
        else:
            weights = masked_softmax(scores, allow)
        if store is not None:
            store.append(weights.data)
        ctx = matmul(weights, v)
        b, _, t, _ = ctx.shape
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, self.config.d_model)
        return self._linear(ctx, f"{name}.o")

    def _positions(self, ids: np.ndarray, limit: int) -> np.ndarray:
        """Map position ids into the table, repeating it when it is too short."""
        table = self.config.max_positions
        extended = table * math.ceil(limit / table)
        if ids.size and int(ids.max()) >= extended:
            raise ConfigError(f"position id {int(ids.max())} exceeds the {extended} available positions")
        return ids % table

    def check_batch(self, batch: MultiDocBatch) -> None:
        has_sod = (batch.input_ids == SOD_ID) & ~batch.pad_mask
        if self.config.use_sod:
            if not (batch.sod_mask.any(axis=-1)).all():
                raise ConfigError("use_sod is on but a batch row has no SOD token")
        elif has_sod.any() or batch.sod_mask.any():
            raise ConfigError("use_sod is off but the batch contains SOD tokens")
        if batch.input_ids.shape[1] > self.config.src_trunc:
            raise ConfigError(f"source length {batch.input_ids.shape[1]} exceeds src_trunc")

    # -- public passes ------------------------------------------------------

    def encode(self, batch: MultiDocBatch, trace: ForwardTrace | None = None) -> Tensor:
        cfg = self.config
        self.check_batch(batch)
        pos = self._positions(batch.position_ids, cfg.src_trunc)
        x = embedding(self.params["tok_emb"], batch.input_ids) + embedding(self.params["enc_pos"], pos)
        x = self._drop(self._norm(x, "enc_emb_ln"))
        allow = masks.encoder_mask(batch.doc_index, batch.sod_mask, batch.pad_mask, cfg.hier_enc)
        allow = allow[:, None]
        store = trace.encoder_self if trace is not None else None
        for i in range(cfg.n_enc_layers):
            h = self._attention(x, x, f"enc.{i}.self", allow, store=store)
            x = self._norm(x + self._drop(h), f"enc.{i}.ln1")
            h = self._linear(self._linear(x, f"enc.{i}.ff1").gelu(), f"enc.{i}.ff2")
            x = self._norm(x + self._drop(h), f"enc.{i}.ln2")
        return x

    def decode(self, decoder_ids: np.ndarray, enc: Tensor, batch: MultiDocBatch,
               trace: ForwardTrace | None = None) -> Tensor:
        """Logits ``[B, T, V]`` for every decoder position (teacher forcing)."""
        cfg = self.config
        decoder_ids = np.asarray(decoder_ids, dtype=np.int64)
        t = decoder_ids.shape[1]
        pos = self._positions(np.arange(t)[None, :].repeat(len(decoder_ids), 0), cfg.tgt_trunc)
        y = embedding(self.params["tok_emb"], decoder_ids) + embedding(self.params["dec_pos"], pos)
        y = self._drop(self._norm(y, "dec_emb_ln"))
        self_allow = masks.causal_mask(t)
        cross_allow = (~batch.pad_mask)[:, None, None, :]
        layout = (batch.doc_index, batch.sod_mask, batch.pad_mask) if cfg.hier_dec else None
        store = trace.decoder_cross if trace is not None else None
        record = trace.cross_records if trace is not None and cfg.hier_dec else None
        for i in range(cfg.n_dec_layers):
            h = self._attention(y, y, f"dec.{i}.self", self_allow)
            y = self._norm(y + self._drop(h), f"dec.{i}.ln1")
            h = self._attention(y, enc, f"dec.{i}.cross", cross_allow, layout, store, record)
            y = self._norm(y + self._drop(h), f"dec.{i}.ln2")
            h = self._linear(self._linear(y, f"dec.{i}.ff1").gelu(), f"dec.{i}.ff2")
            y = self._norm(y + self._drop(h), f"dec.{i}.ln3")
        return matmul(y, self.params["tok_emb"].T)

    def decode_step(self, prev_tokens: np.ndarray, enc: Tensor, batch: MultiDocBatch,
                    trace: ForwardTrace | None = None) -> Tensor:
        """Next-token logits ``[B, V]`` given the decoded prefix (starting with SOD)."""
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        if prev_tokens.ndim != 2 or prev_tokens.shape[1] == 0:
            raise ValueError("prev_tokens must be a non-empty [B, t] array")
        logits = self.decode(prev_tokens, enc, batch, trace)
        return logits[:, -1, :]

    def forward_train(self, batch: MultiDocBatch) -> Tensor:
        enc = self.encode(batch)
        logits = self.decode(batch.decoder_input_ids, enc, batch)
        return cross_entropy(logits, batch.labels, ignore_id=PAD_ID)

    def token_accuracy(self, batch: MultiDocBatch) -> float:
        """Teacher-forced argmax accuracy over non-PAD label positions."""
        from .tensor import no_grad
        with no_grad():
            logits = self.decode(batch.decoder_input_ids, self.encode(batch), batch).data
        keep = batch.labels != PAD_ID
        return float((logits.argmax(-1) == batch.labels)[keep].mean())
