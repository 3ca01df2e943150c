"""Adam optimization, checkpointing and the training loop.

Checkpoints use the container in :mod:`hiersum.container` with tensors named
``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>`` and metadata
sections ``model``, ``train`` and ``meta``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .container import ContainerError, read_container, write_container
from .data import BatchConfig, RawExample, Vocabulary, make_batch
from .model import ConfigError, HierSumModel, ModelConfig, _coerce
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or mismatched checkpoint."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 0
    eval_examples: int = 100
    checkpoint_path: str = ""

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("learning_rate >= 0, batch_size >= 1 and max_steps >= 0 are required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{f.name: _coerce(d[f.name], f.type) for f in fields(cls) if f.name in d})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` disables clipping.
    """
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params[*].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for '{name}'")
    state.step += 1
    t = state.step
    lr = cfg.learning_rate
    if cfg.warmup_steps > 0:
        lr *= min(1.0, t / cfg.warmup_steps)
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if lr:
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return state


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], opt_state: OptimizerState | None,
                    model_config: ModelConfig, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters, Adam moments and configs as one container file.

    Raises :class:`~hiersum.container.ContainerWriteError` (an ``OSError``)
    naming ``path`` when the file cannot be written.
    """
    tensors = [(f"param/{k}", p.data) for k, p in params.items()]
    meta = {"step": 0}
    if opt_state is not None:
        meta["step"] = opt_state.step
        tensors += [(f"adam_m/{k}", v) for k, v in opt_state.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in opt_state.v.items()]
    meta.update(extra or {})
    sections = {"model": model_config.to_dict(), "meta": meta}
    if train_config is not None:
        # output location is not part of the experiment record
        sections["train"] = {k: v for k, v in asdict(train_config).items() if k != "checkpoint_path"}
    write_container(path, sections, tensors)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    params: dict[str, np.ndarray]
    opt_state: OptimizerState
    meta: dict[str, str]


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect_config`` must equal the embedded model config."""
    try:
        sections, tensors = read_container(path)
    except ContainerError as exc:
        raise CheckpointError(str(exc)) from exc
    if "model" not in sections:
        raise CheckpointError(f"{path}: no model configuration block")
    model_config = ModelConfig.from_dict(sections["model"])
    if expect_config is not None and model_config != expect_config:
        diff = [f.name for f in fields(ModelConfig)
                if getattr(model_config, f.name) != getattr(expect_config, f.name)]
        raise CheckpointError(f"{path}: model config mismatch in {', '.join(diff)}")
    train_config = TrainConfig.from_dict(sections["train"]) if "train" in sections else None
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        groups[kind][key] = arr
    meta = sections.get("meta", {})
    state = OptimizerState(groups["adam_m"], groups["adam_v"], int(meta.get("step", 0)))
    return Checkpoint(model_config, train_config, groups["param"], state, meta)


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> HierSumModel:
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return HierSumModel(ckpt.model_config, params, seed=seed)


# ----------------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------------


def batch_config_for(cfg: ModelConfig) -> BatchConfig:
    return BatchConfig(use_sod=cfg.use_sod, pos_restart=cfg.pos_restart,
                       src_trunc=cfg.src_trunc, tgt_trunc=cfg.tgt_trunc)


def batch_indices(n_examples: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Example indices for ``step``: a fresh permutation per epoch, drop-last."""
    per_epoch = max(1, n_examples // batch_size)
    epoch, offset = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n_examples)
    if n_examples < batch_size:
        return order
    return order[offset * batch_size:(offset + 1) * batch_size]


@dataclass
class TrainResult:
    losses: list[float]
    evals: list[dict]
    opt_state: OptimizerState


def evaluate(model: HierSumModel, examples: Sequence[RawExample], vocab: Vocabulary,
             with_rouge: bool = True, batch_size: int = 50) -> dict:
    """Teacher-forced loss and token accuracy, plus greedy-decode ROUGE / exact match."""
    from .decoding import GenerationConfig, greedy_generate
    from .rouge import corpus_rouge

    bcfg = batch_config_for(model.config)
    tot_loss = tot_correct = tot_tokens = 0.0
    hyps, refs = [], []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, vocab, bcfg)
        n_tok = int((batch.labels != 0).sum())
        with no_grad():
            tot_loss += model.forward_train(batch).item() * n_tok
        tot_correct += model.token_accuracy(batch) * n_tok
        tot_tokens += n_tok
        if with_rouge:
            gen = GenerationConfig(max_length=model.config.tgt_trunc, min_length=1)
            out = greedy_generate(model, batch, gen)
            hyps += [vocab.decode(seq) for seq in out.sequences]
            refs += [ex.summary for ex in chunk]
    result = {"loss": tot_loss / tot_tokens, "token_accuracy": tot_correct / tot_tokens}
    if with_rouge:
        scores = corpus_rouge(hyps, refs)
        result.update({k: scores[k] for k in ("rouge1", "rouge2", "rougeL")})
        result["exact_match"] = float(np.mean([h.split() == r.split() for h, r in zip(hyps, refs)]))
    return result


def train_loop(model: HierSumModel, train: Sequence[RawExample], vocab: Vocabulary,
               cfg: TrainConfig, heldout: Sequence[RawExample] = (),
               opt_state: OptimizerState | None = None, metrics_path=None,
               on_step=None) -> TrainResult:
    """Teacher-forced training for ``cfg.max_steps`` total steps.

    Resuming passes the loaded ``opt_state``; its ``step`` selects the next
    batch and dropout stream, so a resumed run replays the uninterrupted one.
    """
    cfg.validate()
    if not train:
        raise ValueError("training set is empty")
    state = opt_state or OptimizerState()
    bcfg = batch_config_for(model.config)
    losses, evals = [], []
    if cfg.clip_norm > 0:
        log.info("gradient clipping at global norm %.3g", cfg.clip_norm)
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < cfg.max_steps:
            step = state.step
            idx = batch_indices(len(train), cfg.batch_size, cfg.seed, step)
            batch = make_batch([train[i] for i in idx], vocab, bcfg)
            model.training = True
            model._rng = np.random.default_rng([cfg.seed, step, 7])
            model.zero_grad()
            loss = model.forward_train(batch)
            loss.backward()
            model.training = False
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in model.params.items()}
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, cfg)
            losses.append(loss.item())
            row = {"step": step, "loss": loss.item()}
            done = state.step
            if cfg.eval_every and heldout and (done % cfg.eval_every == 0 or done == cfg.max_steps):
                ev = evaluate(model, list(heldout)[: cfg.eval_examples], vocab)
                ev["step"] = done
                evals.append(ev)
                row.update({k: ev[k] for k in ("rouge1", "rouge2", "rougeL")})
                if cfg.checkpoint_path:
                    save_checkpoint(cfg.checkpoint_path, model.params, state, model.config, cfg)
            if metrics:
                metrics.write(json.dumps(row) + "\n")
            if on_step is not None:
                on_step(step, loss.item())
    finally:
        if metrics:
            metrics.close()
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model.params, state, model.config, cfg)
    return TrainResult(losses, evals, state)
