"""Experiment configuration files and the ablation grid.

Config files are flat ``key=value`` text; ``#`` starts a comment. Keys are
the field names of :class:`ModelConfig`, :class:`TrainConfig`,
:class:`GenerationConfig` (``max_length``, ``min_length``) plus the data keys
of :class:`DataSpec` and ``out_dir``. Unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import DataError, RawExample, build_vocab, gen_synthetic, load_jsonl
from .decoding import GenerationConfig
from .model import ConfigError, ModelConfig, _coerce
from .training import TrainConfig

#: rows of the ablation table: (use_sod, hier_enc, hier_dec, pos_restart)
ABLATION_ROWS: dict[int, tuple[bool, bool, bool, bool]] = {
    0: (True, True, True, True),
    1: (True, True, True, False),
    2: (True, True, False, True),
    3: (True, True, False, False),
    4: (True, False, False, False),
    5: (False, False, False, False),
}
FLAG_NAMES = ("use_sod", "hier_enc", "hier_dec", "pos_restart")


@dataclass
class DataSpec:
    """Where examples come from: JSONL paths, or the synthetic generator."""

    train_data: str = ""
    eval_data: str = ""
    gen_seed: int = 1
    gen_count: int = 4000
    eval_seed: int = 2
    eval_count: int = 100
    n_docs_min: int = 2
    n_docs_max: int = 4
    facts_min: int = 1
    facts_max: int = 2
    n_keys: int = 10
    n_values: int = 4

    def _generate(self, seed: int, count: int) -> list[RawExample]:
        return list(gen_synthetic(seed, count, (self.n_docs_min, self.n_docs_max),
                                  (self.facts_min, self.facts_max), self.n_keys, self.n_values))

    def load(self) -> tuple[list[RawExample], list[RawExample]]:
        train = list(load_jsonl(self.train_data)) if self.train_data else \
            self._generate(self.gen_seed, self.gen_count)
        heldout = list(load_jsonl(self.eval_data)) if self.eval_data else \
            self._generate(self.eval_seed, self.eval_count)
        if not train:
            raise DataError("training set is empty")
        return train, heldout


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenerationConfig = field(default_factory=GenerationConfig)
    out_dir: str = ""

    def validate(self) -> "ExperimentSpec":
        self.model.validate()
        self.train.validate()
        try:
            self.gen.validate(self.model.tgt_trunc)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        lines = []
        for title, obj in (("data", self.data), ("model", self.model),
                           ("train", self.train), ("generation", self.gen)):
            lines.append(f"# {title}")
            for k, v in asdict(obj).items():
                if title == "generation" and k == "stop_token":
                    continue
                lines.append(f"{k}={v}")
        lines.append(f"out_dir={self.out_dir}")
        return "\n".join(lines) + "\n"

    def prepare(self):
        """Load data and size the vocabulary; returns ``(spec, vocab, train, heldout)``."""
        train, heldout = self.data.load()
        vocab = build_vocab(train + heldout)
        spec = replace(self, model=replace(self.model, vocab_size=len(vocab)))
        return spec.validate(), vocab, train, heldout


_SECTIONS = (("data", DataSpec), ("model", ModelConfig), ("train", TrainConfig),
             ("gen", GenerationConfig))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def spec_from_values(values: dict[str, str], base: ExperimentSpec | None = None) -> ExperimentSpec:
    base = base or ExperimentSpec()
    known = {"out_dir"}
    parts = {}
    for attr, cls in _SECTIONS:
        names = {f.name: f for f in fields(cls)}
        known |= set(names)
        update = {}
        for k, v in values.items():
            if k in names:
                try:
                    update[k] = _coerce(v, names[k].type)
                except ValueError:
                    raise ConfigError(f"bad value for {k}: {v!r}") from None
        parts[attr] = replace(getattr(base, attr), **update)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentSpec(out_dir=values.get("out_dir", base.out_dir), **parts).validate()


def load_spec(path, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config_text(text, str(path))
    values.update(overrides or {})
    return spec_from_values(values)


def ablation_spec(base: ExperimentSpec, row: int | tuple[bool, bool, bool, bool]) -> ExperimentSpec:
    """Copy of ``base`` with the four component flags of an ablation row."""
    flags = ABLATION_ROWS[row] if isinstance(row, int) else tuple(row)
    model = replace(base.model, **dict(zip(FLAG_NAMES, flags)))
    model.validate()
    return replace(base, model=model)


def ablation_grid(base: ExperimentSpec) -> dict[int, ExperimentSpec]:
    return {row: ablation_spec(base, row) for row in ABLATION_ROWS}
