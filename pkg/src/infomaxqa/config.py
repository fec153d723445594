"""Flat dotted-key run configuration.

Configs live in plain text files of ``key = value`` lines (``#`` comments
allowed) and can be overridden from the command line with ``--set
key=value``.  Unknown keys are rejected; every run logs the fully resolved
configuration.
"""

from __future__ import annotations

from pathlib import Path

from .model import EncoderConfig
from .regularizer import RegularizerWeights


class ConfigError(ValueError):
    """Unknown key, malformed line, or an uncoercible value."""


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.dir": "data",
    "data.train": "train.jsonl",
    "data.eval": "eval.jsonl",
    "data.vocab": "vocab.json",
    "model.d_model": 64,
    "model.heads": 4,
    "model.blocks": 2,
    "model.ffn": 128,
    "model.max_seq_len": 192,
    "model.max_answer_len": 4,
    "optim.lr": 1e-3,
    "optim.batch_size": 16,
    "optim.steps": 1200,
    "optim.weight_decay": 0.0,
    "lc.alpha": 1.0,
    "lc.context_window": 5,
    "gc.beta": 0.5,
    "gc.summarizer": "mean",
    "reg.gamma": 0.3,
    "reg.shared_discriminator": False,
    "log.every": 50,
}

VARIANTS = ("baseline", "lc", "gc", "lc_gc")


def _coerce(key: str, raw: object) -> object:
    default = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
        try:
            if isinstance(default, bool):
                if raw.lower() in ("true", "1", "yes"):
                    return True
                if raw.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(raw)
            return type(default)(raw)
        except ValueError:
            raise ConfigError(f"config: cannot parse {raw!r} as "
                              f"{type(default).__name__} for key {key!r}") from None
    if isinstance(default, bool) != isinstance(raw, bool):
        raise ConfigError(f"config: wrong type for key {key!r}")
    return type(default)(raw)


class RunConfig:
    """Immutable-ish mapping of every hyperparameter for one run."""

    def __init__(self, values: dict[str, object] | None = None):
        self._values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            self[key] = val

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"config: unknown key {key!r}") from None

    def __setitem__(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"config: unknown key {key!r}")
        self._values[key] = _coerce(key, value)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            cfg[key.strip()] = value
        return cfg

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        cfg = RunConfig(dict(self._values))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"config: override {item!r} is not key=value")
            key, _, value = item.partition("=")
            cfg[key.strip()] = value
        return cfg

    def to_text(self) -> str:
        lines = [f"{k} = {self._values[k]}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    # derived structured views -------------------------------------------

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=self["model.d_model"],
            heads=self["model.heads"],
            blocks=self["model.blocks"],
            ffn=self["model.ffn"],
            max_seq_len=self["model.max_seq_len"],
        )

    def regularizer_weights(self, variant: str) -> RegularizerWeights:
        if variant not in VARIANTS:
            raise ConfigError(f"config: unknown variant {variant!r}")
        alpha = self["lc.alpha"] if variant in ("lc", "lc_gc") else 0.0
        beta = self["gc.beta"] if variant in ("gc", "lc_gc") else 0.0
        return RegularizerWeights(alpha=alpha, beta=beta, gamma=self["reg.gamma"],
                                  context_window=self["lc.context_window"])
