"""Plain-text ``key = value`` experiment configs.

One flat namespace covers every subcommand; each reads the keys it needs.
Unknown keys are rejected, ``#`` starts a comment, and every run writes the
fully resolved config next to its outputs so it can be replayed exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # reproducibility
    seed: int = 0  # master seed for subsampling and training
    task_seed: int = 0  # synthetic task layout (categories, phrases)
    data_seed: int = 1  # downstream example pool
    dtype: str = "float64"  # "float32" trades tolerance for ~2.5x speed
    workers: int = 1  # process pool size for grid subcommands
    # model shape (vocab is fixed by the task)
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    # pretraining of the frozen LM
    pretrain_examples: int = 20000
    pretrain_epochs: int = 8
    pretrain_batch: int = 32
    pretrain_lr: float = 2e-3
    pretrain_warmup: int = 200
    pretrain_loss: str = "target"  # "target" (tokens after [sep]) or "all" (every next token)
    # tuning
    strategy: str = "prefix"  # finetune | finetune_top2 | adapter | prefix | infix | embedding
    prefix_len: int = 10
    reparam: bool = True
    reparam_width: int = 64
    bottleneck: int = 0  # 0 = match the prefix's trainable count
    epochs: int = 10
    batch_size: int = 5
    learning_rate: float = 5e-5
    strategy_lr: str = ""  # per-strategy overrides for grids, e.g. "prefix=1e-3,finetune=1e-4"
    warmup_steps: int = 0
    patience: int = 0  # early-stopping patience in epochs, 0 = off
    weight_decay: float = 0.01
    grad_clip: float = 0.0
    max_steps: int = 0
    dev_metric: str = "loss"  # "loss" (negated dev NLL) or "bleu" (greedy dev BLEU)
    # data sizes
    train_size: int = 500
    test_size: int = 200
    # decoding
    beam_size: int = 5
    length_norm: float = 0.0
    max_decode_len: int = 48
    # grids
    lengths: str = "1,5,10,20,40"
    sizes: str = "50,100,200,500"
    n_subsets: int = 5
    n_seeds: int = 2
    strategies: str = "prefix,finetune"
    init_train_size: int = 100

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.pretrain_loss not in ("target", "all"):
            raise ConfigError("pretrain_loss must be target or all")
        if self.dev_metric not in ("loss", "bleu"):
            raise ConfigError("dev_metric must be loss or bleu")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def with_updates(self, **kw) -> "ExperimentConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **{k: _coerce(self._types()[k], v, k) for k, v in kw.items()})

    @classmethod
    def _types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    def dumps(self) -> str:
        lines = ["# resolved experiment config"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, base: "ExperimentConfig" = None) -> "ExperimentConfig":
        base = base or cls()
        updates: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in cls._types():
                raise ConfigError(f"line {lineno}: unknown key {k!r}")
            updates[k] = v
        return base.with_updates(**updates)

    @classmethod
    def load(cls, path, base: "ExperimentConfig" = None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), base)

    def int_list(self, key: str) -> list[int]:
        return [int(x) for x in str(getattr(self, key)).split(",") if x.strip()]

    def str_list(self, key: str) -> list[str]:
        return [x.strip() for x in str(getattr(self, key)).split(",") if x.strip()]

    def lr_for(self, strategy: str) -> float:
        """``learning_rate`` unless ``strategy_lr`` names this strategy."""
        for item in self.str_list("strategy_lr"):
            name, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"strategy_lr: expected name=value, got {item!r}")
            if name.strip() == strategy:
                try:
                    return float(value)
                except ValueError:
                    raise ConfigError(f"strategy_lr: bad learning rate {value!r}") from None
        return self.learning_rate


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind: type, v, key: str):
    if not isinstance(v, str):
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            return float(v)
        if isinstance(v, kind):
            return v
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}")
    try:
        if kind is bool:
            low = v.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(v)
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {v!r} as {kind.__name__}") from None
