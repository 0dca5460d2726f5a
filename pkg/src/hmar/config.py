"""Run configuration files: UTF-8 ``key = value`` lines, ``#`` starts a comment."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

REQUIRED = ("data_dir", "num_behaviors")
VARIANTS = {
    "no-aux": "no_aux_behaviors",
    "no-multitask": "no_multitask",
    "no-hbi": "no_hbi",
    "no-behavior-encoder": "no_behavior_encoder",
}
_MODEL_FIELDS = [f.name for f in fields(ModelConfig) if f.name != "num_items"]


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = ""
    num_behaviors: int = 0
    # model
    target_behavior: int = -1  # -1 takes the manifest's target behavior
    embed_dim: int = 64
    num_heads: int = 2
    max_len: int = 50
    hbi_cap: int = 3
    alpha: tuple = ()
    beta: float = 1.0
    theta: float = 0.5
    negatives_per_positive: int = 1
    dropout_rate: float = 0.0
    num_blocks: int = 1
    behavior_key_exclusion: bool = False
    no_aux_behaviors: bool = False
    no_multitask: bool = False
    no_hbi: bool = False
    no_behavior_encoder: bool = False
    dtype: str = "float32"
    # training
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    validation: bool = True
    eval_every: int = 1
    checkpoint: str = "hmar.ckpt"
    variant: str = ""
    # evaluation
    eval_negatives: int = 99
    eval_k: int = 10
    eval_runs: int = 3
    exclude_history: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            problems.append("adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            problems.append("adam_epsilon must be > 0")
        if self.eval_every < 0:
            problems.append(f"eval_every must be >= 0, got {self.eval_every}")
        if self.eval_negatives < 1 or self.eval_k < 1 or self.eval_runs < 1:
            problems.append("eval_negatives, eval_k and eval_runs must be >= 1")
        if self.variant and self.variant not in VARIANTS:
            problems.append(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not self.checkpoint:
            problems.append("checkpoint path must be non-empty")
        if problems:
            raise ConfigError("; ".join(problems))
        if self.num_behaviors >= 1:
            self.model_config(num_items=1)  # range checks on the model fields

    def model_config(self, num_items, target_behavior=None):
        values = {name: getattr(self, name) for name in _MODEL_FIELDS}
        if target_behavior is not None and self.target_behavior == -1:
            values["target_behavior"] = target_behavior
        if self.variant:
            values[VARIANTS[self.variant]] = True
        return ModelConfig(num_items=num_items, **values)

    def with_variant(self, variant):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        return replace(self, variant=variant)

    @property
    def best_checkpoint(self):
        root, ext = os.path.splitext(self.checkpoint)
        return f"{root}.best{ext or '.ckpt'}"

    def estimator_params(self):
        """Keyword arguments for :class:`hmar.estimator.HMARRecommender`."""
        skip = {"data_dir", "seed", "validation", "checkpoint", "variant", "eval_runs"}
        params = {k: v for k, v in asdict(self).items() if k not in skip}
        if self.variant:
            params[VARIANTS[self.variant]] = True
        params["alpha"] = self.alpha or None
        params["random_state"] = self.seed
        return params


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _convert(key, raw, lineno):
    kind = _TYPES[key]
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}") from None


def parse_config_text(text, base_dir=None, env=None):
    """Parse config text; relative paths resolve against ``base_dir``.

    ``HMAR_SEED`` in ``env`` (default ``os.environ``) overrides ``seed``.
    """
    values, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} on lines {seen[key]} and {lineno}")
        seen[key] = lineno
        values[key] = _convert(key, raw, lineno)
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    env = os.environ if env is None else env
    if env.get("HMAR_SEED"):
        try:
            values["seed"] = int(env["HMAR_SEED"])
        except ValueError:
            raise ConfigError(f"HMAR_SEED must be an integer, got {env['HMAR_SEED']!r}") from None
    if not values["data_dir"]:
        raise ConfigError(f"line {seen['data_dir']}: data_dir must be non-empty")
    if base_dir is not None:
        for key in ("data_dir", "checkpoint"):
            values[key] = str(Path(base_dir) / values.get(key, RunConfig.checkpoint))
    if values["num_behaviors"] < 1:
        raise ConfigError(f"line {seen['num_behaviors']}: num_behaviors must be >= 1")
    return RunConfig(**values)


def parse_config(path, env=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config_text(text, base_dir=Path(path).parent, env=env)


def format_config(config):
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
