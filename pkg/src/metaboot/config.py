"""Run configuration: validated hyperparameters, text format, CLI overrides.

The on-disk format is plain ``key=value`` lines ('#' starts a comment). The
``lambda`` key maps to the ``lam`` attribute. Every field has a validated
default chosen so the default training run finishes in minutes on one CPU
core.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .augment import LEVELS
from .errors import ValidationError

MODES = ("scratch", "metric-only", "metassl", "bmssl")

# dataclass field name -> config file key
_KEY_OF_FIELD = {"lam": "lambda"}
_FIELD_OF_KEY = {v: k for k, v in _KEY_OF_FIELD.items()}


@dataclass
class RunConfig:
    mode: str = "bmssl"
    N: int = 16            # sources per batch
    K: int = 4             # episodes per batch
    M: int = 6             # views per source
    M1: int = 3            # support views per source (M - M1 go to query)
    L: int = 5             # inner steps
    delta: int = 5         # extra bootstrap steps
    target_objective: str = "query"  # views the delta bootstrap steps descend on
    alpha: float = 0.05    # inner learning rate
    beta: float = 0.05     # outer learning rate
    lam: float = 1.0       # contrastive weight (config key "lambda")
    tau: float = 0.5       # contrastive temperature
    level: str = "A3"      # augmentation level
    meta_steps: int = 1000
    hidden_dim: int = 64
    proj_dim: int = 16
    data_classes: int = 8
    data_per_class: int = 40
    data_seed: int = 7     # also seeds the class split
    split_fraction: float = 0.5
    eval_way: int = 4
    eval_shot: int = 1
    eval_query: int = 15
    eval_episodes: int = 200
    eval_inner_steps: int = 1
    eval_interval: int = 0  # 0: evaluate only after the final meta step
    seed: int = 1
    timing: bool = False    # write wallclock_seconds cells (non-reproducible)
    data_path: str = ""
    out_dir: str = ""

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.K < 1 or self.N < 1 or self.N % self.K != 0:
            raise ValidationError(f"N={self.N} must be a positive multiple of K={self.K}")
        if not (1 <= self.M1 <= self.M - 1):
            raise ValidationError(f"M1={self.M1} must lie in [1, M-1] with M={self.M}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        if self.lam < 0 or self.tau <= 0:
            raise ValidationError("lambda must be >= 0 and tau > 0")
        if self.mode != "scratch" and self.L < 1:
            raise ValidationError(f"L must be >= 1 for mode {self.mode}")
        if self.mode == "bmssl" and self.delta < 1:
            raise ValidationError("delta must be >= 1 for bmssl")
        if self.target_objective not in ("support", "query", "episode"):
            raise ValidationError(
                "target_objective must be support|query|episode")
        if self.level not in LEVELS:
            raise ValidationError(f"level must be one of {sorted(LEVELS)}")
        if self.meta_steps < 0:
            raise ValidationError("meta_steps must be >= 0")
        if self.hidden_dim < 1 or self.proj_dim < 1:
            raise ValidationError("model dimensions must be positive")
        if self.data_classes < 4 or self.data_per_class < 2:
            raise ValidationError("dataset needs >= 4 classes and >= 2 samples each")
        if not (0.0 < self.split_fraction < 1.0):
            raise ValidationError("split_fraction must lie in (0, 1)")
        if self.eval_way < 1 or self.eval_shot < 1 or self.eval_query < 1:
            raise ValidationError("eval way/shot/query must be positive")
        if self.eval_episodes < 1 or self.eval_inner_steps < 0:
            raise ValidationError("eval_episodes must be >= 1, eval_inner_steps >= 0")
        if self.eval_interval < 0:
            raise ValidationError("eval_interval must be >= 0")
        if self.eval_shot + self.eval_query > self.data_per_class:
            raise ValidationError(
                f"eval needs shot+query <= per-class samples "
                f"({self.eval_shot}+{self.eval_query} > {self.data_per_class})")
        return self

    @property
    def way(self) -> int:
        return self.N // self.K

    def replaced(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"{field.name}: expected a boolean, got {raw!r}")
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        name = _FIELD_OF_KEY.get(key, key)
        if name not in fields:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[name] = _coerce(fields[name], raw)
        except ValueError as exc:
            raise ValidationError(f"config line {lineno}: {exc}") from None
    return dataclasses.replace(cfg, **values).validate()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for field in dataclasses.fields(RunConfig):
        key = _KEY_OF_FIELD.get(field.name, field.name)
        value = getattr(cfg, field.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
