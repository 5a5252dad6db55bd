"""Experiment configuration.

Configs are flat text files of ``dotted.key = value`` lines (``#`` starts a
comment). Values are Python literals: numbers, ``true``/``false``, lists in
brackets, or bare strings.
"""

from __future__ import annotations

import ast
import dataclasses
import math
import os
import zlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .replay import ReplayHyperparams

METHODS = ("pfeddsh", "pfedhn_nomask", "fedavg", "local_only", "pfeddsh_noreplay", "pfeddsh_nomask")
ENV_PREFIX = "PFEDDSH_"


@dataclass
class DataConfig:
    clients: int = 10
    classes: int = 5
    dim: int = 16
    per_class: int = 200
    spread: float = 1.0
    alpha: float = 0.1
    test_fraction: float = 0.2


@dataclass
class NetConfig:
    hidden: int = 32
    depth: int = 2


@dataclass
class HypernetConfig:
    embed_dim: int = 32
    hidden: int = 64
    server_lr: float = 0.3
    head_scale: float = 0.1
    clip_norm: float = 1.0  # 0 disables
    train_embeddings: bool = True
    robbins_monro: bool = False


@dataclass
class MaskConfig:
    lam: float = 5e-4
    gamma: float = 10.0
    gamma_growth: float = 1.05
    gamma_max: float = 100.0
    lr: float = 1.0
    init_logit: float = 0.1
    reuse_logit: float = 1.0
    soft_eval: bool = False


@dataclass
class ReplayConfig:
    enabled: bool = True
    beta_tv: float = 1e-5
    beta_l2: float = 1e-4
    beta_feature: float = 1e-2
    iterations: int = 250
    step_size: float = 0.1
    images_per_class: int = 20
    batch_size: int = 32
    ce_weight: float = 1.0
    clamp: float = 3.0
    finetune_epochs: int = 5
    finetune_lr: float = 0.01
    min_class_share: float = 0.1  # classes below this share of the batch's samples are not synthesized
    min_coverage: float = 0.9  # skip clients whose label mass the pool covers less than this
    update_hypernet: bool = False

    def hyperparams(self) -> ReplayHyperparams:
        names = {f.name for f in fields(ReplayHyperparams)}
        return ReplayHyperparams(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class ScheduleConfig:
    batch_sizes: list = field(default_factory=lambda: [8, 2])
    rounds: list = field(default_factory=lambda: [60, 30])
    local_epochs: int = 3
    sample_fraction: float = 0.25
    client_lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    pretrain_epochs: int = 50
    eval_every: int = 10

    def rounds_for(self, t: int) -> int:
        """Rounds for batch ``t`` (1-based); a short list repeats its last entry."""
        return int(self.rounds[min(t, len(self.rounds)) - 1])


@dataclass
class RunConfig:
    method: str = "pfeddsh"
    seed: int = 0


SECTIONS = {
    "data": DataConfig,
    "net": NetConfig,
    "hypernet": HypernetConfig,
    "mask": MaskConfig,
    "replay": ReplayConfig,
    "schedule": ScheduleConfig,
    "run": RunConfig,
}
# config-file spelling -> attribute name
ALIASES = {("mask", "lambda"): "lam"}
_REVERSE = {(s, a): k for (s, k), a in ALIASES.items()}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        s, d = self.schedule, self.data
        if self.run.method not in METHODS:
            raise ConfigError(f"unknown method {self.run.method!r}; choose from {', '.join(METHODS)}", "run.method")
        if not 0 < s.sample_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", "schedule.sample_fraction")
        if not s.batch_sizes or any(int(b) < 1 for b in s.batch_sizes):
            raise ConfigError("batch sizes must be positive", "schedule.batch_sizes")
        if sum(s.batch_sizes) != d.clients:
            raise ConfigError(f"batch sizes sum to {sum(s.batch_sizes)} but data.clients = {d.clients}", "schedule.batch_sizes")
        if not s.rounds or any(int(r) < 1 for r in s.rounds):
            raise ConfigError("every batch needs at least one round", "schedule.rounds")
        if s.local_epochs < 0 or s.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative", "schedule.local_epochs")
        if not s.client_lr > 0:
            raise ConfigError("must be positive", "schedule.client_lr")
        if not 0 <= s.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "schedule.momentum")
        if s.batch_size < 1 or s.eval_every < 1:
            raise ConfigError("must be >= 1", "schedule.batch_size")
        if d.clients < 1 or d.classes < 2 or d.dim < 2 or d.per_class < 1:
            raise ConfigError("need >= 1 client, >= 2 classes, >= 2 dims", "data")
        if d.classes * d.per_class < 2 * d.clients:
            raise ConfigError("too few samples for the number of clients", "data.per_class")
        if not d.alpha > 0:
            raise ConfigError("must be positive", "data.alpha")
        if not 0 < d.test_fraction < 1:
            raise ConfigError("must lie in (0, 1)", "data.test_fraction")
        if self.hypernet.embed_dim < 1 or self.hypernet.hidden < 1:
            raise ConfigError("must be >= 1", "hypernet.embed_dim")
        if self.hypernet.clip_norm < 0:
            raise ConfigError("must be non-negative", "hypernet.clip_norm")
        if not self.hypernet.server_lr > 0:
            raise ConfigError("must be positive", "hypernet.server_lr")
        if self.mask.lam < 0:
            raise ConfigError("must be non-negative", "mask.lambda")
        if not self.mask.gamma > 0 or self.mask.gamma_growth < 1 or self.mask.gamma_max < self.mask.gamma:
            raise ConfigError("need gamma > 0, growth >= 1, gamma_max >= gamma", "mask.gamma")
        if self.net.hidden < 1 or self.net.depth < 1:
            raise ConfigError("must be >= 1", "net.hidden")
        if not 0 <= self.replay.min_coverage <= 1:
            raise ConfigError("must lie in [0, 1]", "replay.min_coverage")
        if not 0 <= self.replay.min_class_share <= 1:
            raise ConfigError("must lie in [0, 1]", "replay.min_class_share")
        try:
            self.replay.hyperparams()
        except ValueError as exc:
            raise ConfigError(str(exc), "replay") from None
        return self

    @property
    def n_batches(self) -> int:
        return len(self.schedule.batch_sizes)

    def items(self) -> list[tuple[str, object]]:
        out = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                key = _REVERSE.get((sec, f.name), f.name)
                out.append((f"{sec}.{key}", getattr(obj, f.name)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def to_dict(self) -> dict:
        return dict(self.items())

    def copy(self) -> "ExperimentConfig":
        return parse_text(self.to_text())

    def set(self, key: str, value, line: int | None = None) -> None:
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError("unknown key", key, line)
        attr = ALIASES.get((sec, name), name)
        obj = getattr(self, sec)
        types = {f.name: f.type for f in fields(obj)}
        if attr not in types:
            raise ConfigError("unknown key", key, line)
        setattr(obj, attr, _coerce(value, types[attr], key, line))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v) if isinstance(v, float) else str(v)


def _literal(text: str):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def _coerce(value, typ, key, line):
    if isinstance(value, str):
        value = _literal(value)
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if typ == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if typ == "float":
            if isinstance(value, bool):
                raise TypeError
            v = float(value)
            if not math.isfinite(v):
                raise TypeError
            return v
        if typ == "list":
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return [int(x) for x in value]
        if typ == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot read {value!r} as {typ}", key, line) from None
    return value


def parse_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, lineno)
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value, lineno)
    return cfg


def load(path: Path | str) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_text(text)


def bundled_text(name: str = "desk") -> str:
    return resources.files("pfeddsh").joinpath("configs", f"{name}.cfg").read_text()


def bundled(name: str = "desk") -> ExperimentConfig:
    return parse_text(bundled_text(name))


def apply_env(cfg: ExperimentConfig, environ=None) -> list[str]:
    """Apply ``PFEDDSH_SECTION__KEY=value`` overrides; returns the keys set."""
    environ = os.environ if environ is None else environ
    applied = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        key = name[len(ENV_PREFIX) :].lower().replace("__", ".", 1)
        cfg.set(key, value)
        applied.append(key)
    return applied


def stream(root_seed: int, *names) -> np.random.Generator:
    """Independent generator for a named sub-stream of the root seed."""
    parts = [int(root_seed)]
    for n in names:
        parts.append(int(n) if isinstance(n, (int, np.integer)) else zlib.crc32(str(n).encode()))
    return np.random.default_rng(np.random.SeedSequence(parts))


def sub_seed(root_seed: int, *names) -> int:
    return int(stream(root_seed, *names).integers(2**31 - 1))
