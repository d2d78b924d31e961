"""Configuration dataclasses and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_layers: int = 4
    moe_layers: tuple[int, ...] = (1, 3)
    n_experts: int = 4
    k_experts: int = 1
    d_ff: int = 128
    max_seq_len: int = 128
    n_heads: int = 4
    k_docs: int = 2
    gate_threshold: float = 0.5
    alpha_lb: float = 0.01
    lambda_ret: float = 0.05
    router_noise: bool = False
    router_noise_std: float = 1.0
    answer_cap: int = 16

    def __post_init__(self):
        self.moe_layers = tuple(sorted(set(int(i) for i in self.moe_layers)))
        self.validate()

    def validate(self) -> None:
        if any(i < 0 or i >= self.n_layers for i in self.moe_layers):
            raise ConfigError(f"moe_layers {self.moe_layers} outside 0..{self.n_layers - 1}")
        if not 1 <= self.k_experts <= self.n_experts:
            raise ConfigError(f"k_experts={self.k_experts} must lie in 1..n_experts={self.n_experts}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ConfigError(f"gate threshold {self.gate_threshold} outside [0, 1]")
        if self.k_docs < 0 or self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError("k_docs, vocab_size and max_seq_len must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["moe_layers"] = list(self.moe_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TaskConfig:
    n_entities: int = 50
    n_relations: int = 10
    n_facts: int = 300
    external_fraction: float = 0.5
    n_values: int = 50
    min_repeats: int = 4
    # share of external facts kept out of training and used as test queries
    heldout_fraction: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 80
    lr: float = 0.5
    gate_lr: float = 1.0
    momentum: float = 0.0
    batch_size: int = 16
    warmup_epochs: int = 2
    clip: float = 1.0
    trainer: str = "ste"
    parametric_penalty: float = 0.0
    # redraw train-external values (and their documents) every epoch
    resample_external: bool = True
    # "both": the generator also learns from the branch the gate did not pick
    branches: str = "both"
    # linear decay of the generator learning rate to zero over the run
    lr_decay: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gate_mode: str = "threshold"
    fusion_mode: str = "concat"
    bench_queries: int = 1000
    # retrieval depth used by bench; 0 keeps the trained depth
    bench_k_docs: int = 0
    eval_mode: str = "normal"
    # keys that the config text set explicitly
    explicit: frozenset = frozenset()


# flat key -> (section, attribute)
_KEYS: dict[str, tuple[str, str]] = {
    "model.d_model": ("model", "d_model"),
    "model.n_layers": ("model", "n_layers"),
    "model.moe_layers": ("model", "moe_layers"),
    "model.n_experts": ("model", "n_experts"),
    "model.k_experts": ("model", "k_experts"),
    "model.d_ff": ("model", "d_ff"),
    "model.max_seq_len": ("model", "max_seq_len"),
    "model.n_heads": ("model", "n_heads"),
    "model.k_docs": ("model", "k_docs"),
    "model.alpha_lb": ("model", "alpha_lb"),
    "model.router_noise": ("model", "router_noise"),
    "model.router_noise_std": ("model", "router_noise_std"),
    "model.answer_cap": ("model", "answer_cap"),
    "gate.threshold": ("model", "gate_threshold"),
    "gate.lambda_ret": ("model", "lambda_ret"),
    "gate.mode": ("run", "gate_mode"),
    "gate.trainer": ("train", "trainer"),
    "gate.parametric_penalty": ("train", "parametric_penalty"),
    "fusion.mode": ("run", "fusion_mode"),
    "task.n_entities": ("task", "n_entities"),
    "task.n_relations": ("task", "n_relations"),
    "task.n_facts": ("task", "n_facts"),
    "task.external_fraction": ("task", "external_fraction"),
    "task.n_values": ("task", "n_values"),
    "task.min_repeats": ("task", "min_repeats"),
    "task.heldout_fraction": ("task", "heldout_fraction"),
    "train.epochs": ("train", "epochs"),
    "train.lr": ("train", "lr"),
    "train.gate_lr": ("train", "gate_lr"),
    "train.momentum": ("train", "momentum"),
    "train.batch_size": ("train", "batch_size"),
    "train.warmup_epochs": ("train", "warmup_epochs"),
    "train.clip": ("train", "clip"),
    "train.resample_external": ("train", "resample_external"),
    "train.branches": ("train", "branches"),
    "train.lr_decay": ("train", "lr_decay"),
    "bench.queries": ("run", "bench_queries"),
    "bench.k_docs": ("run", "bench_k_docs"),
    "eval.mode": ("run", "eval_mode"),
}

VALID_KEYS = tuple(sorted(_KEYS))

_CHOICES = {
    "gate.mode": ("threshold", "sample"),
    "gate.trainer": ("ste", "reinforce"),
    "train.branches": ("sampled", "both"),
    "fusion.mode": ("concat", "augment"),
    "eval.mode": ("normal", "force_retrieve", "no_retrieve", "dense"),
}


def _coerce(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key}") from None
    if key in _CHOICES and raw not in _CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(_CHOICES[key])}; got {raw!r}")
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    run = base or RunConfig()
    sections = {"model": dataclasses.asdict(run.model), "task": run.task, "train": run.train, "run": run}
    model_vals = sections["model"]
    seen = set(run.explicit)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
        section, attr = _KEYS[key]
        seen.add(key)
        if section == "model":
            model_vals[attr] = _coerce(key, raw, model_vals[attr])
        else:
            obj = sections[section]
            setattr(obj, attr, _coerce(key, raw, getattr(obj, attr)))
    run.model = ModelConfig(**model_vals)
    run.explicit = frozenset(seen)
    return run


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)
