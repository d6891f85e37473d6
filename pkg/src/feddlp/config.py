"""Run configuration: typed flat key=value files, validation, manifests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

MODES = ("feddlp", "local_only", "local_only_pruned", "homogeneous_lora", "combined")
ALTERNATIONS = ("per_batch", "per_epoch")
THRESHOLD_MODES = ("soft", "hard")
EVAL_ADAPTERS = ("auto", "local", "global", "sum")
KD_DIRECTIONS = ("student_first", "teacher_first")


@dataclass
class RunConfig:
    # Federation protocol
    mode: str = "feddlp"
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    n_clients: int = 10
    seed: int = 0

    # Adapters and optimization
    rank_local: int = 4
    rank_global: int = 2
    lr_local: float = 2e-3
    lr_global: float = 2e-3
    gate_lr: float | None = None        # defaults to lr_local
    weight_decay: float = 0.0
    kd_alpha: float = 1.0
    kd_direction: str = "student_first"
    xi: float = 5e-5
    threshold_mode: str = "soft"
    alternation: str = "per_batch"
    eval_adapter: str = "auto"

    # Head / data
    tau: float = 0.01
    head_distortion: float = 0.0        # 0 keeps the identity projection
    head_distortion_rank: int = 3
    beta: float = 0.1
    train_ratio: float = 0.75
    embeddings_path: str | None = None
    synthetic_k: int = 10
    synthetic_d: int = 32
    synthetic_n: int = 4000
    synthetic_noise: float = 0.6

    # Accounting and execution
    layer_multiplier: int = 1
    workers: int = 1

    @property
    def effective_gate_lr(self) -> float:
        return self.lr_local if self.gate_lr is None else self.gate_lr

    def validate(self) -> "RunConfig":
        def choice(name, value, allowed):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")

        choice("mode", self.mode, MODES)
        choice("kd_direction", self.kd_direction, KD_DIRECTIONS)
        choice("alternation", self.alternation, ALTERNATIONS)
        choice("threshold_mode", self.threshold_mode, THRESHOLD_MODES)
        choice("eval_adapter", self.eval_adapter, EVAL_ADAPTERS)
        for name in ("rounds", "local_epochs", "batch_size", "n_clients",
                     "rank_local", "rank_global", "layer_multiplier", "workers",
                     "synthetic_k", "synthetic_d", "synthetic_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_local", "lr_global", "tau", "beta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.gate_lr is not None and self.gate_lr <= 0:
            raise ConfigError(f"gate_lr must be > 0, got {self.gate_lr}")
        for name in ("weight_decay", "kd_alpha", "xi", "head_distortion"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.head_distortion_rank < 0:
            raise ConfigError(
                f"head_distortion_rank must be >= 0, got {self.head_distortion_rank}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if self.synthetic_noise < 0:
            raise ConfigError(f"synthetic_noise must be >= 0, got {self.synthetic_noise}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_OPTIONAL = {"gate_lr": float, "embeddings_path": str}


def _coerce(key: str, raw: str):
    if key in _OPTIONAL:
        if raw.lower() in ("none", ""):
            return None
        caster = _OPTIONAL[key]
    else:
        caster = _FIELDS[key].type
        caster = {"int": int, "float": float, "str": str}[caster] \
            if isinstance(caster, str) else caster
    try:
        if caster is float:
            return float(raw)
        if caster is int:
            return int(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r} as {caster.__name__}") from exc


def parse_config_text(text: str) -> RunConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def manifest(cfg: RunConfig, extra: dict | None = None) -> str:
    """JSON record sufficient to reproduce a run bit-for-bit."""
    from . import __version__
    from . import adapter as _adapter
    from . import data as _data

    payload = {
        "config": dataclasses.asdict(cfg),
        "resolved": {"gate_lr": cfg.effective_gate_lr},
        "code_version": __version__,
        "adapter_format_version": _adapter.FORMAT_VERSION,
        "dataset_format_version": _data.FORMAT_VERSION,
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
