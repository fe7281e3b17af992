"""Run configuration: ``key = value`` text files with validated keys.

Documented keys (anything else is rejected)::

    seed, data_dir, height, width, stage, steps, learning_rate,
    adam_beta1, adam_beta2, lambda_cyc, lambda_idt, tau, momentum_m,
    queue_capacity, batch_size, task, direction, init, out, style_ckpt,
    contrastive_ckpt, log

Unset stage-dependent keys take the per-stage defaults in ``STAGE_DEFAULTS``.
Relative paths resolve against the directory holding the config file.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

STAGES = ("style", "contrastive", "task")
TASKS = ("depth", "seg")
DIRECTIONS = ("bidirectional", "source_to_target")
INITS = ("dacl", "baseline")

STAGE_DEFAULTS = {
    "style": {"steps": 2000, "learning_rate": 2e-4, "adam_beta1": 0.5, "adam_beta2": 0.999, "batch_size": 1},
    "contrastive": {"steps": 1000, "learning_rate": 1e-3, "adam_beta1": 0.9, "adam_beta2": 0.999, "batch_size": 16},
    "task": {"steps": 2000, "learning_rate": 1e-3, "adam_beta1": 0.9, "adam_beta2": 0.999, "batch_size": 4},
}


@dataclass
class TrainConfig:
    seed: int = 0
    data_dir: str = "data"
    height: int = 32
    width: int = 64
    stage: str = "style"
    steps: int | None = None
    learning_rate: float | None = None
    adam_beta1: float | None = None
    adam_beta2: float | None = None
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    tau: float = 0.07
    momentum_m: float = 0.99
    queue_capacity: int = 512
    batch_size: int | None = None
    task: str = "depth"
    direction: str = "bidirectional"
    init: str = "dacl"
    out: str = ""
    style_ckpt: str = ""
    contrastive_ckpt: str = ""
    log: str = ""
    base_dir: str = "."

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for key, value in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.direction in DIRECTIONS, f"direction must be one of {DIRECTIONS}")
        need(self.init in INITS, f"init must be one of {INITS}")
        need(self.height > 0 and self.width > 0 and self.height % 16 == 0 and self.width % 16 == 0,
             "height and width must be positive multiples of 16")
        need(self.steps >= 0, "steps must be >= 0")
        need(self.learning_rate > 0, "learning_rate must be > 0")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "adam betas must lie in [0, 1)")
        need(self.lambda_cyc >= 0 and self.lambda_idt >= 0, "loss weights must be >= 0")
        need(self.tau > 0, "tau must be > 0")
        need(0 <= self.momentum_m <= 1, "momentum_m must lie in [0, 1]")
        need(self.queue_capacity >= 1, "queue_capacity must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")

    def path(self, key: str) -> Path | None:
        raw = getattr(self, key)
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def snapshot(self) -> dict:
        """Config values as recorded in checkpoints (no resolved paths)."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}


_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "base_dir"}


def _coerce(key: str, raw: str):
    kind = str(_FIELDS[key].type)
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def parse_config(text: str, base_dir=".", defaults=None, **overrides) -> TrainConfig:
    """Parse config text; ``defaults`` fill absent keys, ``overrides`` win over the file."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    values = {**(defaults or {}), **values, **overrides}
    return TrainConfig(base_dir=str(base_dir), **values)


def load_config(path, defaults=None, **overrides) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text(), base_dir=path.parent, defaults=defaults, **overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.snapshot().items() if v is not None and v != "")
