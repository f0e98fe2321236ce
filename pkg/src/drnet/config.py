"""Run configuration: flat key=value files, desk/paper presets, strict validation."""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Unknown key, bad type, or out-of-range value in a config."""


@dataclass
class RunConfig:
    task: str = "cls"
    preset: str = "desk"
    seed: int = 1
    points: int = 64
    k: int = 4
    d_max: int = 5
    k_mr: int = 4
    embed_width: int = 256
    epochs: int = 100
    batch: int = 8
    dropout: float = 0.5
    votes: int = 10
    n_per_class: int = 60
    n_shapes: int = 16
    er_scale: float = 1.0
    optimizer: str = "auto"
    schedule: str = "auto"
    edge_depth: int = 1
    hidden_relu: bool = False
    metric_normalize: bool = False
    surrogate_gate: bool = True
    mr_coordinate_knn: bool = False
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self):
        checks = [
            (self.task in ("cls", "seg"), "task must be cls or seg"),
            (self.preset in ("desk", "paper"), "preset must be desk or paper"),
            (self.points >= 32, "points must be >= 32"),
            (self.k >= 1, "k must be >= 1"),
            (1 <= self.d_max <= 16, "d_max must be in [1, 16]"),
            (self.k * self.d_max % 2 == 0, "k*d_max must be even"),
            (self.k * self.d_max <= self.points, "k*d_max must not exceed points"),
            (self.k_mr >= 1, "k_mr must be >= 1"),
            (self.embed_width >= 8, "embed_width must be >= 8"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch >= 1, "batch must be >= 1"),
            (0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)"),
            (self.votes >= 1, "votes must be >= 1"),
            (self.n_per_class >= 3, "n_per_class must be >= 3"),
            (self.n_shapes >= 3, "n_shapes must be >= 3"),
            (self.er_scale >= 0.0, "er_scale must be >= 0"),
            (self.optimizer in ("auto", "sgd", "adam"), "optimizer must be auto, sgd, or adam"),
            (self.schedule in ("auto", "cosine", "step"), "schedule must be auto, cosine, or step"),
            (self.edge_depth >= 1, "edge_depth must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_PAPER_OVERRIDES = {
    "points": 1024,
    "k": 20,
    "d_max": 5,
    "k_mr": 20,
    "embed_width": 1024,
    "batch": 32,
}
_PAPER_EPOCHS = {"cls": 300, "seg": 200}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_KEYS = {f.name for f in fields(RunConfig) if f.type == "bool"}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config(text: str, overrides=()) -> RunConfig:
    """Build a RunConfig from `key = value` lines plus --set style overrides.

    Presets fill defaults first (paper scales points/k/width/batch/epochs up),
    then explicit keys win. Unknown keys and out-of-range values are errors.
    """
    assignments = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        assignments[key.strip()] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        assignments[key.strip()] = value

    cfg = RunConfig()
    preset = assignments.get("preset", cfg.preset).strip()
    task = assignments.get("task", cfg.task).strip()
    if preset == "paper":
        for key, value in _PAPER_OVERRIDES.items():
            setattr(cfg, key, value)
        cfg.epochs = _PAPER_EPOCHS.get(task, cfg.epochs)
    for key, raw in assignments.items():
        setattr(cfg, key, _coerce(key, raw))
    return cfg.validate()


def load_config(path: str, overrides=()) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)
