"""Experiment configuration records and their JSON form.

Defaults: 12 binary input factors, 4 output factors of size 8, 2 parents per
output factor, concentration 0.1, d=64, h=128, one block, learning rate 3e-2,
1000 epochs, 90% observed inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

REGIMES = ("single_pass", "compression", "generalization")
SCHEDULERS = ("cosine", "custom_log")
EMBEDDINGS = ("learned", "fce")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    input_factors: tuple[int, ...] = (2,) * 12
    output_factors: tuple[int, ...] = (8,) * 4
    degree: int | None = 2
    beta: float | None = None
    alpha: float = 0.1
    shuffle_tokens: bool = False

    @property
    def n_inputs(self) -> int:
        return math.prod(self.input_factors)

    @property
    def n_outputs(self) -> int:
        return math.prod(self.output_factors)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    h: int = 128
    L: int = 1
    embedding_mode: str | None = None
    train_output_embedding: bool = True
    fce_std: float | None = None  # None: 1/sqrt(k), unit-variance summed embedding


@dataclass(frozen=True)
class OptimConfig:
    eta: float = 3e-2
    epochs: int = 1000
    scheduler: str = "cosine"
    lr_floor: float = 3e-4


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    regime: str = "single_pass"
    gamma: float | None = None
    batch_size: int | None = None
    seeds: tuple[int, ...] = (0,)
    master_seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        # regime-dependent defaults, so TrainConfig() equals parsing "{}"
        if self.gamma is None and self.regime == "generalization":
            object.__setattr__(self, "gamma", 0.9)
        if self.batch_size is None and self.regime == "single_pass":
            object.__setattr__(self, "batch_size", 8096)
        if self.model.embedding_mode is None:
            mode = "fce" if self.regime == "generalization" else "learned"
            object.__setattr__(self, "model", ModelConfig(**{**asdict(self.model), "embedding_mode": mode}))

    def to_dict(self) -> dict:
        return _listify(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return _build(raw)

    def replace(self, **changes) -> "TrainConfig":
        """Copy with top-level or dotted (``"model.d"``) fields changed, re-validated."""
        d = self.to_dict()
        for key, value in changes.items():
            target = d
            *path, last = key.split(".")
            for p in path:
                target = target[p]
            target[last] = value
        # keep regime-dependent defaults consistent with the new regime
        if "regime" in changes:
            if "gamma" not in changes and changes["regime"] != "generalization":
                d["gamma"] = None
            if "batch_size" not in changes and changes["regime"] != "single_pass":
                d["batch_size"] = None
            if "model.embedding_mode" not in changes:
                d["model"]["embedding_mode"] = None
        return _build(d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _section(cls, raw, name):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key '{name}.{unknown[0]}'")
    return raw


def _build(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")

    draw = dict(_section(DataConfig, raw.pop("data", None), "data"))
    if draw.get("degree") is not None and draw.get("beta") is not None:
        raise ConfigError("'data.degree' and 'data.beta' are mutually exclusive")
    if draw.get("beta") is not None:
        draw["degree"] = None
    elif "degree" in draw and draw["degree"] is None:
        raise ConfigError("exactly one of 'data.degree' / 'data.beta' must be set")
    for key in ("input_factors", "output_factors"):
        if key in draw:
            draw[key] = tuple(int(v) for v in draw[key])
    data = DataConfig(**draw)
    _check_data(data)

    model = ModelConfig(**_section(ModelConfig, raw.pop("model", None), "model"))
    optim = OptimConfig(**_section(OptimConfig, raw.pop("optim", None), "optim"))

    regime = raw.get("regime", "single_pass")
    if regime not in REGIMES:
        raise ConfigError(f"'regime' must be one of {REGIMES}, got {regime!r}")
    if raw.get("gamma") is not None and regime != "generalization":
        raise ConfigError("'gamma' is only valid in the generalization regime")
    if raw.get("batch_size") is not None and regime != "single_pass":
        raise ConfigError("'batch_size' is only valid in the single_pass regime")
    raw.setdefault("gamma", 0.9 if regime == "generalization" else None)
    raw.setdefault("batch_size", 8096 if regime == "single_pass" else None)
    if raw["gamma"] is None and regime == "generalization":
        raw["gamma"] = 0.9
    if raw["batch_size"] is None and regime == "single_pass":
        raw["batch_size"] = 8096

    mode = model.embedding_mode
    if mode is None:
        mode = "fce" if regime == "generalization" else "learned"
        model = ModelConfig(**{**asdict(model), "embedding_mode": mode})
    if mode not in EMBEDDINGS:
        raise ConfigError(f"'model.embedding_mode' must be one of {EMBEDDINGS}, got {mode!r}")
    if regime == "generalization" and mode != "fce":
        raise ConfigError("the generalization regime requires 'model.embedding_mode' = 'fce'")
    if regime != "generalization" and mode != "learned":
        raise ConfigError(f"the {regime} regime requires 'model.embedding_mode' = 'learned'")
    for key in ("d", "h", "L"):
        if int(getattr(model, key)) < 1:
            raise ConfigError(f"'model.{key}' must be >= 1")
    if model.fce_std is not None and not model.fce_std > 0:
        raise ConfigError("'model.fce_std' must be > 0")
    if optim.scheduler not in SCHEDULERS:
        raise ConfigError(f"'optim.scheduler' must be one of {SCHEDULERS}")
    if not optim.eta > 0 or not optim.lr_floor > 0:
        raise ConfigError("'optim.eta' and 'optim.lr_floor' must be > 0")
    if int(optim.epochs) < 0:
        raise ConfigError("'optim.epochs' must be >= 0")

    gamma = raw["gamma"]
    if gamma is not None and not 0.0 < float(gamma) <= 1.0:
        raise ConfigError("'gamma' must lie in (0, 1]")
    if raw["batch_size"] is not None and int(raw["batch_size"]) < 1:
        raise ConfigError("'batch_size' must be >= 1")
    seeds = tuple(int(s) for s in raw.get("seeds", (0,)))
    if not seeds:
        raise ConfigError("'seeds' must be a nonempty list")
    return TrainConfig(
        data=data,
        model=model,
        optim=optim,
        regime=regime,
        gamma=None if gamma is None else float(gamma),
        batch_size=None if raw["batch_size"] is None else int(raw["batch_size"]),
        seeds=seeds,
        master_seed=int(raw.get("master_seed", 0)),
        record_wall_time=bool(raw.get("record_wall_time", False)),
    )


def _check_data(data: DataConfig) -> None:
    for key in ("input_factors", "output_factors"):
        sizes = getattr(data, key)
        if not sizes:
            raise ConfigError(f"'data.{key}' must be nonempty")
        if len(sizes) > 1 and min(sizes) < 2:
            raise ConfigError(f"'data.{key}' entries must be >= 2")
    if data.degree is not None and not 0 <= data.degree <= len(data.input_factors):
        raise ConfigError(f"'data.degree' must lie in [0, {len(data.input_factors)}]")
    if data.beta is not None and not 0.0 <= data.beta <= 1.0:
        raise ConfigError("'data.beta' must lie in [0, 1]")
    if not data.alpha > 0:
        raise ConfigError("'data.alpha' must be > 0")


def parse_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return _build(raw)
