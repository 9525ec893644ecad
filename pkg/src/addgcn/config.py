"""Training configuration and its flat ``key = value`` file format.

Example::

    # desk-scale ADD-GCN run
    graph_mode = S_then_D
    epochs = 20
    lr_step_epochs = 12, 16
    pairs = 0-1:0.2, 2-3:0.02

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`TrainConfig`; unknown keys are an error. Booleans accept
true/false/1/0/yes/no, tuples are comma-separated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticSpec, make_cooccurrence
from .dgcn import GRAPH_MODES, GraphHeadConfig
from .errors import ConfigError
from .head import AGGREGATIONS
from .sam import MAP_MODES, SamConfig

MODELS = ("addgcn", "gap_linear")
# Fields that do not change what is being trained.
_UNHASHED = frozenset({"epochs", "out_dir", "eval_every", "deterministic"})


@dataclass(frozen=True)
class TrainConfig:
    # optimizer (SGD with momentum and a step schedule)
    lr_head: float = 0.5
    lr_features: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    lr_step_epochs: tuple[int, ...] = (30, 40)
    lr_gamma: float = 0.1
    batch_size: int = 18
    seed: int = 0

    # model
    model: str = "addgcn"
    graph_mode: str = "S_then_D"
    aggregation: str = "Bi"
    map_mode: str = "cls_then_gmp"
    sigmoid_maps: bool = True
    score_pool: str = "max"
    fuse: bool = True
    bias: bool = True
    static_identity_init: bool = False
    repr_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 64
    slope: float = 0.2

    # data: an index file, or the synthetic generator below
    data_index: str = ""
    eval_index: str = ""
    num_classes: int = 8
    channels: int = 32
    height: int = 8
    width: int = 8
    noise_sigma: float = 0.5
    train_samples: int = 2000
    eval_samples: int = 500
    data_seed: int = 0
    prototype_seed: int = 0
    amplitude: float = 2.0
    block_min: int = 1
    block_max: int = 3
    marginal: float = 0.25
    pairs: str = ""  # "a-b:joint, ..."
    flip_pair: str = ""  # "a-b": also evaluate on a flipped co-occurrence split

    # run control
    out_dir: str = ""
    eval_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr_head <= 0 or self.lr_features <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        steps = list(self.lr_step_epochs)
        if steps != sorted(steps) or len(set(steps)) != len(steps):
            raise ConfigError(f"lr_step_epochs must be strictly ascending, got {steps}")
        if steps and steps[-1] >= self.epochs:
            raise ConfigError(f"lr step epoch {steps[-1]} is not below epochs={self.epochs}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph_mode {self.graph_mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"unknown map_mode {self.map_mode!r}")
        parse_pairs(self.pairs)
        if self.flip_pair:
            parse_flip(self.flip_pair)

    # -- derived configs -----------------------------------------------------
    def sam_config(self, num_classes: int, channels: int) -> SamConfig:
        return SamConfig(num_classes, channels, self.repr_dim, self.map_mode, self.sigmoid_maps,
                         self.score_pool, self.slope, self.bias)

    def graph_config(self, num_classes: int) -> GraphHeadConfig:
        return GraphHeadConfig(num_classes, self.repr_dim, self.hidden_dim, self.out_dim,
                               self.graph_mode, self.slope, self.bias, self.static_identity_init)

    def synthetic_spec(self, split: str = "train") -> SyntheticSpec:
        n = self.train_samples if split == "train" else self.eval_samples
        seed = self.data_seed if split == "train" else self.data_seed + 100_003
        co = make_cooccurrence(self.num_classes, self.marginal, parse_pairs(self.pairs))
        return SyntheticSpec(
            num_classes=self.num_classes, channels=self.channels, height=self.height,
            width=self.width, cooccurrence=co, noise_sigma=self.noise_sigma, samples=n,
            seed=seed, prototype_seed=self.prototype_seed, amplitude=self.amplitude,
            block_min=self.block_min, block_max=self.block_max,
        )

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_step_epochs"] = list(self.lr_step_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_step_epochs" in d:
            d["lr_step_epochs"] = tuple(int(v) for v in d["lr_step_epochs"])
        return cls(**d)

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_pairs(text: str) -> dict[tuple[int, int], float]:
    out = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        try:
            ab, joint = item.split(":")
            a, b = (int(v) for v in ab.split("-"))
            out[(a, b)] = float(joint)
        except ValueError:
            raise ConfigError(f"bad pair spec {item!r}; expected 'a-b:joint'") from None
    return out


def parse_flip(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split("-"))
    except ValueError:
        raise ConfigError(f"bad flip_pair {text!r}; expected 'a-b'") from None
    return a, b


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    defaults = base.to_dict()
    defaults["lr_step_epochs"] = base.lr_step_epochs
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return base.replace(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
