"""SGD training loop, checkpoints and ablation sweeps."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import adgt
from . import tensor as T
from .config import TrainConfig, parse_flip
from .data import FeatureDataset, generate, load_feature_dataset, make_biased_eval_split
from .head import AGGREGATIONS, bce_loss
from .metrics import MetricsReport, evaluate
from .model import AddGcn, GapLinear
from .sam import MAP_MODES
from .dgcn import GRAPH_MODES
from .errors import ConfigError
from .tensor import ContractError

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, sample_ids: list[str], dump: str | None = None):
        self.epoch, self.batch, self.sample_ids, self.dump = epoch, batch, sample_ids, dump
        where = f"; batch dumped to {dump}" if dump else ""
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (samples {sample_ids[:4]}...){where}"
        )


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def lr_schedule(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """(head lr, feature lr) for ``epoch``; decays by ``lr_gamma`` at each step epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    factor = cfg.lr_gamma ** sum(epoch >= s for s in cfg.lr_step_epochs)
    return cfg.lr_head * factor, cfg.lr_features * factor


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], lr, momentum: float, weight_decay: float):
    """v <- mu v + (g + wd theta);  theta <- theta - lr v.

    ``lr`` is a float or a per-parameter dict. Weight decay applies to every
    parameter. Returns the updated ``(params, state)`` dicts (new arrays).
    """
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        v = state.get(name)
        if v is None:
            v = np.zeros_like(theta)
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractError(
                f"{name}: param {theta.shape}, grad {g.shape}, momentum {v.shape} disagree"
            )
        rate = lr[name] if isinstance(lr, dict) else lr
        v = np.float32(momentum) * v + (g + np.float32(weight_decay) * theta)
        new_state[name] = v.astype(np.float32)
        new_params[name] = (theta - np.float32(rate) * new_state[name]).astype(np.float32)
    return new_params, new_state


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"ADGC"


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int  # number of completed epochs
    num_classes: int
    channels: int

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "version": 1,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "config": self.config.to_dict(),
            "num_classes": self.num_classes,
            "channels": self.channels,
            "params": names,
            "momentum": [n for n in names if n in self.momentum],
        }
        blobs = [adgt.encode(self.params[n]) for n in header["params"]]
        blobs += [adgt.encode(self.momentum[n]) for n in header["momentum"]]
        header["sizes"] = [len(b) for b in blobs]
        head = json.dumps(header, sort_keys=True).encode()
        return _CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Checkpoint":
        if buf[:4] != _CKPT_MAGIC:
            raise adgt.AdgtFormatError(f"{source}: not a checkpoint (bad magic {buf[:4]!r})")
        if len(buf) < 8:
            raise adgt.AdgtFormatError(f"{source}: truncated checkpoint header at offset {len(buf)}")
        (hlen,) = struct.unpack_from("<I", buf, 4)
        if len(buf) < 8 + hlen:
            raise adgt.AdgtFormatError(f"{source}: truncated checkpoint header at offset {len(buf)}")
        header = json.loads(buf[8:8 + hlen])
        cfg = TrainConfig.from_dict(header["config"])
        if cfg.hash() != header["config_hash"]:
            raise adgt.AdgtFormatError(f"{source}: stored config hash does not match its config")
        off = 8 + hlen
        arrays = []
        for size in header["sizes"]:
            arrays.append(adgt.decode(buf[off:off + size], source))
            off += size
        n = len(header["params"])
        return cls(
            config=cfg,
            params=dict(zip(header["params"], arrays[:n])),
            momentum=dict(zip(header["momentum"], arrays[n:])),
            epoch=header["epoch"],
            num_classes=header["num_classes"],
            channels=header["channels"],
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))

    def build_model(self):
        model = build_model(self.config, self.num_classes, self.channels)
        model.load_state_dict(self.params)
        return model


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def build_model(cfg: TrainConfig, num_classes: int, channels: int):
    rng = np.random.default_rng([cfg.seed, 7])
    if cfg.model == "gap_linear":
        return GapLinear(num_classes, channels, rng, cfg.bias)
    return AddGcn(cfg.sam_config(num_classes, channels), cfg.graph_config(num_classes),
                  cfg.aggregation, rng, cfg.fuse)


def load_datasets(cfg: TrainConfig) -> tuple[FeatureDataset, FeatureDataset]:
    if cfg.data_index:
        train_ds = load_feature_dataset(cfg.data_index)
        eval_ds = load_feature_dataset(cfg.eval_index) if cfg.eval_index else train_ds
        return train_ds, eval_ds
    return generate(cfg.synthetic_spec("train")), generate(cfg.synthetic_spec("eval"))


def flipped_eval_dataset(cfg: TrainConfig) -> FeatureDataset:
    return make_biased_eval_split(cfg.synthetic_spec("eval"), parse_flip(cfg.flip_pair))


def predict(model, ds: FeatureDataset, batch_size: int = 256) -> np.ndarray:
    """Fused logits for every sample, (N, C)."""
    out = []
    with T.no_grad():
        for batch in ds.batches(batch_size):
            out.append(model(batch.x).scores.s.data)
    if not out:
        return np.zeros((0, ds.num_classes), np.float32)
    return np.concatenate(out)


def evaluate_model(model, ds: FeatureDataset) -> MetricsReport:
    return evaluate(predict(model, ds), ds.y)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    model: object = None

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


def _single_thread(enabled: bool):
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def train(cfg: TrainConfig, train_ds: FeatureDataset | None = None,
          eval_ds: FeatureDataset | None = None, resume: Checkpoint | None = None,
          stop_after: int | None = None, extra_eval: dict[str, FeatureDataset] | None = None,
          ) -> TrainResult:
    """Train ``cfg`` end to end.

    ``resume`` continues from a checkpoint of the same config; ``stop_after``
    ends early after that many completed epochs. ``extra_eval`` maps names to
    additional evaluation sets whose mAP is logged every evaluated epoch.
    """
    if train_ds is None or eval_ds is None:
        loaded_train, loaded_eval = load_datasets(cfg)
        train_ds = train_ds if train_ds is not None else loaded_train
        eval_ds = eval_ds if eval_ds is not None else loaded_eval
    extra_eval = dict(extra_eval or {})
    if cfg.flip_pair and not cfg.data_index and "flipped" not in extra_eval:
        extra_eval["flipped"] = flipped_eval_dataset(cfg)

    num_classes, channels = train_ds.num_classes, train_ds.x.shape[1]
    model = build_model(cfg, num_classes, channels)
    named = dict(model.named_parameters())
    momentum: dict[str, np.ndarray] = {}
    start = 0
    if resume is not None:
        if resume.config_hash != cfg.hash():
            raise ContractError(
                f"checkpoint config hash {resume.config_hash} does not match {cfg.hash()}"
            )
        model.load_state_dict(resume.params)
        momentum = {k: v.copy() for k, v in resume.momentum.items()}
        start = resume.epoch
    groups = {name: model.param_group(name) for name in named}

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    with _single_thread(cfg.deterministic):
        for epoch in range(start, end):
            lr_head, lr_feat = lr_schedule(epoch, cfg)
            lrs = {n: (lr_feat if g == "features" else lr_head) for n, g in groups.items()}
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(train_ds))
            losses = []
            for bi, batch in enumerate(train_ds.batches(cfg.batch_size, order)):
                with T.Tape():
                    T.zero_grad(named.values())
                    loss = bce_loss(model(batch.x).scores.s, batch.y)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NonFiniteLossError(epoch, bi, batch.sample_ids,
                                                 _dump_batch(out_dir, epoch, bi, batch))
                    T.backward(loss)
                params = {n: p.data for n, p in named.items()}
                grads = {n: p.grad for n, p in named.items() if p.grad is not None}
                new_params, momentum = sgd_step(params, grads, momentum, lrs,
                                                cfg.momentum, cfg.weight_decay)
                for n, p in named.items():
                    p.data = new_params[n]
                losses.append(value)

            row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "lr_head": lr_head, "lr_features": lr_feat}
            last = epoch + 1 == end
            if last or (epoch + 1) % cfg.eval_every == 0:
                row.update(evaluate_model(model, eval_ds).as_dict())
                for name, ds in extra_eval.items():
                    row[f"{name}_mAP"] = evaluate_model(model, ds).mAP
            history.append(row)
            log.info("epoch %d loss %.4f mAP %s", epoch + 1, row["loss"], row.get("mAP"))

            ckpt = Checkpoint(cfg, model.state_dict(), momentum, epoch + 1, num_classes, channels)
            if out_dir:
                ckpt.save(out_dir / "checkpoint.adgc")
                _append_csv(out_dir / "metrics.csv", row)

    if start >= end:
        ckpt = Checkpoint(cfg, model.state_dict(), momentum, start, num_classes, channels)
    return TrainResult(ckpt, history, model)


def _dump_batch(out_dir: Path | None, epoch: int, bi: int, batch) -> str | None:
    if out_dir is None:
        return None
    stem = out_dir / f"nonfinite_e{epoch}_b{bi}"
    adgt.save(stem.with_suffix(".adgt"), batch.x.data)
    stem.with_suffix(".json").write_text(
        json.dumps({"epoch": epoch, "batch": bi, "sample_ids": batch.sample_ids,
                    "labels": batch.y.tolist()})
    )
    return str(stem.with_suffix(".adgt"))


def _append_csv(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------

ABLATION_AXES = ("graph_mode", "aggregation", "map_mode")


def ablation_variants(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    if axis == "graph_mode":
        out = [("baseline", base.replace(model="gap_linear"))]
        out += [(m, base.replace(model="addgcn", graph_mode=m)) for m in GRAPH_MODES]
        return out
    if axis == "aggregation":
        return [(a, base.replace(model="addgcn", aggregation=a)) for a in AGGREGATIONS]
    if axis == "map_mode":
        return [(m, base.replace(model="addgcn", map_mode=m)) for m in MAP_MODES]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def ablate(base: TrainConfig, axis: str, out_csv=None, train_ds=None, eval_ds=None) -> list[dict]:
    """Train every variant along ``axis`` on shared data; one row per variant."""
    variants = ablation_variants(base, axis)
    if train_ds is None or eval_ds is None:
        train_ds, eval_ds = load_datasets(base)
    rows = []
    for name, cfg in variants:
        result = train(cfg.replace(out_dir=""), train_ds, eval_ds)
        rows.append({"axis": axis, "variant": name, **result.final})
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
