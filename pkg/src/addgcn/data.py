"""Synthetic feature maps with planted class patterns and biased label co-occurrence.

Label sets come from a pairwise binary model over non-empty label sets,
p(y) ~ exp(h . y + sum_{a<b} J_ab y_a y_b), whose parameters are fitted so that
E[y_a y_b] matches the requested co-occurrence matrix (diagonal = marginals).
Samples are drawn with 10 Gibbs sweeps. Each present class then stamps
``amplitude * prototype`` into a random rectangular block of the map, and
isotropic Gaussian noise is added.

Feature maps are channel-first, (N, D, H, W). On-disk tensors default to the
H x W x D layout and are transposed on load.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.optimize import minimize

from . import adgt
from .errors import ConfigError
from .tensor import Tensor

GIBBS_SWEEPS = 10
MAX_EXACT_CLASSES = 16
MIN_PROTOTYPE_ANGLE_DEG = 10.0
FIT_TOLERANCE = 1e-3


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    channels: int = 32
    height: int = 8
    width: int = 8
    cooccurrence: np.ndarray | None = None  # C x C, diagonal = marginals
    noise_sigma: float = 0.5
    samples: int = 1000
    seed: int = 0
    prototype_seed: int = 0
    amplitude: float = 2.0
    block_min: int = 1
    block_max: int = 3

    def __post_init__(self):
        if self.cooccurrence is None:
            self.cooccurrence = make_cooccurrence(self.num_classes)
        self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)

    def validate(self) -> None:
        c = self.num_classes
        if c < 2 or self.channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("synthetic spec needs >=2 classes and positive extents")
        if self.samples < 0:
            raise ConfigError("sample count must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 1 <= self.block_min <= self.block_max:
            raise ConfigError(f"bad block size range [{self.block_min}, {self.block_max}]")
        if self.block_max > min(self.height, self.width):
            raise ConfigError(
                f"block side {self.block_max} does not fit a {self.height}x{self.width} map"
            )
        co = self.cooccurrence
        if co.shape != (c, c):
            raise ConfigError(f"cooccurrence must be {c}x{c}, got {co.shape}")
        if not np.allclose(co, co.T):
            raise ConfigError("cooccurrence must be symmetric")
        if np.any(co < 0) or np.any(co > 1):
            raise ConfigError("cooccurrence entries must lie in [0, 1]")
        p = np.diag(co)
        lo = np.maximum(0.0, p[:, None] + p[None, :] - 1.0)
        hi = np.minimum(p[:, None], p[None, :])
        off = ~np.eye(c, dtype=bool)
        if np.any(co[off] < lo[off] - 1e-9) or np.any(co[off] > hi[off] + 1e-9):
            raise ConfigError("cooccurrence violates the Frechet bounds of its marginals")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["cooccurrence"] = self.cooccurrence.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def make_cooccurrence(num_classes: int, marginal: float = 0.25,
                      pairs: dict[tuple[int, int], float] | None = None) -> np.ndarray:
    """Independent classes at ``marginal`` except the listed pairs, which get
    the given joint probability."""
    co = np.full((num_classes, num_classes), marginal * marginal)
    np.fill_diagonal(co, marginal)
    for (a, b), joint in (pairs or {}).items():
        co[a, b] = co[b, a] = joint
    return co


# --------------------------------------------------------------------------
# Pairwise label model
# --------------------------------------------------------------------------


@dataclass
class PairwiseLabelModel:
    fields: np.ndarray  # (C,)
    couplings: np.ndarray  # (C, C), symmetric, zero diagonal

    def flipped(self, a: int, b: int, neutral: float = 0.0) -> "PairwiseLabelModel":
        """Same model with the (a, b) coupling mirrored about ``neutral``:
        pairs that tended to co-occur now tend to appear apart, and vice versa."""
        j = self.couplings.copy()
        j[a, b] = j[b, a] = 2.0 * neutral - j[a, b]
        return PairwiseLabelModel(self.fields.copy(), j)

    def exact_moments(self) -> np.ndarray:
        states = _nonempty_states(len(self.fields))
        probs = _state_probs(states, self.fields, self.couplings)
        return states.T @ (states * probs[:, None])


def _nonempty_states(c: int) -> np.ndarray:
    if c > MAX_EXACT_CLASSES:
        raise ConfigError(f"exact label-model fitting supports at most {MAX_EXACT_CLASSES} classes")
    codes = np.arange(1, 2**c)
    return ((codes[:, None] >> np.arange(c)) & 1).astype(np.float64)


def _state_probs(states, h, j) -> np.ndarray:
    energy = states @ h + 0.5 * np.einsum("sa,ab,sb->s", states, j, states)
    energy -= energy.max()
    w = np.exp(energy)
    return w / w.sum()


def fit_label_model(cooccurrence: np.ndarray, l2: float = 1e-6) -> PairwiseLabelModel:
    """Maximum-entropy fit of fields and couplings to the target moments."""
    target = np.asarray(cooccurrence, dtype=np.float64)
    c = target.shape[0]
    states = _nonempty_states(c)
    iu = np.triu_indices(c, 1)
    pair_feats = states[:, iu[0]] * states[:, iu[1]]
    feats = np.hstack([states, pair_feats])
    mu = np.concatenate([np.diag(target), target[iu]])

    def objective(theta):
        logits = feats @ theta
        m = logits.max()
        w = np.exp(logits - m)
        z = w.sum()
        probs = w / z
        value = m + np.log(z) - theta @ mu + 0.5 * l2 * theta @ theta
        grad = feats.T @ probs - mu + l2 * theta
        return value, grad

    res = minimize(objective, np.zeros(feats.shape[1]), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-10})
    j = np.zeros((c, c))
    j[iu] = res.x[c:]
    model = PairwiseLabelModel(res.x[:c], j + j.T)
    gap = np.abs(model.exact_moments() - target).max()
    if gap > FIT_TOLERANCE:
        raise ConfigError(
            f"co-occurrence matrix is not realisable by non-empty label sets "
            f"(best fit misses by {gap:.3g})"
        )
    return model


def flip_label_model(cooccurrence: np.ndarray, a: int, b: int) -> PairwiseLabelModel:
    """Fitted model whose (a, b) coupling is mirrored about the coupling an
    independent pair with the same marginals would get.

    The non-empty constraint alone couples classes slightly, so the neutral
    point is not zero. Mirroring about it makes flipping an independent pair
    an exact no-op.
    """
    co = np.asarray(cooccurrence, dtype=np.float64)
    model = fit_label_model(co)
    neutral = co.copy()
    neutral[a, b] = neutral[b, a] = co[a, a] * co[b, b]
    ref = fit_label_model(neutral) if not np.array_equal(neutral, co) else model
    return model.flipped(a, b, ref.couplings[a, b])


def gibbs_sample(model: PairwiseLabelModel, n: int, rng: np.random.Generator,
                 sweeps: int = GIBBS_SWEEPS) -> np.ndarray:
    """Draw ``n`` non-empty label vectors with a fixed number of Gibbs sweeps."""
    h, j = model.fields, model.couplings
    c = len(h)
    marg = 1.0 / (1.0 + np.exp(-h))
    y = (rng.random((n, c)) < marg).astype(np.float64)
    empty = y.sum(axis=1) == 0
    y[np.flatnonzero(empty), rng.integers(0, c, size=int(empty.sum()))] = 1.0
    for _ in range(sweeps):
        for k in range(c):
            field_k = h[k] + y @ j[:, k] - y[:, k] * j[k, k]
            p = 1.0 / (1.0 + np.exp(-field_k))
            draw = rng.random(n) < p
            others = y.sum(axis=1) - y[:, k]
            y[:, k] = np.where(others == 0, 1.0, draw)
    return y.astype(np.uint8)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def make_prototypes(num_classes: int, channels: int, seed: int, max_tries: int = 1000) -> np.ndarray:
    """Unit vectors with pairwise angles above the minimum separation."""
    rng = np.random.default_rng([seed, 0])
    cos_max = np.cos(np.deg2rad(MIN_PROTOTYPE_ANGLE_DEG))
    for _ in range(max_tries):
        p = rng.normal(size=(num_classes, channels))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        g = p @ p.T
        np.fill_diagonal(g, -1.0)
        if g.max() < cos_max:
            return p.astype(np.float32)
    raise ConfigError(
        f"could not draw {num_classes} prototypes in R^{channels} separated by "
        f">{MIN_PROTOTYPE_ANGLE_DEG} degrees"
    )


def render_sample(labels: np.ndarray, prototypes: np.ndarray, spec: SyntheticSpec,
                  rng: np.random.Generator) -> np.ndarray:
    """One (D, H, W) feature map with a block per present class plus noise."""
    d, hh, ww = spec.channels, spec.height, spec.width
    x = np.zeros((d, hh, ww), dtype=np.float64)
    for c in np.flatnonzero(labels):
        bh, bw = rng.integers(spec.block_min, spec.block_max + 1, size=2)
        i0 = rng.integers(0, hh - bh + 1)
        j0 = rng.integers(0, ww - bw + 1)
        x[:, i0:i0 + bh, j0:j0 + bw] += spec.amplitude * prototypes[c][:, None, None]
    if spec.noise_sigma > 0:
        x += rng.normal(0.0, spec.noise_sigma, size=x.shape)
    return x.astype(np.float32)


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class FeatureMapBatch:
    x: Tensor  # (B, D, H, W)
    y: np.ndarray  # (B, C) uint8
    sample_ids: list[str]


@dataclass
class FeatureDataset:
    x: np.ndarray  # (N, D, H, W) float32
    y: np.ndarray  # (N, C) uint8
    ids: list[str]
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.x) != len(self.ids):
            raise ValueError("x, y and ids must have the same length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.y.shape[1]

    def index_of(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx], self.spec)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[FeatureMapBatch]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield FeatureMapBatch(Tensor(self.x[idx]), self.y[idx], [self.ids[i] for i in idx])


def _generate(spec: SyntheticSpec, model: PairwiseLabelModel, id_prefix: str) -> FeatureDataset:
    protos = make_prototypes(spec.num_classes, spec.channels, spec.prototype_seed)
    label_rng = np.random.default_rng([spec.seed, 1])
    render_rng = np.random.default_rng([spec.seed, 2])
    y = gibbs_sample(model, spec.samples, label_rng)
    x = np.empty((spec.samples, spec.channels, spec.height, spec.width), dtype=np.float32)
    for i in range(spec.samples):
        x[i] = render_sample(y[i], protos, spec, render_rng)
    ids = [f"{id_prefix}{spec.seed}-{i:06d}" for i in range(spec.samples)]
    return FeatureDataset(x, y, ids, spec.to_json())


def generate(spec: SyntheticSpec) -> FeatureDataset:
    """Deterministic synthetic dataset for ``spec``."""
    spec.validate()
    return _generate(spec, fit_label_model(spec.cooccurrence), "syn")


def make_biased_eval_split(spec: SyntheticSpec, flip: tuple[int, int]) -> FeatureDataset:
    """Like :func:`generate`, but with the ``flip`` pair's coupling mirrored (see
    :func:`flip_label_model`)."""
    spec.validate()
    a, b = flip
    if not (0 <= a < spec.num_classes and 0 <= b < spec.num_classes) or a == b:
        raise ConfigError(f"invalid flip pair {flip} for {spec.num_classes} classes")
    model = flip_label_model(spec.cooccurrence, a, b)
    return _generate(spec, model, f"flip{a}_{b}-")


def empirical_cooccurrence(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.T @ y / max(len(y), 1)


# --------------------------------------------------------------------------
# On-disk index
# --------------------------------------------------------------------------

LAYOUTS = ("HWD", "DHW")


def save_feature_dataset(ds: FeatureDataset, directory, layout: str = "HWD") -> Path:
    """Write one ADGT file per sample plus ``index.json``; returns the index path."""
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}")
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, sid in enumerate(ds.ids):
        rel = f"tensors/{sid}.adgt"
        arr = ds.x[i] if layout == "DHW" else np.transpose(ds.x[i], (1, 2, 0))
        adgt.save(directory / rel, arr)
        samples.append({"id": sid, "tensor_file": rel, "labels": [int(v) for v in ds.y[i]]})
    spec = dict(ds.spec)
    if len(ds):
        spec.setdefault("num_classes", int(ds.y.shape[1]))
        d, h, w = ds.x.shape[1:]
        spec.setdefault("channels", int(d))
        spec.setdefault("height", int(h))
        spec.setdefault("width", int(w))
    index = {"spec": spec, "layout": layout, "samples": samples}
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=1))
    return path


def load_feature_dataset(index_path) -> FeatureDataset:
    """Load an index written by :func:`save_feature_dataset` (or by hand)."""
    index_path = Path(index_path)
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{index_path}: invalid JSON ({exc})") from None
    spec = index.get("spec", {})
    layout = index.get("layout", "HWD")
    if layout not in LAYOUTS:
        raise ValueError(f"{index_path}: unknown layout {layout!r}")
    samples = index.get("samples", [])
    c = spec.get("num_classes")
    dims = tuple(spec.get(k) for k in ("channels", "height", "width"))
    if not samples:
        shape = (0,) + (dims if all(dims) else (0, 0, 0))
        return FeatureDataset(np.zeros(shape, np.float32), np.zeros((0, c or 0), np.uint8), [], spec)

    xs, ys, ids = [], [], []
    for rec in samples:
        arr = adgt.load(index_path.parent / rec["tensor_file"])
        if arr.ndim != 3:
            raise ValueError(f"{rec['tensor_file']}: expected a rank-3 tensor, got shape {arr.shape}")
        if layout == "HWD":
            arr = np.transpose(arr, (2, 0, 1))
        if all(dims) and arr.shape != dims:
            raise ValueError(
                f"{rec['tensor_file']}: shape (D,H,W)={arr.shape} does not match declared {dims}"
            )
        if xs and arr.shape != xs[0].shape:
            raise ValueError(f"{rec['tensor_file']}: shape {arr.shape} differs from {xs[0].shape}")
        labels = np.asarray(rec["labels"])
        if c is not None and labels.shape != (c,):
            raise ValueError(f"sample {rec['id']}: {labels.shape[0]} labels, expected {c}")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError(f"sample {rec['id']}: labels must be binary")
        xs.append(np.ascontiguousarray(arr))
        ys.append(labels.astype(np.uint8))
        ids.append(str(rec["id"]))
    return FeatureDataset(np.stack(xs), np.stack(ys), ids, spec)


def iter_index_batches(index_path, batch_size: int) -> Iterator[FeatureMapBatch]:
    yield from load_feature_dataset(index_path).batches(batch_size)

