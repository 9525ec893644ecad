"""Tensor dumps for inspecting a trained head: activation maps and adjacencies."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import adgt
from . import tensor as T
from .data import FeatureDataset
from .model import AddGcn
from .tensor import Tensor


def _require_addgcn(model) -> AddGcn:
    if not isinstance(model, AddGcn):
        raise TypeError(f"{type(model).__name__} has no attention maps or graphs")
    return model


def _safe(sample_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in sample_id)


def export_maps(model, ds: FeatureDataset, out_dir, batch_size: int = 64) -> Path:
    """Write M (one H x W map per class) and s_m (C,) for every sample.

    The index ``maps.json`` lists one record per (sample, class):
    ``{sample_id, class_id, file, scores_file, s_m}``.
    """
    model = _require_addgcn(model)
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    records = []
    with T.no_grad():
        for batch in ds.batches(batch_size):
            sam = model.sam(batch.x)
            for i, sid in enumerate(batch.sample_ids):
                stem = _safe(sid)
                scores_file = f"maps/{stem}_s_m.adgt"
                adgt.save(out / scores_file, sam.scores.data[i])
                for c in range(sam.maps.shape[1]):
                    rel = f"maps/{stem}_c{c}.adgt"
                    adgt.save(out / rel, sam.maps.data[i, c])
                    records.append({"sample_id": sid, "class_id": c, "file": rel,
                                    "scores_file": scores_file,
                                    "s_m": float(sam.scores.data[i, c])})
    index = out / "maps.json"
    index.write_text(json.dumps(records, indent=1))
    return index


def dump_adjacency(model, x: np.ndarray, sample_id: str, out_dir) -> dict[str, str]:
    """Write the sample's dynamic adjacency and, if not already there, the
    static one. ``x`` is one (D, H, W) feature map. Returns the files written
    or found, keyed ``A_d`` / ``A_s``; a mode without that graph has no key."""
    model = _require_addgcn(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        result = model(Tensor(np.asarray(x)[None]))
    files = {}
    if result.dynamic_adj is not None:
        path = out / f"A_d_{_safe(sample_id)}.adgt"
        adgt.save(path, result.dynamic_adj.data[0])
        files["A_d"] = str(path)
    if model.static_adj is not None:
        path = out / "A_s.adgt"
        if not path.exists():
            adgt.save(path, model.static_adj.data)
        files["A_s"] = str(path)
    index = out / "adjacency.json"
    entries = json.loads(index.read_text()) if index.exists() else {}
    entries[sample_id] = files
    index.write_text(json.dumps(entries, indent=1, sort_keys=True))
    return files
