"""Multi-label evaluation: mAP and per-class / overall precision, recall, F1.

Scores are logits. In the "All" setting a label is predicted when
sigmoid(score) > 0.5, i.e. score > 0. In the "Top-3" setting the three
highest-scoring classes of each sample are predicted (optionally also
requiring score > 0).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

PRF_KEYS = ("CP", "CR", "CF1", "OP", "OR", "OF1")


@dataclass(frozen=True)
class MetricsReport:
    mAP: float
    CP: float
    CR: float
    CF1: float
    OP: float
    OR: float
    OF1: float
    CP_top3: float
    CR_top3: float
    CF1_top3: float
    OP_top3: float
    OR_top3: float
    OF1_top3: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False)

    def csv_row(self, header: bool = False, **extra) -> str:
        row = {**extra, **self.as_dict()}
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores, labels.astype(bool)


def average_precision(scores, labels) -> float | None:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score, ties broken by ascending sample index.
    Returns None when there are no positives (the class is excluded).
    """
    scores, labels = _check(scores, labels)
    npos = int(labels.sum())
    if npos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    rel = labels[order]
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum((hits / ranks)[rel]) / npos)


def mean_average_precision(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else 0.0


def predictions(scores, top3: bool = False, top3_threshold: bool = False, k: int = 3) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not top3:
        return scores > 0
    pred = np.zeros(scores.shape, dtype=bool)
    if scores.shape[0]:
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        np.put_along_axis(pred, top, True, axis=1)
    if top3_threshold:
        pred &= scores > 0
    return pred


def prf_suite(scores, labels, top3: bool = False, top3_threshold: bool = False) -> dict[str, float]:
    """CP, CR, CF1, OP, OR, OF1.

    Per-class averages skip classes without positives. A class (or the whole
    split) with no predicted positives has precision 0.
    """
    scores, labels = _check(scores, labels)
    pred = predictions(scores, top3, top3_threshold)
    tp = (pred & labels).sum(axis=0).astype(np.float64)
    npred = pred.sum(axis=0).astype(np.float64)
    npos = labels.sum(axis=0).astype(np.float64)
    valid = npos > 0
    if valid.any():
        prec_c = np.divide(tp, npred, out=np.zeros_like(tp), where=npred > 0)
        rec_c = np.divide(tp, npos, out=np.zeros_like(tp), where=npos > 0)
        cp, cr = float(prec_c[valid].mean()), float(rec_c[valid].mean())
    else:
        cp = cr = 0.0
    op = float(tp.sum() / npred.sum()) if npred.sum() > 0 else 0.0
    orc = float(tp.sum() / npos.sum()) if npos.sum() > 0 else 0.0
    return {"CP": cp, "CR": cr, "CF1": _f1(cp, cr), "OP": op, "OR": orc, "OF1": _f1(op, orc)}


def evaluate(scores, labels, top3_threshold: bool = False) -> MetricsReport:
    full = prf_suite(scores, labels)
    top = prf_suite(scores, labels, top3=True, top3_threshold=top3_threshold)
    return MetricsReport(
        mAP=mean_average_precision(scores, labels),
        **full,
        **{f"{k}_top3": v for k, v in top.items()},
    )


def per_class_ap(scores, labels) -> list[float | None]:
    scores, labels = _check(scores, labels)
    return [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]


def read_score_jsonl(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Load ``{sample_id, scores, labels}`` lines written by the eval command."""
    ids, scores, labels = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec["sample_id"]))
                scores.append(rec["scores"])
                labels.append(rec["labels"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed score record ({exc})") from None
    return ids, np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def write_score_jsonl(path, ids, scores, labels) -> None:
    with open(path, "w") as fh:
        for sid, s, y in zip(ids, np.asarray(scores), np.asarray(labels)):
            rec = {"sample_id": sid, "scores": [float(v) for v in s], "labels": [int(v) for v in y]}
            fh.write(json.dumps(rec) + "\n")
