"""Detection metrics in percent, with "generated" as the positive class."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

THRESHOLD = 0.5


def _as_labels(labels) -> np.ndarray:
    out = []
    for l in labels:
        if isinstance(l, str):
            if l not in ("real", "generated"):
                raise ContractError(f"unknown label {l!r}")
            out.append(l == "generated")
        else:
            out.append(bool(l))
    return np.asarray(out, dtype=bool)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _as_labels(labels)
    if len(s) == 0:
        raise ContractError("metrics need at least one sample")
    if len(s) != len(y):
        raise ContractError(f"{len(s)} scores but {len(y)} labels")
    return s, y


def confusion(scores, labels, threshold: float = THRESHOLD) -> dict:
    s, y = _prepare(scores, labels)
    pred = s >= threshold
    return {"tp": int(np.sum(pred & y)), "fp": int(np.sum(pred & ~y)),
            "tn": int(np.sum(~pred & ~y)), "fn": int(np.sum(~pred & y))}


def accuracy(scores, labels, threshold: float = THRESHOLD) -> float:
    c = confusion(scores, labels, threshold)
    return 100.0 * (c["tp"] + c["tn"]) / sum(c.values())


def recall(scores, labels, threshold: float = THRESHOLD) -> float:
    c = confusion(scores, labels, threshold)
    if c["tp"] + c["fn"] == 0:
        raise ContractError("recall needs at least one generated sample")
    return 100.0 * c["tp"] / (c["tp"] + c["fn"])


def precision(scores, labels, threshold: float = THRESHOLD) -> float:
    c = confusion(scores, labels, threshold)
    return 0.0 if c["tp"] + c["fp"] == 0 else 100.0 * c["tp"] / (c["tp"] + c["fp"])


def f1(scores, labels, threshold: float = THRESHOLD) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    c = confusion(scores, labels, threshold)
    denom = 2 * c["tp"] + c["fp"] + c["fn"]
    return 0.0 if c["tp"] == 0 or denom == 0 else 100.0 * 2 * c["tp"] / denom


def balanced_accuracy(scores, labels, threshold: float = THRESHOLD) -> float:
    c = confusion(scores, labels, threshold)
    if c["tp"] + c["fn"] == 0 or c["tn"] + c["fp"] == 0:
        raise ContractError("balanced accuracy needs both classes")
    tpr = c["tp"] / (c["tp"] + c["fn"])
    tnr = c["tn"] / (c["tn"] + c["fp"])
    return 100.0 * 0.5 * (tpr + tnr)


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive; ties keep input order."""
    s, y = _prepare(scores, labels)
    if not y.any():
        raise ContractError("average precision is undefined without generated samples")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return 100.0 * float(prec[hits].mean())


def auc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outranks a negative (ties count 1/2)."""
    s, y = _prepare(scores, labels)
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ContractError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - P * (P + 1) / 2.0
    return 100.0 * u / (P * N)


# -- reports -------------------------------------------------------------------
@dataclass
class SubsetMetrics:
    generator: str
    n_generated: int
    n_real: int
    ACC: float | None = None
    Recall: float | None = None
    F1: float | None = None
    AP: float | None = None
    AUC: float | None = None
    bACC: float | None = None
    note: str = ""

    METRICS = ("ACC", "Recall", "F1", "AP", "AUC", "bACC")


def subset_metrics(generator: str, scores, labels, threshold: float = THRESHOLD) -> SubsetMetrics:
    s, y = _prepare(scores, labels)
    out = SubsetMetrics(generator, int(y.sum()), int((~y).sum()))
    if y.any():
        out.AP = average_precision(s, y)
    if y.any() and (~y).any():
        out.ACC = accuracy(s, y, threshold)
        out.Recall = recall(s, y, threshold)
        out.F1 = f1(s, y, threshold)
        out.AUC = auc(s, y)
        out.bACC = balanced_accuracy(s, y, threshold)
    else:
        out.note = "threshold-free metrics only"
    return out


@dataclass
class EvalReport:
    subsets: list = field(default_factory=list)
    mACC: float | None = None
    mAP: float | None = None
    overall_ACC: float | None = None
    overall_Recall: float | None = None
    threshold: float = THRESHOLD
    exclude_from_mean: list = field(default_factory=list)

    def subset(self, generator: str) -> SubsetMetrics:
        for s in self.subsets:
            if s.generator == generator:
                return s
        raise KeyError(generator)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["subsets"] = [SubsetMetrics(**s) for s in d.get("subsets", [])]
        return cls(**d)

    def rows(self) -> list[tuple]:
        rows = []
        for s in self.subsets:
            for m in SubsetMetrics.METRICS:
                v = getattr(s, m)
                if v is not None:
                    rows.append((s.generator, m, v))
        for name in ("mACC", "mAP"):
            if getattr(self, name) is not None:
                rows.append(("mean", name, getattr(self, name)))
        for name, key in (("ACC", "overall_ACC"), ("Recall", "overall_Recall")):
            if getattr(self, key) is not None:
                rows.append(("overall", name, getattr(self, key)))
        return rows

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["subset", "metric", "value"])
                for row in self.rows():
                    w.writerow([row[0], row[1], repr(float(row[2]))])

    @classmethod
    def load(cls, json_path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(json_path).read_text()))


def paired_indices(records: Sequence, generator: str) -> list[int]:
    """Fakes of ``generator`` plus the reals paired with it (own name or shared pool)."""
    return [i for i, r in enumerate(records)
            if (r.label == "generated" and r.generator == generator)
            or (r.label == "real" and r.generator in (generator, ""))]


def report_from_scores(records: Sequence, scores, exclude_from_mean: Sequence[str] = (),
                       threshold: float = THRESHOLD) -> EvalReport:
    """Per-generator metrics on each fake subset and its paired reals."""
    records = list(records)
    s = np.asarray(scores, dtype=np.float64)
    if not records:
        raise ContractError("empty split: nothing to evaluate")
    if len(s) != len(records):
        raise ContractError(f"{len(s)} scores for {len(records)} records")
    labels = [r.label for r in records]
    gens = []
    for r in records:
        if r.label == "generated" and r.generator not in gens:
            gens.append(r.generator)
    report = EvalReport(threshold=threshold, exclude_from_mean=list(exclude_from_mean))
    for g in gens:
        idx = paired_indices(records, g)
        report.subsets.append(subset_metrics(g, s[idx], [labels[i] for i in idx], threshold))
    counted = [m for m in report.subsets if m.generator not in report.exclude_from_mean]
    accs = [m.ACC for m in counted if m.ACC is not None]
    aps = [m.AP for m in counted if m.AP is not None]
    report.mACC = float(np.mean(accs)) if accs else None
    report.mAP = float(np.mean(aps)) if aps else None
    report.overall_ACC = accuracy(s, labels, threshold)
    y = _as_labels(labels)
    report.overall_Recall = recall(s, y, threshold) if y.any() else None
    return report


def evaluate(model, manifest, pre=None, exclude_from_mean: Sequence[str] = (),
             threshold: float = THRESHOLD) -> tuple[EvalReport, np.ndarray]:
    """Score every record of ``manifest`` with ``model`` (a DetectorModel or checkpoint path)."""
    from .detector import DetectorModel, predict_records
    from .preprocess import Preprocess

    if not len(manifest):
        raise ContractError("empty split: nothing to evaluate")
    if not isinstance(model, DetectorModel):
        model, meta = DetectorModel.load(model)
        if pre is None and meta.get("preprocess"):
            pre = Preprocess.from_dict(meta["preprocess"])
    pre = pre or Preprocess()
    scores = predict_records(model, manifest, pre)
    return report_from_scores(manifest.records, scores, exclude_from_mean, threshold), scores
