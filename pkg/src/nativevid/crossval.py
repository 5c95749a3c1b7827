"""
Cross-generator analysis: recall matrix, symmetric distance, a planar
non-metric MDS embedding and the quality/generalization correlation.

M[i, j] is the recall (percent) of a detector trained on generator i's
fakes and tested on generator j's fakes.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class CrossValMatrix:
    names: list
    M: np.ndarray                      # percent
    valid: list | None = None          # per-row training success

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        n = len(self.names)
        if self.M.shape != (n, n):
            raise ContractError(f"matrix shape {self.M.shape} does not match {n} names")
        if len(set(self.names)) != n:
            raise ContractError("generator names must be unique")
        if self.valid is None:
            self.valid = [bool(np.all(np.isfinite(row))) for row in self.M]
        finite = self.M[np.isfinite(self.M)]
        if np.any(finite < 0) or np.any(finite > 100):
            raise ContractError("recall entries must lie in [0, 100]")

    def require_valid(self) -> None:
        bad = [n for n, ok in zip(self.names, self.valid) if not ok]
        if bad:
            raise ContractError(f"matrix rows without a trained detector: {bad}")

    def to_dict(self) -> dict:
        return {"names": list(self.names), "M": self.M.tolist(), "valid": list(self.valid)}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossValMatrix":
        M = np.array([[np.nan if v is None else v for v in row] for row in d["M"]], dtype=np.float64)
        return cls(list(d["names"]), M, d.get("valid"))

    def save(self, path) -> None:
        d = self.to_dict()
        d["M"] = [[None if not np.isfinite(v) else v for v in row] for row in self.M.tolist()]
        Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_matrix(path) -> CrossValMatrix:
    """Read a matrix from JSON ({names, M}) or CSV (header of names, one row per trained-on name)."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        with open(p, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        names = [c.strip() for c in rows[0][1:]]
        body = rows[1:]
        if [r[0].strip() for r in body] != names:
            raise ContractError("CSV row labels must repeat the column names in order")
        return CrossValMatrix(names, [[float(v) for v in r[1:]] for r in body])
    return CrossValMatrix.from_dict(json.loads(p.read_text()))


def distance(M) -> np.ndarray:
    """``d(i, j) = 1 - (M[i, j] + M[j, i]) / 200`` on percent recalls."""
    m = np.asarray(M.M if isinstance(M, CrossValMatrix) else M, dtype=np.float64) / 100.0
    return 1.0 - 0.5 * (m + m.T)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ContractError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ContractError("pearson is undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


# -- non-metric MDS ------------------------------------------------------------
def pava(y: np.ndarray) -> np.ndarray:
    """Least-squares non-decreasing fit to ``y`` (pool adjacent violators)."""
    vals, wts, sizes = [], [], []
    for v in np.asarray(y, dtype=np.float64):
        vals.append(v)
        wts.append(1.0)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w = wts[-2] + wts[-1]
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w
            n = sizes[-2] + sizes[-1]
            del vals[-1], wts[-1], sizes[-1]
            vals[-1], wts[-1], sizes[-1] = v, w, n
    return np.repeat(vals, sizes)


def _pair_dist(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _disparities(dist_u: np.ndarray, order: np.ndarray) -> np.ndarray:
    dhat = np.empty_like(dist_u)
    dhat[order] = pava(dist_u[order])
    # normalize so the disparities keep the configuration scale
    norm = np.sqrt(np.sum(dist_u ** 2) / max(np.sum(dhat ** 2), 1e-300))
    return dhat * norm


def stress1(X: np.ndarray, D: np.ndarray) -> float:
    """Kruskal stress-1 of configuration ``X`` against the rank order of ``D``."""
    iu = np.triu_indices(len(D), 1)
    dist = _pair_dist(np.asarray(X, dtype=np.float64))[iu]
    order = np.argsort(np.asarray(D)[iu], kind="stable")
    dhat = _disparities(dist, order)
    denom = np.sum(dist ** 2)
    return 0.0 if denom == 0 else float(np.sqrt(np.sum((dist - dhat) ** 2) / denom))


@dataclass
class Embedding2D:
    names: list
    points: np.ndarray
    stress: float
    log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "points": np.asarray(self.points).tolist(),
                "stress": self.stress, "log": list(self.log)}

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["name", "x", "y"])
                for n, p in zip(self.names, self.points):
                    w.writerow([n, repr(float(p[0])), repr(float(p[1]))])


def _smacof_run(D, X, max_iter, tol):
    n = len(D)
    iu = np.triu_indices(n, 1)
    order = np.argsort(D[iu], kind="stable")
    history = []
    prev = np.inf
    for _ in range(max_iter):
        dist = _pair_dist(X)
        du = dist[iu]
        dhat_u = _disparities(du, order)
        s = float(np.sqrt(np.sum((du - dhat_u) ** 2) / max(np.sum(du ** 2), 1e-300)))
        if s > prev:
            break
        history.append(s)
        if prev - s < tol:
            break
        prev = s
        dhat = np.zeros((n, n))
        dhat[iu] = dhat_u
        dhat = dhat + dhat.T
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, dhat / dist, 0.0)
        B = -ratio
        B[np.diag_indices(n)] = ratio.sum(axis=1)
        X = B @ X / n
    return X, history


def nmds(D, dim: int = 2, seed: int = 0, max_iter: int = 300, tol: float = 1e-9, n_init: int = 8,
         names: Sequence[str] | None = None) -> Embedding2D:
    """SMACOF with isotonic disparities; keeps the lowest-stress restart.

    The returned points are centred and rescaled so, in least squares, their
    distances match ``D``. The log holds the stress of every iteration of the
    chosen restart.
    """
    D = np.asarray(D, dtype=np.float64)
    n = len(D)
    if n < 2:
        raise ContractError("non-metric MDS needs at least two objects")
    if D.shape != (n, n) or not np.allclose(D, D.T):
        raise ContractError("distance matrix must be square and symmetric")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, r])
        X0 = rng.standard_normal((n, dim))
        X, hist = _smacof_run(D, X0 - X0.mean(axis=0), max_iter, tol)
        if hist and (best is None or hist[-1] < best[1][-1]):
            best = (X, hist)
    X, hist = best
    X = X - X.mean(axis=0)
    iu = np.triu_indices(n, 1)
    du = _pair_dist(X)[iu]
    if np.sum(du ** 2) > 0:
        X = X * (np.sum(du * D[iu]) / np.sum(du ** 2))
    return Embedding2D(list(names) if names is not None else [str(i) for i in range(n)], X,
                       stress1(X, D), hist)


# -- correlation -----------------------------------------------------------
@dataclass
class CorrelationReport:
    names: list
    quality: list
    mean_cross_recall: list
    rho: float

    def to_dict(self) -> dict:
        return asdict(self)


def mean_cross_recall(M) -> np.ndarray:
    """Row means of ``M`` without the diagonal."""
    m = np.asarray(M.M if isinstance(M, CrossValMatrix) else M, dtype=np.float64)
    n = len(m)
    if n < 2:
        raise ContractError("cross recall needs at least two generators")
    return (m.sum(axis=1) - np.diag(m)) / (n - 1)


def correlate(matrix: CrossValMatrix, quality: Sequence[float]) -> CorrelationReport:
    matrix.require_valid()
    cross = mean_cross_recall(matrix)
    return CorrelationReport(list(matrix.names), [float(q) for q in quality], cross.tolist(),
                             pearson(quality, cross))


# -- building the matrix ------------------------------------------------------
def build_matrix(manifest, train_config, model_config=None, eval_pre=None, reals_seed: int = 0,
                 out_dir=None) -> tuple[CrossValMatrix, list]:
    """Train one detector per generator on its fakes plus a shared real set.

    The real set is the same for every row and sized to the fake subset.
    Returns the recall matrix on the test fakes and the per-generator quality
    read from the manifest.
    """
    from .detector import predict_records, train
    from .media import DatasetManifest

    names = manifest.generators()
    if not names:
        raise ContractError("empty split: manifest has no generated records")
    root = manifest.root
    by_split = {s: manifest.split(s).records for s in ("train", "val", "test")}

    def reals(split, k):
        pool = sorted((r for r in by_split[split] if r.label == "real"), key=lambda r: r.id)
        if len(pool) < k:
            raise ContractError(f"{split} split holds {len(pool)} reals, {k} needed")
        idx = np.sort(np.random.default_rng([reals_seed, len(split)]).permutation(len(pool))[:k])
        return [pool[i] for i in idx]

    def fakes(split, g):
        return [r for r in by_split[split] if r.label == "generated" and r.generator == g]

    n = len(names)
    M = np.full((n, n), np.nan)
    valid = []
    pre = eval_pre or train_config.preprocess
    tests = {g: fakes("test", g) for g in names}
    for i, g in enumerate(names):
        tr = fakes("train", g)
        va = fakes("val", g)
        try:
            result = train(DatasetManifest(tr + reals("train", len(tr)), root),
                           DatasetManifest(va + reals("val", len(va)), root),
                           train_config, model_config,
                           out_dir=None if out_dir is None else Path(out_dir) / f"detector_{g}")
        except Exception as exc:                                # row is marked invalid, not fatal
            log.warning("training on %s failed: %s", g, exc)
            valid.append(False)
            continue
        for j, h in enumerate(names):
            s = predict_records(result.model, DatasetManifest(tests[h], root), pre)
            M[i, j] = 100.0 * float(np.mean(s >= 0.5))
        valid.append(True)
        log.info("row %s: %s", g, np.round(M[i], 1).tolist())
    quality = []
    for g in names:
        qs = [r.quality for r in manifest.records if r.generator == g and r.quality is not None]
        quality.append(float(np.mean(qs)) if qs else float("nan"))
    return CrossValMatrix(names, M, valid), quality
