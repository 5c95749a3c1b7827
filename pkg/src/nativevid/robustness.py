"""Perturbation sweeps: JPEG-style compression, downscaling and centre cropping."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Sequence

import numpy as np

from .errors import ContractError, ParameterError
from .media import resize_bilinear

# Standard JPEG luminance quantization table (quality 50).
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

DEFAULT_GRID = {"jpeg": (90, 70, 50, 30), "resize": (0.8, 0.6, 0.4, 0.2),
                "crop": (0.05, 0.15, 0.25, 0.35)}
MIN_SIDE = 32


@lru_cache(maxsize=1)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    C[0] /= np.sqrt(2.0)
    return C


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the usual quality rule, clamped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ParameterError(f"JPEG quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50.0) / 100.0), 1, 255)


def jpeg_like(frames: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise DCT quantization of each channel of ``(..., H, W, C)`` frames.

    No chroma subsampling and no entropy coding; the output stays in float
    (clipped to [0, 1]) rather than being re-quantized to 8 bits.
    """
    Q = quant_table(int(quality))
    C = dct_matrix(8)
    x = np.asarray(frames, dtype=np.float64)
    H, W = x.shape[-3], x.shape[-2]
    ph, pw = (-H) % 8, (-W) % 8
    pad = [(0, 0)] * (x.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    xp = np.pad(x * 255.0 - 128.0, pad, mode="edge")
    Hp, Wp = xp.shape[-3], xp.shape[-2]
    lead = xp.shape[:-3]
    blocks = xp.reshape(*lead, Hp // 8, 8, Wp // 8, 8, -1)
    coef = np.einsum("ai,...ixjc,bj->...axbc", C, blocks, C, optimize=True)
    coef = np.round(coef / Q[:, None, :, None]) * Q[:, None, :, None]
    rec = np.einsum("ai,...axbc,bj->...ixjc", C, coef, C, optimize=True)
    rec = rec.reshape(*lead, Hp, Wp, -1)[..., :H, :W, :]
    src = np.asarray(frames).dtype
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0).astype(src if src.kind == "f" else np.float64)


def spatial_scale(frames: np.ndarray, s: float) -> np.ndarray:
    """Bilinear downscale to ``(floor(s H), floor(s W))``."""
    if not 0.0 < s <= 1.0:
        raise ParameterError(f"scale must lie in (0, 1], got {s}")
    H, W = frames.shape[-3], frames.shape[-2]
    h, w = int(np.floor(s * H)), int(np.floor(s * W))
    if min(h, w) < MIN_SIDE:
        raise ParameterError(f"scaling {H}x{W} by {s} leaves {h}x{w}, below {MIN_SIDE} px")
    return resize_bilinear(frames, h, w)


def center_crop(frames: np.ndarray, c: float) -> np.ndarray:
    """Remove a ``c``-fraction border from every side."""
    if not 0.0 <= c < 0.5:
        raise ParameterError(f"crop fraction must lie in [0, 0.5), got {c}")
    H, W = frames.shape[-3], frames.shape[-2]
    bh, bw = int(round(c * H)), int(round(c * W))
    if min(H - 2 * bh, W - 2 * bw) < MIN_SIDE:
        raise ParameterError(f"cropping {c} from {H}x{W} leaves less than {MIN_SIDE} px")
    return frames[..., bh:H - bh, bw:W - bw, :].copy()


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    parameter: float | None = None

    def __post_init__(self):
        if self.kind == "h264":
            raise ParameterError("h264 is reserved: codec-based perturbations are not provided")
        if self.kind not in ("identity", "jpeg", "resize", "crop"):
            raise ParameterError(f"unknown perturbation kind {self.kind!r}")
        p = self.parameter
        if self.kind == "jpeg" and not (p is not None and 1 <= p <= 100):
            raise ParameterError(f"JPEG quality must lie in [1, 100], got {p}")
        if self.kind == "resize" and not (p is not None and 0 < p <= 1):
            raise ParameterError(f"scale must lie in (0, 1], got {p}")
        if self.kind == "crop" and not (p is not None and 0 <= p < 0.5):
            raise ParameterError(f"crop fraction must lie in [0, 0.5), got {p}")

    def transform(self):
        if self.kind == "identity":
            return None
        if self.kind == "jpeg":
            return partial(jpeg_like, quality=int(self.parameter))
        if self.kind == "resize":
            return partial(spatial_scale, s=float(self.parameter))
        return partial(center_crop, c=float(self.parameter))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        t = self.transform()
        return frames.copy() if t is None else t(frames)


def default_grid(kinds: Sequence[str] = ("jpeg", "resize", "crop")) -> list[PerturbationSpec]:
    specs = []
    for k in kinds:
        specs.extend(PerturbationSpec(k, p) for p in DEFAULT_GRID[k])
    return specs


@dataclass
class CurvePoint:
    kind: str
    parameter: float | None
    clean_acc: float
    perturbed_acc: float
    relative_acc: float


def robustness_curve(model, manifest, pre, grid: Sequence[PerturbationSpec] | None = None) -> list[CurvePoint]:
    """Relative accuracy per grid point; the identity point is always first and equals 1."""
    from .detector import predict_records
    from .metrics import accuracy

    if not len(manifest):
        raise ContractError("empty split: nothing to perturb")
    labels = [r.label for r in manifest.records]
    clean = accuracy(predict_records(model, manifest, pre), labels)
    if clean == 0:
        raise ContractError("clean accuracy is 0; relative accuracy is undefined")
    points = [CurvePoint("identity", None, clean, clean, 1.0)]
    for spec in (default_grid() if grid is None else grid):
        if spec.kind == "identity":
            continue
        acc = accuracy(predict_records(model, manifest, pre, transform=spec.transform()), labels)
        points.append(CurvePoint(spec.kind, spec.parameter, clean, acc, acc / clean))
    return points


def write_curve(path, points: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "parameter", "clean_acc", "perturbed_acc", "relative_acc"])
        for p in points:
            w.writerow([p.kind, "" if p.parameter is None else p.parameter,
                        repr(p.clean_acc), repr(p.perturbed_acc), repr(p.relative_acc)])


def read_curve(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(r["kind"], None if r["parameter"] == "" else float(r["parameter"]),
                       float(r["clean_acc"]), float(r["perturbed_acc"]), float(r["relative_acc"]))
            for r in rows]
