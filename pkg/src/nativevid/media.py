"""Video containers, dataset manifests, resolution selection and frame sampling."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (ContractError, InfeasibleResolutionError, IntegrityError, ManifestError,
                     VocabularyError)

NVT_MAGIC = b"NVT1"
LABELS = ("real", "generated")
SPLITS = ("train", "val", "test")


@dataclass
class VideoTensor:
    """Frame-major ``(T, H, W, C)`` intensities in [0, 1] plus the frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4 or min(self.frames.shape[:3]) < 1:
            raise ContractError(f"video must be (T, H, W, C) with T, H, W >= 1, got {self.frames.shape}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class ResolutionPolicy:
    min_pixels: int = 224 * 224
    max_pixels: int = 720 * 720
    factor: int = 14

    def __post_init__(self):
        if not (0 < self.min_pixels <= self.max_pixels) or self.factor < 1:
            raise ContractError(f"invalid resolution policy {self}")


def smart_resize(h: int, w: int, policy: ResolutionPolicy = ResolutionPolicy()) -> tuple[int, int]:
    """Largest factor-aligned (h', w') near the input aspect inside the pixel budget.

    Sides are first rounded to the nearest multiple of ``factor``; if the
    area then falls outside ``[min_pixels, max_pixels]`` both sides are
    rescaled by a common ratio and floored (too large) or ceiled (too
    small) onto the factor grid.
    """
    if h < 1 or w < 1:
        raise ContractError(f"smart_resize needs positive sides, got ({h}, {w})")
    f = policy.factor
    hb = max(f, round(h / f) * f)
    wb = max(f, round(w / f) * f)
    if hb * wb > policy.max_pixels:
        beta = math.sqrt(h * w / policy.max_pixels)
        hb = math.floor(h / beta / f) * f
        wb = math.floor(w / beta / f) * f
    elif hb * wb < policy.min_pixels:
        beta = math.sqrt(policy.min_pixels / (h * w))
        hb = math.ceil(h * beta / f) * f
        wb = math.ceil(w * beta / f) * f
    if hb < f or wb < f or not (policy.min_pixels <= hb * wb <= policy.max_pixels):
        raise InfeasibleResolutionError(
            f"no {f}-aligned resolution for ({h}, {w}) within "
            f"[{policy.min_pixels}, {policy.max_pixels}] pixels")
    return hb, wb


def decimate_indices(n_frames: int, source_fps: float, target_fps: float) -> np.ndarray:
    """Nearest source index for each target-rate timestamp."""
    if n_frames < 1 or source_fps <= 0 or target_fps <= 0:
        raise ContractError("decimation needs a non-empty video and positive frame rates")
    n_out = max(1, int(math.floor(n_frames * target_fps / source_fps + 1e-9)))
    idx = np.floor(np.arange(n_out) * (source_fps / target_fps) + 0.5).astype(np.int64)
    return np.minimum(idx, n_frames - 1)


def resample_frames(frames: np.ndarray, source_fps: float, target_fps: float = 2.0, T: int = 8,
                    mode: str = "center", seed: int | None = None) -> np.ndarray:
    """Decimate to ``target_fps`` and pick ``T`` consecutive frames.

    ``mode="center"`` takes the centred window; ``mode="random"`` draws a
    uniformly random start from ``seed``. Clips shorter than ``T`` are
    completed by repeating their last frame.
    """
    if len(frames) == 0:
        raise ContractError("cannot resample an empty video")
    if mode not in ("center", "random"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    idx = decimate_indices(len(frames), source_fps, target_fps)
    n = len(idx)
    if n >= T:
        if mode == "center":
            start = (n - T) // 2
        else:
            start = int(np.random.default_rng(seed).integers(0, n - T + 1))
        idx = idx[start:start + T]
    else:
        idx = np.concatenate([idx, np.full(T - n, idx[-1])])
    return frames[idx]


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) triangle-filter matrix with half-pixel centres.

    Downscaling widens the triangle by the scale ratio so the filter also
    acts as an anti-alias prefilter; upscaling is plain linear
    interpolation with edge clamping.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centers[:, None]) / support)
    # renormalizing the truncated rows is what clamps to the edge
    w /= w.sum(axis=1, keepdims=True)
    return w


def resize_bilinear(frames: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize every frame of ``(T, H, W, C)`` to ``(h, w)``."""
    if h < 1 or w < 1:
        raise ContractError(f"target size must be positive, got ({h}, {w})")
    T, H, W, C = frames.shape
    if (H, W) == (h, w):
        return frames.copy()
    dtype = frames.dtype if frames.dtype.kind == "f" else np.float32
    x = frames.astype(dtype, copy=False)
    if H != h:
        wh = _axis_weights(H, h).astype(dtype)
        x = np.matmul(wh, x.reshape(T, H, W * C)).reshape(T, h, W, C)
    if W != w:
        ww = _axis_weights(W, w).astype(dtype)
        x = np.matmul(ww, x.reshape(T * h, W, C)).reshape(T, h, w, C)
    return np.clip(x, 0.0, 1.0)


def center_crop_box(H: int, W: int, h: int, w: int) -> tuple[int, int]:
    return (H - h) // 2, (W - w) // 2


# -- .nvt container -----------------------------------------------------------
def write_nvt(path, video: VideoTensor) -> None:
    """Quantize to 8 bits and write ``NVT1 | u32 len | json header | payload``."""
    q = np.clip(np.round(video.frames * 255.0), 0, 255).astype(np.uint8)
    payload = np.ascontiguousarray(q).tobytes()
    T, H, W, C = q.shape
    header = json.dumps({"T": T, "H": H, "W": W, "C": C, "fps": video.fps,
                         "crc32": zlib.crc32(payload)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(NVT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_nvt_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(4) != NVT_MAGIC:
        raise IntegrityError(f"{path}: bad magic, not an NVT1 container")
    (n,) = struct.unpack("<I", fh.read(4))
    try:
        header = json.loads(fh.read(n))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from exc
    for key in ("T", "H", "W", "C", "fps"):
        if key not in header:
            raise IntegrityError(f"{path}: header lacks {key!r}")
    return header


def read_nvt_uint8(path) -> tuple[np.ndarray, float]:
    """Raw 8-bit frames and fps, with length and checksum verification."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    shape = (header["T"], header["H"], header["W"], header["C"])
    if len(payload) != int(np.prod(shape)):
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, header implies {int(np.prod(shape))}")
    if "crc32" in header and zlib.crc32(payload) != header["crc32"]:
        raise IntegrityError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape), float(header["fps"])


def read_nvt(path, dtype=np.float32) -> VideoTensor:
    q, fps = read_nvt_uint8(path)
    return VideoTensor(q.astype(dtype) / dtype(255.0), fps)


# -- manifests ----------------------------------------------------------------
@dataclass
class VideoRecord:
    id: str
    path: str
    label: str
    generator: str
    split: str
    width: int
    height: int
    fps: float
    frame_count: int
    quality: float | None = None

    @property
    def is_generated(self) -> bool:
        return self.label == "generated"

    def to_json(self) -> dict:
        d = asdict(self)
        if d["quality"] is None:
            del d["quality"]
        return d


@dataclass
class DatasetManifest:
    records: list[VideoRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self.records)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == name], self.root)

    def filter(self, pred) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if pred(r)], self.root)

    def generators(self) -> list[str]:
        """Generator names of the generated records, in first-seen order."""
        seen = []
        for r in self.records:
            if r.is_generated and r.generator not in seen:
                seen.append(r.generator)
        return seen

    def resolve(self, record: VideoRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


_FIELDS = {"id": str, "path": str, "label": str, "generator": str, "split": str,
           "width": int, "height": int, "fps": float, "frame_count": int}


def parse_record(obj: dict, line: int | None = None) -> VideoRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", line)
    kwargs = {}
    for name, kind in _FIELDS.items():
        if name not in obj:
            raise ManifestError(f"missing field {name!r}", line)
        value = obj[name]
        if kind is str and not isinstance(value, str):
            raise ManifestError(f"field {name!r} must be a string", line)
        if kind in (int, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ManifestError(f"field {name!r} must be numeric", line)
        kwargs[name] = kind(value)
    if kwargs["label"] not in LABELS:
        raise VocabularyError(f"label {kwargs['label']!r} not in {LABELS}", line)
    if kwargs["split"] not in SPLITS:
        raise VocabularyError(f"split {kwargs['split']!r} not in {SPLITS}", line)
    q = obj.get("quality")
    if q is not None and (isinstance(q, bool) or not isinstance(q, (int, float))):
        raise ManifestError("field 'quality' must be numeric", line)
    kwargs["quality"] = None if q is None else float(q)
    return VideoRecord(**kwargs)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSON-Lines manifest; unknown fields are ignored."""
    path = Path(path)
    root = path.parent
    records, ids = [], set()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            rec = parse_record(obj, lineno)
            if rec.id in ids:
                raise ManifestError(f"duplicate id {rec.id!r}", lineno)
            ids.add(rec.id)
            if check_paths:
                p = Path(rec.path) if Path(rec.path).is_absolute() else root / rec.path
                if not p.is_file():
                    raise ManifestError(f"path {rec.path!r} does not resolve", lineno)
            records.append(rec)
    return DatasetManifest(records, root)


def write_manifest(path, manifest: DatasetManifest | list[VideoRecord]) -> None:
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_video(record: VideoRecord, root=Path(), dtype=np.float32) -> VideoTensor:
    """Load a record's container and check it against the manifest entry."""
    p = Path(record.path)
    if not p.is_absolute():
        p = Path(root) / p
    video = read_nvt(p, dtype=dtype)
    T, H, W, _ = video.frames.shape
    if (T, H, W) != (record.frame_count, record.height, record.width):
        raise IntegrityError(
            f"{p}: container is {T}x{H}x{W}, manifest says "
            f"{record.frame_count}x{record.height}x{record.width}")
    return video
