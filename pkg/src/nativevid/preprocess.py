"""Turning a decoded clip into model-ready patch sequences.

Three spatial policies are supported:

* ``dynamic`` -- aspect-preserving resize into a [min, max] pixel budget;
* ``crop``    -- a fixed ``size x size`` window at native scale (random in
  training, centred in evaluation), upscaling first if a side is short;
* ``resize``  -- the whole frame squashed to ``size x size``.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .media import ResolutionPolicy, resample_frames, resize_bilinear, smart_resize
from .patchify import PatchSequence, PatchSpec, temporal_pad, unfold

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class Preprocess:
    kind: str = "dynamic"
    min_pixels: int = 224 * 224
    max_pixels: int = 720 * 720
    size: int = 224
    factor: int = 14
    T: int = 8
    target_fps: float = 2.0

    def __post_init__(self):
        if self.kind not in ("dynamic", "crop", "resize"):
            raise ConfigError(f"unknown preprocessing kind {self.kind!r}")
        if self.T < 1 or self.size < 1 or self.target_fps <= 0:
            raise ConfigError(f"invalid preprocessing parameters {self}")
        if self.kind != "dynamic" and self.size % self.factor:
            raise ConfigError(f"fixed size {self.size} is not a multiple of {self.factor}")
        if self.kind == "dynamic":
            ResolutionPolicy(self.min_pixels, self.max_pixels, self.factor)

    @property
    def policy(self) -> ResolutionPolicy:
        return ResolutionPolicy(self.min_pixels, self.max_pixels, self.factor)

    @property
    def name(self) -> str:
        if self.kind == "dynamic":
            lo, hi = math.isqrt(self.min_pixels), math.isqrt(self.max_pixels)
            return f"dynamic[{lo},{hi}]"
        return f"{self.kind}{self.size}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocess":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def parse(cls, text: str, T: int = 8) -> "Preprocess":
        """Accepts ``dynamic[224,720]``, ``crop224`` / ``fixed-crop-224``, ``resize224``."""
        s = text.strip().lower().replace(" ", "")
        m = re.fullmatch(r"dynamic\[(\d+)p?,(\d+)p?\]", s)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            return cls("dynamic", lo * lo, hi * hi, T=T)
        m = re.fullmatch(r"(?:fixed-)?(crop|resize)-?(\d+)p?", s)
        if m:
            return cls(m.group(1), size=int(m.group(2)), T=T)
        raise ConfigError(f"cannot parse resolution policy {text!r}")


def spatial_transform(frames: np.ndarray, pre: Preprocess, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the spatial policy to float frames ``(T, H, W, C)``."""
    _, H, W, _ = frames.shape
    if pre.kind == "dynamic":
        h, w = smart_resize(H, W, pre.policy)
        return resize_bilinear(frames, h, w)
    if pre.kind == "resize":
        return resize_bilinear(frames, pre.size, pre.size)
    s = pre.size
    if min(H, W) < s:
        r = s / min(H, W)
        frames = resize_bilinear(frames, max(s, math.ceil(H * r)), max(s, math.ceil(W * r)))
        _, H, W, _ = frames.shape
    if rng is None:
        top, left = (H - s) // 2, (W - s) // 2
    else:
        top, left = int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1))
    return frames[:, top:top + s, left:left + s]


def prepare_frames(frames: np.ndarray, fps: float, pre: Preprocess, train: bool = False,
                   seed: int | None = None, pt: int = 2, hflip: bool = False,
                   noise_std: float = 0.0, transform=None) -> np.ndarray:
    """Temporal sampling, unit-range conversion, spatial policy and padding.

    ``frames`` may be uint8 (as stored) or float in [0, 1]. Training mode
    draws the clip start, crop offset and optional augmentations from
    ``seed``; evaluation mode is deterministic. ``transform``, if given, is
    applied to the sampled float clip before the spatial policy, so a
    perturbed video is treated as a fresh input.
    """
    rng = np.random.default_rng(seed) if train else None
    clip_seed = int(rng.integers(2**31)) if train else None
    clip = resample_frames(frames, fps, pre.target_fps, pre.T, "random" if train else "center", clip_seed)
    if clip.dtype == np.uint8:
        clip = clip.astype(np.float32) / np.float32(255.0)
    if transform is not None:
        clip = transform(clip)
    clip = spatial_transform(clip, pre, rng)
    if train and hflip and rng.random() < 0.5:
        clip = clip[:, :, ::-1]
    if train and noise_std > 0:
        clip = np.clip(clip + rng.normal(0.0, noise_std, clip.shape).astype(clip.dtype), 0.0, 1.0)
    return temporal_pad(np.ascontiguousarray(clip), pt)


def to_sequence(frames: np.ndarray, spec: PatchSpec) -> PatchSequence:
    """Normalize pixels and unfold into raw patch tokens."""
    norm = (frames - np.float32(PIXEL_MEAN)) / np.float32(PIXEL_STD)
    flat, coords = unfold(norm.astype(frames.dtype, copy=False), spec)
    return PatchSequence(flat, coords, tuple(frames.shape[:3]))
