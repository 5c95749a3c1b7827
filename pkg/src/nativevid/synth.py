"""
Procedural corpus: natural-looking "real" clips and "generated" clips that
carry generator-specific artifacts.

Real clips are a pink-noise background panned with subpixel precision plus
a few smoothly moving Gaussian blobs. A generated clip starts from the same
kind of scene and adds, with amplitude ``(1 - quality) * a_max`` each:

* an additive periodic grid (high-frequency, fixed phase);
* Gaussian blur;
* down/up resampling ringing;
* per-frame global luminance flicker.

Grid, blur and ringing can be confined to a region covering
``artifact_coverage`` of the frame: a random rectangle (``"box"``) or a band
at one end of the long axis (``"end"``). On the hires frame sizes a 30 %
band stays clear of a centered 224-px crop, which is what makes a
native-scale crop miss evidence a whole-frame view would keep.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .media import SPLITS, DatasetManifest, VideoRecord, VideoTensor, write_manifest, write_nvt

log = logging.getLogger(__name__)

MAX_QUALITY = 0.95


@dataclass
class GeneratorProfile:
    name: str
    quality: float
    grid_amp_max: float = 0.05
    grid_period: int = 4
    blur_sigma_max: float = 1.0
    flicker_max: float = 0.04
    ringing_max: float = 0.6
    resolutions: list = field(default_factory=lambda: [[224, 280], [252, 252], [196, 308], [238, 322]])
    duration_s: list = field(default_factory=lambda: [4.0, 5.0])
    fps: list = field(default_factory=lambda: [2.0, 4.0])
    artifact_coverage: float = 1.0
    artifact_region: str = "box"

    def __post_init__(self):
        if not 0.0 < self.quality <= MAX_QUALITY:
            raise ConfigError(f"profile {self.name!r}: quality must lie in (0, {MAX_QUALITY}]")
        if min(self.grid_amp_max, self.blur_sigma_max, self.flicker_max, self.ringing_max) < 0:
            raise ConfigError(f"profile {self.name!r}: artifact amplitudes must be >= 0")
        if self.grid_period < 2:
            raise ConfigError(f"profile {self.name!r}: grid period must be >= 2 px")
        if not 0.0 < self.artifact_coverage <= 1.0:
            raise ConfigError(f"profile {self.name!r}: artifact coverage must lie in (0, 1]")
        if self.artifact_region not in ("box", "end"):
            raise ConfigError(f"profile {self.name!r}: artifact region must be 'box' or 'end'")
        self.resolutions = [list(map(int, r)) for r in self.resolutions]
        if any(min(r) < 32 for r in self.resolutions):
            raise ConfigError(f"profile {self.name!r}: resolutions must be at least 32x32")

    def amplitudes(self) -> dict:
        k = 1.0 - self.quality
        return {"grid": k * self.grid_amp_max, "blur": k * self.blur_sigma_max,
                "flicker": k * self.flicker_max, "ringing": k * self.ringing_max}


@dataclass
class SceneParams:
    seed: int
    gamma: float
    pan: tuple                  # (dy, dx) px / frame
    blobs: list                 # dicts: center, velocity, sigma, color

    @classmethod
    def sample(cls, seed: int, h: int, w: int) -> "SceneParams":
        rng = np.random.default_rng([seed, 11])
        blobs = []
        for _ in range(int(rng.integers(2, 6))):
            blobs.append({"center": [float(rng.uniform(0, h)), float(rng.uniform(0, w))],
                          "velocity": [float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2))],
                          "sigma": float(rng.uniform(0.04, 0.12) * min(h, w)),
                          "color": [float(c) for c in rng.uniform(-0.3, 0.3, 3)]})
        return cls(seed, float(rng.uniform(1.6, 2.4)),
                   (float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5))), blobs)

    def static(self) -> "SceneParams":
        frozen = [dict(b, velocity=[0.0, 0.0]) for b in self.blobs]
        return SceneParams(self.seed, self.gamma, (0.0, 0.0), frozen)


def _pink_spectrum(rng, h, w, gamma):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fy * fy + fx * fx)
    f[0, 0] = 1.0
    amp = f ** (-gamma / 2.0)
    amp[0, 0] = 0.0
    white = rng.standard_normal((3, h, w))
    # correlate the channels so colour varies less than luminance
    mix = np.array([[1.0, 0.25, 0.0], [1.0, 0.0, 0.25], [1.0, -0.2, -0.2]])
    fields = np.einsum("ck,khw->chw", mix, white)
    return np.fft.rfft2(fields) * amp, fy, fx


def gen_real(scene: SceneParams, h: int, w: int, T: int, fps: float = 2.0) -> VideoTensor:
    """Pink-noise background with global pan and moving blobs, clipped to [0, 1]."""
    if h < 32 or w < 32 or T < 2:
        raise ConfigError(f"scene needs at least 32x32 pixels and 2 frames, got {h}x{w}x{T}")
    rng = np.random.default_rng([scene.seed, 12])
    spec, fy, fx = _pink_spectrum(rng, h, w, scene.gamma)
    yy, xx = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    frames = np.empty((T, h, w, 3), dtype=np.float64)
    scale = None
    for t in range(T):
        dy, dx = scene.pan[0] * t, scene.pan[1] * t
        shift = np.exp(-2j * np.pi * (fy * dy + fx * dx))
        bg = np.fft.irfft2(spec * shift, s=(h, w))
        if scale is None:
            scale = 0.16 / (bg.std() + 1e-12)
        frame = 0.5 + scale * np.moveaxis(bg, 0, -1)
        for b in scene.blobs:
            cy = b["center"][0] + b["velocity"][0] * t
            cx = b["center"][1] + b["velocity"][1] * t
            k = 1.0 / (2.0 * b["sigma"] ** 2)
            g = np.outer(np.exp(-k * (yy - cy) ** 2), np.exp(-k * (xx - cx) ** 2))
            frame += g[..., None] * np.asarray(b["color"])
        frames[t] = frame
    return VideoTensor(np.clip(frames, 0.0, 1.0), fps)


def grid_pattern(h: int, w: int, period: int) -> np.ndarray:
    """Zero-mean separable cosine grid with fixed phase, peak value 1."""
    y = np.cos(2 * np.pi * np.arange(h) / period)
    x = np.cos(2 * np.pi * np.arange(w) / period)
    return 0.5 * (y[:, None] + x[None, :])


def _coverage_mask(rng, h, w, coverage, region="box"):
    if coverage >= 1.0:
        return None
    if region == "end":
        m = np.zeros((h, w, 1))
        axis = 1 if w >= h else 0
        n = max(1, int(round(coverage * m.shape[axis])))
        band = slice(0, n) if rng.random() < 0.5 else slice(m.shape[axis] - n, None)
        m[(slice(None), band) if axis else (band, slice(None))] = 1.0
        return m
    aspect = rng.uniform(0.6, 1.6)
    rh = min(h, max(1, int(round(np.sqrt(coverage * h * w * aspect)))))
    rw = min(w, max(1, int(round(coverage * h * w / rh))))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    m = np.zeros((h, w, 1))
    m[top:top + rh, left:left + rw] = 1.0
    return m


def _ringing(frame: np.ndarray, factor: float = 2.0) -> np.ndarray:
    """Ideal (sinc) down/up resampling by ``factor``: drop the upper band, keep the Gibbs ripples."""
    h, w, _ = frame.shape
    F = np.fft.rfft2(frame, axes=(0, 1))
    keep = (np.abs(np.fft.fftfreq(h))[:, None] <= 0.5 / factor) & (np.fft.rfftfreq(w)[None, :] <= 0.5 / factor)
    return np.fft.irfft2(F * keep[..., None], s=(h, w), axes=(0, 1))


def apply_artifacts(base: VideoTensor, profile: GeneratorProfile, seed: int) -> VideoTensor:
    """Composite a profile's artifacts onto a real-looking clip."""
    a = profile.amplitudes()
    rng = np.random.default_rng([seed, 13])
    frames = base.frames.astype(np.float64)
    T, h, w, _ = frames.shape
    mask = _coverage_mask(rng, h, w, profile.artifact_coverage, profile.artifact_region)
    grid = a["grid"] * grid_pattern(h, w, profile.grid_period)[..., None]
    flicker = rng.normal(0.0, a["flicker"], T) if a["flicker"] > 0 else np.zeros(T)
    out = np.empty_like(frames)
    for t in range(T):
        x = frames[t]
        y = x
        if a["blur"] > 0:
            y = ndimage.gaussian_filter(y, sigma=(a["blur"], a["blur"], 0.0), mode="reflect")
        if a["ringing"] > 0:
            y = y + a["ringing"] * (_ringing(y) - y)
        y = y + grid
        if mask is not None:
            y = mask * y + (1.0 - mask) * x
        out[t] = y + flicker[t]
    return VideoTensor(np.clip(out, 0.0, 1.0), base.fps)


def gen_fake(scene: SceneParams, profile: GeneratorProfile, h: int, w: int, T: int,
             fps: float = 2.0) -> VideoTensor:
    return apply_artifacts(gen_real(scene, h, w, T, fps), profile, scene.seed)


# -- corpus ------------------------------------------------------------------
@dataclass
class CorpusConfig:
    profiles: list
    real_per_profile: dict = field(default_factory=lambda: {"train": 50, "val": 12, "test": 25})
    fake_per_profile: dict = field(default_factory=lambda: {"train": 50, "val": 13, "test": 25})
    share_reals: bool = False
    seed: int = 0

    def __post_init__(self):
        self.profiles = [p if isinstance(p, GeneratorProfile) else GeneratorProfile(**p) for p in self.profiles]
        if not self.profiles:
            raise ConfigError("corpus needs at least one generator profile")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ConfigError(f"profile names must be unique: {names}")
        for d in (self.real_per_profile, self.fake_per_profile):
            bad = [k for k in d if k not in SPLITS]
            if bad or any(int(v) < 0 for v in d.values()):
                raise ConfigError(f"per-split counts must use splits {SPLITS} and be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        if "preset" in d:
            base = preset(d["preset"]).to_dict()
            base.update({k: v for k, v in d.items() if k != "preset"})
            d = base
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _profiles(qualities, **kw) -> list:
    return [GeneratorProfile(f"gen_{chr(97 + i)}", q, **kw) for i, q in enumerate(qualities)]


HIRES_RESOLUTIONS = [[392, 672], [448, 588], [420, 630], [364, 700]]


def preset(name: str) -> CorpusConfig:
    """Named corpus recipes.

    ``default``  four profiles at mixed small resolutions;
    ``hires``    a fine grid in a band at one end of larger frames (resolution study);
    ``flicker``  temporal flicker as the only artifact (clip-length study);
    ``tiny``     a few clips for smoke tests.
    """
    if name == "default":
        return CorpusConfig(_profiles([0.3, 0.5, 0.7, 0.85], grid_amp_max=0.25))
    if name == "hires":
        return CorpusConfig(_profiles([0.5, 0.6], grid_amp_max=0.35, blur_sigma_max=0.0, ringing_max=0.0,
                                      flicker_max=0.0, artifact_coverage=0.3, artifact_region="end",
                                      resolutions=HIRES_RESOLUTIONS,
                                      duration_s=[1.0, 1.5], fps=[2.0]),
                            {"train": 60, "val": 15, "test": 50}, {"train": 60, "val": 15, "test": 50})
    if name == "flicker":
        return CorpusConfig(_profiles([0.5, 0.6], grid_amp_max=0.0, blur_sigma_max=0.0, ringing_max=0.0,
                                      flicker_max=0.025),
                            {"train": 60, "val": 15, "test": 50}, {"train": 60, "val": 15, "test": 50})
    if name == "tiny":
        return CorpusConfig(_profiles([0.3, 0.7], resolutions=[[64, 84], [70, 70]], duration_s=[4.0, 4.0],
                                      fps=[2.0]),
                            {"train": 4, "val": 2, "test": 2}, {"train": 4, "val": 2, "test": 2})
    raise ConfigError(f"unknown corpus preset {name!r}")


def _draw_format(rng, profile: GeneratorProfile):
    h, w = profile.resolutions[int(rng.integers(len(profile.resolutions)))]
    if rng.random() < 0.5:
        h, w = w, h
    fps = float(profile.fps[int(rng.integers(len(profile.fps)))])
    dur = float(rng.uniform(*profile.duration_s))
    T = max(2, int(round(dur * fps)))
    return h, w, T, fps


def build_corpus(config: CorpusConfig, out_dir) -> DatasetManifest:
    """Write ``.nvt`` clips and ``manifest.jsonl`` under ``out_dir``.

    With ``share_reals`` each split holds a single pool of
    ``real_per_profile[split]`` reals (generator ``""``) paired with every
    profile; otherwise every profile gets its own reals, named after it.
    Formats of the reals follow the profiles' distributions so frame size or
    length never gives the label away.
    """
    out = Path(out_dir)
    records = []
    for si, split in enumerate(SPLITS):
        n_real = int(config.real_per_profile.get(split, 0))
        n_fake = int(config.fake_per_profile.get(split, 0))
        if n_real == 0 and n_fake == 0:
            continue
        vdir = out / "videos" / split
        vdir.mkdir(parents=True, exist_ok=True)
        jobs = []
        for pi, prof in enumerate(config.profiles):
            for i in range(n_fake):
                jobs.append((f"{split}-{prof.name}-fake-{i:04d}", prof, prof, "generated", (si, pi, 1, i)))
            if not config.share_reals:
                for i in range(n_real):
                    jobs.append((f"{split}-{prof.name}-real-{i:04d}", prof, None, "real", (si, pi, 0, i)))
        if config.share_reals:
            for i in range(n_real):
                prof = config.profiles[i % len(config.profiles)]
                jobs.append((f"{split}-shared-real-{i:04d}", prof, None, "real", (si, 99, 0, i)))
        for rid, fmt_prof, art_prof, label, key in jobs:
            seed = int(np.random.SeedSequence([config.seed, *key]).generate_state(1)[0])
            rng = np.random.default_rng(seed)
            h, w, T, fps = _draw_format(rng, fmt_prof)
            scene = SceneParams.sample(seed, h, w)
            video = gen_real(scene, h, w, T, fps)
            if art_prof is not None:
                video = apply_artifacts(video, art_prof, seed)
            rel = Path("videos") / split / f"{rid}.nvt"
            write_nvt(out / rel, video)
            gen = art_prof.name if art_prof is not None else ("" if config.share_reals else fmt_prof.name)
            records.append(VideoRecord(rid, rel.as_posix(), label, gen, split, w, h, fps, T,
                                       art_prof.quality if art_prof is not None else None))
    manifest = DatasetManifest(records, out)
    write_manifest(out / "manifest.jsonl", manifest)
    (out / "corpus_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    log.info("wrote %d clips to %s", len(records), out)
    return manifest
