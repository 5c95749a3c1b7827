"""Native-scale 3D patch partitioning and linear patch embedding.

Tokens are enumerated t-major, then h, then w; inside a patch the
flattening order is (t, h, w, c). Both orders are fixed so that weights
and tests are portable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class PatchSpec:
    pt: int = 2
    ph: int = 14
    pw: int = 14

    def __post_init__(self):
        if min(self.pt, self.ph, self.pw) < 1:
            raise ContractError(f"patch sizes must be >= 1, got {self}")

    def patch_dim(self, channels: int = 3) -> int:
        return self.pt * self.ph * self.pw * channels


@dataclass
class PatchEmbedder:
    """Projection ``E`` with one row per flattened patch value."""

    E: np.ndarray

    @classmethod
    def identity(cls, spec: PatchSpec, channels: int = 3, dtype=np.float64) -> "PatchEmbedder":
        return cls(np.eye(spec.patch_dim(channels), dtype=dtype))


@dataclass
class PatchSequence:
    tokens: np.ndarray          # (N, D)
    coords: np.ndarray          # (N, 3) int64 grid indices (t, h, w)
    dims: tuple                 # source (T, H, W)

    def __len__(self):
        return len(self.tokens)


def temporal_pad(frames: np.ndarray, pt: int) -> np.ndarray:
    """Repeat the final frame until the frame count divides ``pt``."""
    rem = (-len(frames)) % pt
    if rem == 0:
        return frames
    return np.concatenate([frames, np.repeat(frames[-1:], rem, axis=0)], axis=0)


def grid_coords(nt: int, nh: int, nw: int) -> np.ndarray:
    t, h, w = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1).astype(np.int64)


def unfold(frames: np.ndarray, spec: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flattened patches ``(N, pt*ph*pw*C)`` and their grid coordinates."""
    T, H, W, C = frames.shape
    for axis, n, p in (("T", T, spec.pt), ("H", H, spec.ph), ("W", W, spec.pw)):
        if n % p:
            raise ContractError(f"axis {axis}={n} is not divisible by patch size {p}")
    nt, nh, nw = T // spec.pt, H // spec.ph, W // spec.pw
    x = frames.reshape(nt, spec.pt, nh, spec.ph, nw, spec.pw, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(nt * nh * nw, spec.pt * spec.ph * spec.pw * C)
    return np.ascontiguousarray(x), grid_coords(nt, nh, nw)


def patchify(frames: np.ndarray, spec: PatchSpec = PatchSpec(),
             embedder: PatchEmbedder | None = None) -> PatchSequence:
    """Embed every non-overlapping patch; ``embedder=None`` keeps raw patches."""
    flat, coords = unfold(frames, spec)
    if embedder is not None:
        if embedder.E.shape[0] != flat.shape[1]:
            raise ContractError(
                f"embedder expects {embedder.E.shape[0]} values per patch, patches have {flat.shape[1]}")
        flat = flat @ embedder.E
    return PatchSequence(flat, coords, tuple(frames.shape[:3]))


def unpatchify(seq: PatchSequence, spec: PatchSpec, channels: int = 3) -> np.ndarray:
    """Scatter raw patches back to ``(T, H, W, C)`` using their coordinates."""
    T, H, W = seq.dims
    nt, nh, nw = T // spec.pt, H // spec.ph, W // spec.pw
    if seq.tokens.shape[1] != spec.patch_dim(channels):
        raise ContractError("unpatchify needs raw (identity-embedded) patches")
    c = np.asarray(seq.coords)
    flat_id = (c[:, 0] * nh + c[:, 1]) * nw + c[:, 2]
    if len(c) != nt * nh * nw or len(np.unique(flat_id)) != nt * nh * nw or \
            c.min() < 0 or np.any(c.max(axis=0) >= (nt, nh, nw)):
        raise ContractError("patch coordinates do not cover the grid exactly once")
    grid = np.empty((nt * nh * nw, seq.tokens.shape[1]), dtype=seq.tokens.dtype)
    grid[flat_id] = seq.tokens
    x = grid.reshape(nt, nh, nw, spec.pt, spec.ph, spec.pw, channels)
    return x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(T, H, W, channels)
