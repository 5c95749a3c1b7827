"""Concatenation of variable-length patch sequences along one token axis.

Sample boundaries are cumulative offsets, the same information a varlen
attention kernel consumes, so no padding is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .patchify import PatchSequence


@dataclass
class PackedBatch:
    tokens: np.ndarray                    # (sum N_i, D)
    boundaries: np.ndarray                # [0, N_1, N_1 + N_2, ...]
    coords: np.ndarray                    # (sum N_i, 3)
    dims: list = field(default_factory=list)
    labels: list | None = None
    ids: list | None = None

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.int64)
        if len(b) < 1 or b[0] != 0 or np.any(np.diff(b) <= 0) or b[-1] != len(self.tokens):
            raise ContractError(f"invalid boundaries {b.tolist()} for {len(self.tokens)} tokens")
        if len(self.coords) != len(self.tokens):
            raise ContractError("coords and tokens disagree in length")
        self.boundaries = b

    @property
    def num_samples(self) -> int:
        return len(self.boundaries) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def sample_ids(self) -> np.ndarray:
        """Per-token sample index."""
        return np.repeat(np.arange(self.num_samples), self.lengths)


def pack(sequences: Sequence[PatchSequence], labels=None, ids=None) -> PackedBatch:
    if not sequences:
        raise ContractError("cannot pack an empty list")
    dims = {s.tokens.shape[1] for s in sequences}
    if len(dims) != 1:
        raise ContractError(f"sequences disagree on token width: {sorted(dims)}")
    b = np.concatenate([[0], np.cumsum([len(s) for s in sequences])]).astype(np.int64)
    return PackedBatch(np.concatenate([s.tokens for s in sequences]), b,
                       np.concatenate([s.coords for s in sequences]),
                       [s.dims for s in sequences],
                       None if labels is None else list(labels),
                       None if ids is None else list(ids))


def unpack(features, boundaries) -> list:
    b = np.asarray(boundaries, dtype=np.int64)
    if len(b) == 0:
        return []
    if b[-1] != len(features) or b[0] != 0 or np.any(np.diff(b) < 0):
        raise ContractError(f"boundaries {b.tolist()} do not match {len(features)} rows")
    return [features[b[i]:b[i + 1]] for i in range(len(b) - 1)]


def unpack_sequences(batch: PackedBatch) -> list[PatchSequence]:
    toks = unpack(batch.tokens, batch.boundaries)
    crds = unpack(batch.coords, batch.boundaries)
    return [PatchSequence(t, c, d) for t, c, d in zip(toks, crds, batch.dims)]


def greedy_bucket(lengths: Sequence[int], max_tokens: int = 16384, ids=None) -> list[list[int]]:
    """First-fit-decreasing assignment of sequence indices to token-capped bins.

    Returns index lists; ties in length keep their original order.
    """
    lengths = [int(n) for n in lengths]
    ids = list(range(len(lengths))) if ids is None else list(ids)
    oversize = [ids[i] for i, n in enumerate(lengths) if n > max_tokens]
    if oversize:
        raise ContractError(f"sequences longer than {max_tokens} tokens: {oversize}")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    bins, loads = [], []
    for i in order:
        for k, load in enumerate(loads):
            if load + lengths[i] <= max_tokens:
                bins[k].append(i)
                loads[k] += lengths[i]
                break
        else:
            bins.append([i])
            loads.append(lengths[i])
    return bins


def bucket_pack(sequences: Sequence[PatchSequence], max_tokens: int = 16384,
                labels=None, ids=None) -> list[PackedBatch]:
    bins = greedy_bucket([len(s) for s in sequences], max_tokens, ids=ids)
    out = []
    for idx in bins:
        out.append(pack([sequences[i] for i in idx],
                        None if labels is None else [labels[i] for i in idx],
                        [i if ids is None else ids[i] for i in idx]))
    return out
