"""Train-and-test sweeps over one setting (resolution policy, clip length, tuning mode)."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import ModelConfig
from .detector import DESK_INIT_STD, DESK_RECIPE, TrainConfig, predict_records, train
from .metrics import accuracy
from .preprocess import Preprocess

log = logging.getLogger(__name__)


@dataclass
class VariantResult:
    name: str
    test_acc: float
    best_epoch: int
    train_seconds: float
    log: list
    model: object = field(default=None, repr=False)


def desk_config(**kw) -> TrainConfig:
    """TrainConfig with the from-scratch desk recipe filled in."""
    return TrainConfig(**{**DESK_RECIPE, **kw})


def desk_model(**kw) -> ModelConfig:
    return ModelConfig(**{"init_std": DESK_INIT_STD, **kw})


def run_variant(name: str, manifest, config: TrainConfig, model_config: ModelConfig | None = None,
                eval_pre: Preprocess | None = None) -> VariantResult:
    """Train on the train/val splits, report ACC (percent) on the test split."""
    t0 = time.perf_counter()
    res = train(manifest.split("train"), manifest.split("val"), config, model_config or desk_model())
    seconds = time.perf_counter() - t0
    test = manifest.split("test")
    scores = predict_records(res.model, test, eval_pre or config.preprocess)
    acc = accuracy(scores, [r.label for r in test.records])
    log.info("%s: test ACC %.2f after %.0f s", name, acc, seconds)
    return VariantResult(name, acc, res.best_epoch, seconds, res.log, res.model)


def sweep_policies(manifest, policies: Sequence[str], base: TrainConfig, model_config=None) -> list[VariantResult]:
    out = []
    for p in policies:
        pre = Preprocess.parse(p, T=base.preprocess.T)
        out.append(run_variant(p, manifest, replace(base, preprocess=pre), model_config))
    return out


def sweep_clip_length(manifest, lengths: Sequence[int], base: TrainConfig, model_config=None) -> list[VariantResult]:
    out = []
    for T in lengths:
        pre = replace(base.preprocess, T=int(T))
        out.append(run_variant(f"T={T}", manifest, replace(base, preprocess=pre), model_config))
    return out


def sweep_modes(manifest, modes: Sequence[str], base: TrainConfig, model_config=None) -> list[VariantResult]:
    return [run_variant(m, manifest, replace(base, mode=m), model_config) for m in modes]


def accuracies(results: Sequence[VariantResult]) -> dict:
    return {r.name: float(r.test_acc) for r in results}


def ordered(values: Sequence[float], strict: Sequence[bool]) -> bool:
    """True when ``values`` increase left to right (strictly where ``strict`` says so)."""
    v = np.asarray(values, dtype=np.float64)
    return all((b > a) if s else (b >= a) for a, b, s in zip(v, v[1:], strict))
