"""
Real/generated classifier on top of the backbone, and its training loop.

The head mean-pools the final-layer tokens of each sample and applies one
fully connected layer producing (real, generated) logits. Three tuning
modes decide which parameters move:

* ``full``          -- everything;
* ``linear_probe``  -- the head only;
* ``lora``          -- low-rank adapters on the chosen projections, plus the head.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import backbone as bb
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DivergenceError
from .media import DatasetManifest, VideoRecord, VideoTensor, read_nvt_uint8
from .packing import PackedBatch, greedy_bucket, pack
from .preprocess import Preprocess, prepare_frames, to_sequence
from .tensor import Tensor, add, backward, cross_entropy, matmul, no_grad, segment_mean

log = logging.getLogger(__name__)

MODES = ("full", "linear_probe", "lora")
LABEL_INDEX = {"real": 0, "generated": 1}

# Training from a random initialization at desk scale. The TrainConfig
# defaults (lr 1e-5 / 1e-4, batch 4 / 32) assume a pretrained backbone and
# barely move a randomly initialized one within five epochs.
DESK_RECIPE = {"lr": 1e-3, "batch_size": 16, "max_epochs": 5}
DESK_INIT_STD = 0.1


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    targets: tuple = ("wq", "wv")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        bad = [t for t in self.targets if t not in bb.LAYER_MATRICES]
        if bad:
            raise ConfigError(f"unknown LoRA targets {bad}; choose from {bb.LAYER_MATRICES}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_effective(W, A, B, alpha: float, r: int):
    """``W + (alpha / r) * B @ A`` for ``W (out, in)``, ``A (r, in)``, ``B (out, r)``.

    Works on arrays and on tensors (the update then stays on the tape).
    """
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    ws, as_, bs = W.shape, A.shape, B.shape
    if as_ != (r, ws[1]) or bs != (ws[0], r):
        raise ConfigError(f"LoRA shapes A{as_} B{bs} do not fit W{ws} at rank {r}")
    scale = alpha / r
    if isinstance(W, Tensor) or isinstance(A, Tensor) or isinstance(B, Tensor):
        return add(W, matmul(B, A) * scale)
    return W + scale * (B @ A)


class DetectorModel:
    """Backbone weights, classification head and optional LoRA adapters."""

    def __init__(self, cfg: bb.ModelConfig, weights: Mapping[str, np.ndarray],
                 lora: LoraConfig | None = None):
        self.cfg = cfg
        self.lora = lora
        self.params: dict[str, Tensor] = {k: Tensor(np.array(v)) for k, v in weights.items()}

    @classmethod
    def init(cls, cfg: bb.ModelConfig, seed: int = 0, dtype=np.float32,
             lora: LoraConfig | None = None) -> "DetectorModel":
        w = bb.init_backbone(cfg, seed, dtype)
        rng = np.random.default_rng([seed, 1])
        w["head.weight"] = (rng.standard_normal((cfg.dim, 2)) * cfg.init_std).astype(dtype)
        w["head.bias"] = np.zeros(2, dtype=dtype)
        model = cls(cfg, w)
        if lora is not None:
            model.add_lora(lora, seed)
        return model

    @property
    def dtype(self):
        return self.params["patch_embed"].dtype

    def add_lora(self, lora: LoraConfig, seed: int = 0) -> None:
        """Attach adapters: A ~ Normal(0, 0.02), B = 0, so the function is unchanged."""
        self.lora = lora
        rng = np.random.default_rng([seed, 2])
        for i in range(self.cfg.num_layers):
            for t in lora.targets:
                W = self.params[f"layers.{i}.{t}"].data
                a = f"layers.{i}.{t}.lora_A"
                b = f"layers.{i}.{t}.lora_B"
                if a not in self.params:
                    self.params[a] = Tensor((rng.standard_normal((lora.rank, W.shape[1])) * 0.02).astype(W.dtype))
                    self.params[b] = Tensor(np.zeros((W.shape[0], lora.rank), dtype=W.dtype))

    def adapter_names(self) -> list[str]:
        return [k for k in self.params if ".lora_" in k]

    def head_names(self) -> list[str]:
        return ["head.weight", "head.bias"]

    def base_names(self) -> list[str]:
        return [k for k in self.params if ".lora_" not in k and not k.startswith("head.")]

    def set_mode(self, mode: str) -> list[str]:
        """Flag the trainable set for ``mode`` and return its parameter names."""
        if mode not in MODES:
            raise ConfigError(f"unknown tuning mode {mode!r}")
        if mode == "lora" and not self.adapter_names():
            raise ConfigError("lora mode needs adapters; call add_lora first")
        if mode == "full":
            names = self.base_names() + self.head_names()
        elif mode == "linear_probe":
            names = self.head_names()
        else:
            names = self.adapter_names() + self.head_names()
        chosen = set(names)
        for k, p in self.params.items():
            p.requires_grad = k in chosen
            p.grad = None
        return names

    def effective_weights(self) -> dict[str, Tensor]:
        w = dict(self.params)
        if self.lora is not None:
            for i in range(self.cfg.num_layers):
                for t in self.lora.targets:
                    k = f"layers.{i}.{t}"
                    if k + ".lora_A" in w:
                        w[k] = lora_effective(w[k], w[k + ".lora_A"], w[k + ".lora_B"],
                                              self.lora.alpha, self.lora.rank)
        return w

    def features(self, packed: PackedBatch) -> Tensor:
        return bb.forward(packed, self.cfg, self.effective_weights())

    def logits(self, packed: PackedBatch) -> Tensor:
        """(num_samples, 2) logits: mean-pool per sample, then the FC head."""
        feats = self.features(packed)
        pooled = segment_mean(feats, packed.boundaries)
        return add(matmul(pooled, self.params["head.weight"]), self.params["head.bias"])

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v)

    def save(self, path, metadata: dict | None = None) -> None:
        meta = dict(metadata or {})
        meta["lora"] = None if self.lora is None else asdict(self.lora)
        save_checkpoint(path, self.cfg.to_dict(), self.state(), meta)

    @classmethod
    def load(cls, path) -> tuple["DetectorModel", dict]:
        header, tensors = load_checkpoint(path)
        cfg = bb.ModelConfig.from_dict(header["config"])
        meta = header.get("metadata", {})
        lora = LoraConfig(**meta["lora"]) if meta.get("lora") else None
        return cls(cfg, tensors, lora), meta


def classify(features, head_weight, head_bias) -> np.ndarray:
    """Logits ``(real, generated)`` of one sample's ``(N, D)`` token block."""
    f = np.asarray(features)
    if f.ndim != 2 or len(f) == 0:
        raise ContractError("classify needs a non-empty (N, D) feature block")
    return f.mean(axis=0) @ np.asarray(head_weight) + np.asarray(head_bias)


def loss(logits, label) -> Tensor:
    """Two-class softmax cross-entropy; ``label`` is a name, an index, or a sequence of them."""
    single = isinstance(label, (str, int, np.integer))
    labels = [label] if single else list(label)
    idx = [LABEL_INDEX[l] if isinstance(l, str) else int(l) for l in labels]
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return cross_entropy(logits, idx)


def generated_probability(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    d = z[:, 1] - z[:, 0]
    return np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))


# -- optimization ---------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.data - self.lr * update
            if p.ndim >= 2 and self.wd:
                new = new - self.lr * self.wd * p.data
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- data pipeline --------------------------------------------------------------
class ClipLoader:
    """Reads records and produces raw patch sequences for a preprocessing policy."""

    def __init__(self, manifest: DatasetManifest, pre: Preprocess, spec, cache_raw: bool = False):
        self.manifest = manifest
        self.pre = pre
        self.spec = spec
        self.cache_raw = cache_raw
        self._raw: dict[str, tuple[np.ndarray, float]] = {}

    def raw(self, record: VideoRecord) -> tuple[np.ndarray, float]:
        if record.id in self._raw:
            return self._raw[record.id]
        frames, fps = read_nvt_uint8(self.manifest.resolve(record))
        if self.cache_raw:
            self._raw[record.id] = (frames, fps)
        return frames, fps

    def sequence(self, record: VideoRecord, train: bool = False, seed: int | None = None,
                 hflip: bool = False, noise_std: float = 0.0, transform=None):
        frames, fps = self.raw(record)
        return self.sequence_from_frames(frames, fps, train, seed, hflip, noise_std, transform)

    def sequence_from_frames(self, frames, fps, train=False, seed=None, hflip=False, noise_std=0.0,
                             transform=None):
        clip = prepare_frames(frames, fps, self.pre, train, seed, self.spec.pt, hflip, noise_std,
                              transform=transform)
        return to_sequence(clip, self.spec)


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _chunks(seqs, max_tokens):
    """Pack a batch into token-capped groups, keeping first-fit-decreasing order."""
    for idx in greedy_bucket([len(s) for s in seqs], max_tokens):
        yield idx, pack([seqs[i] for i in idx])


def score_sequences(model: DetectorModel, seqs: Sequence, max_tokens: int = 16384) -> np.ndarray:
    """Probability of "generated" for each raw patch sequence."""
    out = np.empty(len(seqs))
    with no_grad():
        for idx, packed in _chunks(list(seqs), max_tokens):
            out[idx] = generated_probability(model.logits(packed).data)
    return out


def predict(video: VideoTensor, model: DetectorModel, pre: Preprocess = Preprocess()) -> float:
    """Full inference pipeline on one clip; returns P(generated)."""
    clip = prepare_frames(video.frames, video.fps, pre, train=False, pt=model.cfg.patch[0])
    return float(score_sequences(model, [to_sequence(clip, model.cfg.patch_spec)])[0])


def predict_records(model: DetectorModel, manifest: DatasetManifest, pre: Preprocess,
                    records: Sequence[VideoRecord] | None = None, transform=None,
                    batch_size: int = 16, max_tokens: int = 16384) -> np.ndarray:
    """Scores for ``records`` (default: all of ``manifest``), in order.

    ``transform`` perturbs each temporally sampled clip before the spatial
    policy is applied.
    """
    records = list(manifest.records if records is None else records)
    loader = ClipLoader(manifest, pre, model.cfg.patch_spec)
    scores = np.empty(len(records))
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        seqs = [loader.sequence(r, transform=transform) for r in chunk]
        scores[start:start + len(chunk)] = score_sequences(model, seqs, max_tokens)
    return scores


# -- training -------------------------------------------------------------------
@dataclass
class TrainConfig:
    mode: str = "full"
    lr: float | None = None
    batch_size: int | None = None
    max_epochs: int | None = None
    patience: int = 5
    early_stopping: bool | None = None
    seed: int = 0
    preprocess: Preprocess = field(default_factory=Preprocess)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_targets: tuple = ("wq", "wv")
    max_tokens: int = 16384
    hflip: bool = False
    noise_std: float = 0.0
    cache_videos: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown tuning mode {self.mode!r}")
        if isinstance(self.preprocess, dict):
            self.preprocess = Preprocess.from_dict(self.preprocess)
        self.betas = tuple(self.betas)
        self.lora_targets = tuple(self.lora_targets)
        r = self.resolved()
        if r.lr <= 0 or r.batch_size < 1 or r.max_epochs < 1 or self.patience < 1:
            raise ConfigError("learning rate, batch size, epochs and patience must be positive")
        if r.early_stopping and self.patience > r.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max epochs {r.max_epochs}")

    def resolved(self) -> "TrainConfig":
        """Fill unset fields with the per-mode defaults."""
        full = self.mode == "full"
        out = object.__new__(TrainConfig)
        out.__dict__.update(self.__dict__)
        out.lr = self.lr if self.lr is not None else (1e-5 if full else 1e-4)
        out.batch_size = self.batch_size if self.batch_size is not None else (4 if full else 32)
        out.max_epochs = self.max_epochs if self.max_epochs is not None else (5 if full else 30)
        out.early_stopping = self.early_stopping if self.early_stopping is not None else not full
        return out

    def to_dict(self) -> dict:
        d = asdict(self.resolved())
        d["preprocess"] = self.preprocess.to_dict()
        d["betas"] = list(self.betas)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: DetectorModel
    log: list
    best_epoch: int
    trainable: list


def _labels(records) -> list[int]:
    return [LABEL_INDEX[r.label] for r in records]


def evaluate_loss(model: DetectorModel, loader: ClipLoader, records, cache=None, max_tokens=16384) -> float:
    seqs = cache if cache is not None else [loader.sequence(r) for r in records]
    total = 0.0
    with no_grad():
        for idx, packed in _chunks(seqs, max_tokens):
            lg = model.logits(packed)
            total += float(cross_entropy(lg, [LABEL_INDEX[records[i].label] for i in idx]).data) * len(idx)
    return total / len(records)


def train(train_manifest: DatasetManifest, val_manifest: DatasetManifest, config: TrainConfig,
          model_config: bb.ModelConfig | None = None, init: DetectorModel | None = None,
          out_dir=None) -> TrainResult:
    """Fit the detector; keeps the parameters with the lowest validation loss.

    Full mode runs a fixed number of epochs; linear-probe and LoRA modes stop
    early once validation loss has not improved for ``patience`` epochs.
    With ``out_dir`` set, writes ``checkpoint.nvf`` and ``train_log.jsonl``.
    """
    cfg = config.resolved()
    records = list(train_manifest.records)
    val_records = list(val_manifest.records)
    if not records:
        raise ConfigError("empty split: no training records")
    if not val_records:
        raise ConfigError("empty split: no validation records")
    if init is None:
        model = DetectorModel.init(model_config or bb.ModelConfig(), seed=cfg.seed)
    else:
        model = init
    if cfg.mode == "lora":
        model.add_lora(LoraConfig(cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets), cfg.seed)
    trainable = model.set_mode(cfg.mode)
    opt = AdamW([model.params[k] for k in trainable], cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)

    spec = model.cfg.patch_spec
    loader = ClipLoader(train_manifest, cfg.preprocess, spec, cache_raw=cfg.cache_videos)
    val_loader = ClipLoader(val_manifest, cfg.preprocess, spec)
    val_cache = [val_loader.sequence(r) for r in val_records]
    labels = _labels(records)

    best_loss, best_epoch, best_state, stale = np.inf, -1, model.copy_state(), 0
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(records))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            seqs = [loader.sequence(records[i], train=True, seed=_sample_seed(cfg.seed, epoch, int(i)),
                                    hflip=cfg.hflip, noise_std=cfg.noise_std) for i in batch]
            opt.zero_grad()
            for idx, packed in _chunks(seqs, cfg.max_tokens):
                lg = model.logits(packed)
                batch_labels = [labels[batch[i]] for i in idx]
                l = cross_entropy(lg, batch_labels) * (len(idx) / len(batch))
                value = float(l.data) * len(batch) / len(idx)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}, step {step}")
                losses.extend([value] * len(idx))
                backward(l)
            opt.step()
        val_loss = evaluate_loss(model, val_loader, val_records, val_cache, cfg.max_tokens)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                 "elapsed_s": round(time.perf_counter() - t0, 3)}
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f", epoch, entry["train_loss"], val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state, stale = val_loss, epoch, model.copy_state(), 0
        else:
            stale += 1
            if cfg.early_stopping and stale >= cfg.patience:
                break
    model.load_state(best_state)
    model.set_mode(cfg.mode)
    for p in model.params.values():
        p.requires_grad = False
    result = TrainResult(model, history, best_epoch, trainable)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.nvf", {"mode": cfg.mode, "preprocess": cfg.preprocess.to_dict(),
                                            "best_epoch": best_epoch})
        with open(out / "train_log.jsonl", "w") as fh:
            for e in history:
                fh.write(json.dumps(e) + "\n")
    return result
