"""Loss, learning-rate schedule and the CNN / LSTM training loops.

Every random choice in a step derives from ``(seed, step)`` or
``(seed, sample index)``, so a run resumed from a checkpoint at step ``s``
follows the same trajectory as an uninterrupted one, and the number of
preprocessing workers never changes the result.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data_ingest import DatasetManifest, FrameRecord, load_image
from .geometry import CANONICAL_CAMERA, CameraModel
from .imaging import AugmentConfig, augment_sequence, derive_seed, normalize, stack_pair
from .model import (
    CheckpointError,
    CnnConfig,
    DistanceCNN,
    DistanceLSTM,
    LstmConfig,
    ModelCheckpoint,
    NumericalError,
    build_model,
    config_fingerprint,
)
from .sampling import Direction, PairIndex, PairSamplerConfig, SequenceWindow, consecutive_pairs, duplicate_turns, training_pairs, windows_from_pairs

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_COLUMNS = ["step", "lr", "loss", "wall_time_s"]


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "cnn"
    base_lr: float = 1e-4
    lr_decay_factor: float = 2.0
    decay_every: int = 10_000
    batch_size: int = 75
    total_iterations: int = 100_000
    dropout_rate: float = 0.15
    seed: int = 0
    checkpoint_every: int = 10_000
    train_manifests: tuple[str, ...] = ()
    map_tags: tuple[str, ...] | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sampler: PairSamplerConfig = field(default_factory=PairSamplerConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    lstm: LstmConfig | None = None
    target_camera: CameraModel = CANONICAL_CAMERA
    workers: int = 1
    image_cache: int = 20_000

    def __post_init__(self) -> None:
        if self.phase not in ("cnn", "lstm"):
            raise ValueError(f"phase must be 'cnn' or 'lstm', got {self.phase!r}")
        if not (self.base_lr > 0 and self.batch_size > 0 and self.total_iterations >= 0 and self.decay_every > 0):
            raise ValueError("learning rate, batch size and decay interval must be positive")
        if self.phase == "lstm" and self.lstm is None:
            raise ValueError("lstm phase requires an LstmConfig")
        if self.cnn.dropout_rate != self.dropout_rate:
            object.__setattr__(self, "cnn", replace(self.cnn, dropout_rate=self.dropout_rate))
        h, w, _ = self.cnn.input_shape
        if (self.target_camera.height, self.target_camera.width) != (h, w):
            raise ValueError(f"target camera {self.target_camera.image_size} does not match CNN input {w}x{h}")
        object.__setattr__(self, "train_manifests", tuple(self.train_manifests))
        if self.map_tags is not None:
            object.__setattr__(self, "map_tags", tuple(self.map_tags))

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "base_lr": self.base_lr,
            "lr_decay_factor": self.lr_decay_factor,
            "decay_every": self.decay_every,
            "batch_size": self.batch_size,
            "total_iterations": self.total_iterations,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "train_manifests": list(self.train_manifests),
            "map_tags": None if self.map_tags is None else list(self.map_tags),
            "augment": self.augment.to_dict(),
            "sampler": {
                "d_max": self.sampler.d_max,
                "turn_threshold": self.sampler.turn_threshold,
                "turn_duplication_factor": self.sampler.turn_duplication_factor,
                "allow_nonconsecutive": self.sampler.allow_nonconsecutive,
            },
            "cnn": self.cnn.to_dict(),
            "lstm": None if self.lstm is None else self.lstm.to_dict(),
            "target_camera": self.target_camera.to_dict(),
            "workers": self.workers,
            "image_cache": self.image_cache,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "sampler" in d:
            d["sampler"] = PairSamplerConfig(**d["sampler"])
        if "cnn" in d:
            d["cnn"] = CnnConfig.from_dict(d["cnn"])
        if d.get("lstm") is not None:
            d["lstm"] = LstmConfig.from_dict(d["lstm"])
        if "target_camera" in d:
            d["target_camera"] = CameraModel.from_dict(d["target_camera"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def mse_loss(pred, target):
    """Mean squared error; returns a tensor for tensor inputs, a float otherwise."""
    if isinstance(pred, torch.Tensor):
        if pred.numel() == 0 or pred.shape != target.shape:
            raise ValueError("mse_loss needs equal, non-empty batches")
        return torch.mean((pred - target) ** 2)
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("mse_loss needs equal, non-empty batches")
    return float(np.mean((p - t) ** 2))


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.base_lr / cfg.lr_decay_factor ** (step // cfg.decay_every)


# -- data ----------------------------------------------------------------------


class ImageStore:
    """Thread-safe LRU cache of normalized frames keyed by (sequence, camera, frame)."""

    def __init__(self, manifest: DatasetManifest, target: CameraModel, capacity: int = 20_000):
        self.lookup = manifest.lookup()
        self.target = target
        self.capacity = capacity
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def record(self, seq: str, cam, frame: int) -> FrameRecord:
        return self.lookup[(seq, getattr(cam, "value", cam), frame)]

    def get(self, seq: str, cam, frame: int) -> np.ndarray:
        key = (seq, getattr(cam, "value", cam), frame)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        rec = self.lookup[key]
        img = normalize(load_image(rec.image_path), rec.source_camera, self.target).pixels
        img.setflags(write=False)
        with self._lock:
            self._cache[key] = img
            while len(self._cache) > self.capacity:
                self._cache.popitem(last=False)
        return img


def pair_tensor(store: ImageStore, pair: PairIndex, augment: AugmentConfig | None = None, seed: int = 0) -> np.ndarray:
    a = store.get(pair.sequence_id, pair.camera_id, pair.i)
    b = store.get(pair.sequence_id, pair.camera_id, pair.j)
    if augment is not None and augment.enabled:
        a, b = (im.pixels for im in augment_sequence([a, b], augment, seed))
    return stack_pair(a, b)


def window_tensor(store: ImageStore, window: SequenceWindow, augment: AugmentConfig | None = None, seed: int = 0) -> np.ndarray:
    """``[L, H, W, 6]``; one augmentation draw shared by every frame of the window."""
    p0 = window.pairs[0]
    frames = [p0.i] + [p.j for p in window.pairs]
    imgs = [store.get(p0.sequence_id, p0.camera_id, f) for f in frames]
    if augment is not None and augment.enabled:
        imgs = [im.pixels for im in augment_sequence(imgs, augment, seed)]
    return np.stack([stack_pair(a, b) for a, b in zip(imgs, imgs[1:])])


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def select_manifest(cfg: TrainConfig, manifest: DatasetManifest) -> DatasetManifest:
    return manifest.filter_maps(cfg.map_tags) if cfg.map_tags is not None else manifest


class _Batcher:
    """Deterministic per-step batch assembly: indices from ``(seed, step)``,
    augmentation seeds from ``(seed, global sample index)``."""

    def __init__(self, cfg: TrainConfig, store: ImageStore, items: list, make: Callable):
        self.cfg, self.store, self.items, self.make = cfg, store, items, make

    def indices(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed & 0xFFFFFFFF, step])
        return rng.integers(0, len(self.items), size=self.cfg.batch_size)

    def __call__(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self.indices(step)
        base = step * self.cfg.batch_size

        def one(k: int) -> np.ndarray:
            return self.make(self.store, self.items[idx[k]], self.cfg.augment, derive_seed(self.cfg.seed, base + k))

        x = np.stack(_map(one, list(range(len(idx))), self.cfg.workers))
        y = np.array([_label(self.items[i]) for i in idx], dtype=np.float32)
        return torch.from_numpy(x), torch.from_numpy(y)


def _label(item) -> float:
    return item.target.distance_label if isinstance(item, SequenceWindow) else item.distance_label


# -- optimizer state -------------------------------------------------------------


def _make_optimizer(model: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _optimizer_arrays(model: nn.Module, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{name}/exp_avg"] = st["exp_avg"].detach().numpy().copy()
        out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
        out[f"{name}/step"] = np.array(float(st["step"]))
    return out


def _restore_optimizer(model: nn.Module, opt: torch.optim.Adam, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if f"{name}/exp_avg" not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"{name}/step"])),
            "exp_avg": torch.from_numpy(np.array(arrays[f"{name}/exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{name}/exp_avg_sq"])),
        }


# -- loop ------------------------------------------------------------------------


@dataclass
class TrainHistory:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r[2] for r in self.rows]


def _run(
    cfg: TrainConfig,
    model: nn.Module,
    batcher: _Batcher,
    out_dir: Path | None,
    start_step: int,
    optimizer_state: dict | None,
    history: TrainHistory | None,
    extra: dict,
) -> ModelCheckpoint:
    torch.use_deterministic_algorithms(True)
    opt = _make_optimizer(model, lr_at(start_step, cfg))
    if optimizer_state:
        _restore_optimizer(model, opt, optimizer_state)
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        new = start_step == 0 or not log_path.exists()
        log_fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if new:
            writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()

    def snapshot(step: int) -> ModelCheckpoint:
        return ModelCheckpoint.from_model(model, step, _optimizer_arrays(model, opt), extra)

    try:
        for step in range(start_step, cfg.total_iterations):
            lr = lr_at(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            x, y = batcher(step)
            torch.manual_seed(derive_seed(cfg.seed ^ 0x5EED, step))
            model.train()
            try:
                pred = model(x)[0] if isinstance(model, DistanceCNN) else model(x)
                loss = mse_loss(pred, y)
            except NumericalError:
                loss = torch.tensor(float("nan"))
            if not torch.isfinite(loss):
                if out_dir is not None:
                    snapshot(step).save(out_dir / "last_good.npz")
                raise NumericalError(f"non-finite loss at step {step}; last good state kept")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            row = (step, lr, loss.item(), time.perf_counter() - t0)
            if history is not None:
                history.rows.append(row)
            if log_fh is not None:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}"])
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.5f", step, lr, row[2])
            done = step + 1
            if out_dir is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done < cfg.total_iterations:
                snapshot(done).save(out_dir / f"ckpt_{done:07d}.npz")
    finally:
        if log_fh is not None:
            log_fh.close()
    final = snapshot(max(cfg.total_iterations, start_step))
    if out_dir is not None:
        final.save(out_dir / "final.npz")
    return final


def cnn_training_items(cfg: TrainConfig, manifest: DatasetManifest) -> list[PairIndex]:
    return training_pairs(select_manifest(cfg, manifest).trajectories(), cfg.sampler)


def lstm_training_items(cfg: TrainConfig, manifest: DatasetManifest) -> list[SequenceWindow]:
    assert cfg.lstm is not None
    out: list[SequenceWindow] = []
    for traj in select_manifest(cfg, manifest).trajectories():
        pairs = consecutive_pairs(traj, cfg.sampler.turn_threshold)
        for w in windows_from_pairs(pairs, cfg.lstm.window_length, cfg.lstm.direction):
            out.extend([w] * (cfg.sampler.turn_duplication_factor if w.target.is_turning else 1))
    return out


def make_cnn_batcher(cfg: TrainConfig, manifest: DatasetManifest) -> _Batcher:
    items = cnn_training_items(cfg, manifest)
    if not items:
        raise ValueError("no training pairs: manifest empty or no pair within d_max")
    return _Batcher(cfg, ImageStore(select_manifest(cfg, manifest), cfg.target_camera, cfg.image_cache), items, pair_tensor)


def train_cnn(cfg: TrainConfig, manifest: DatasetManifest, out_dir: str | Path | None = None, resume: ModelCheckpoint | None = None, history: TrainHistory | None = None) -> ModelCheckpoint:
    """Adam on the pair MSE; returns the final checkpoint (step = total_iterations)."""
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    batcher = make_cnn_batcher(cfg, manifest)
    model = build_model(cfg.cnn, seed=cfg.seed)
    start, optim = 0, None
    if resume is not None:
        if resume.config_fingerprint != config_fingerprint(cfg.cnn):
            raise CheckpointError("resume checkpoint does not match the CNN config")
        model = resume.to_model()
        start, optim = resume.step, resume.optimizer_state
    extra = {"train_config": cfg.to_dict(), "adam": {"betas": list(ADAM_BETAS), "eps": ADAM_EPS}}
    return _run(cfg, model, batcher, None if out_dir is None else Path(out_dir), start, optim, history, extra)


def train_lstm(cfg: TrainConfig, manifest: DatasetManifest, cnn_init: ModelCheckpoint | None = None, out_dir: str | Path | None = None, resume: ModelCheckpoint | None = None, history: TrainHistory | None = None) -> ModelCheckpoint:
    """Fine-tune CNN and train the recurrent head on windows; loss on each
    window's target pair only. The CNN is initialized from ``cnn_init``."""
    if cfg.lstm is None:
        raise ValueError("train_lstm needs cfg.lstm")
    if resume is None:
        if cnn_init is None:
            raise ValueError("train_lstm needs a CNN initialization checkpoint")
        if cnn_init.config_fingerprint != config_fingerprint(cfg.cnn):
            raise CheckpointError(
                f"CNN checkpoint fingerprint {cnn_init.config_fingerprint} does not match config {config_fingerprint(cfg.cnn)}"
            )
    items = lstm_training_items(cfg, manifest)
    if not items:
        raise ValueError("no LSTM windows: every trajectory is shorter than the window")
    batcher = _Batcher(cfg, ImageStore(select_manifest(cfg, manifest), cfg.target_camera, cfg.image_cache), items, window_tensor)
    model = build_model(cfg.cnn, cfg.lstm, seed=cfg.seed)
    start, optim = 0, None
    if resume is not None:
        if resume.config_fingerprint != config_fingerprint(cfg.cnn, cfg.lstm):
            raise CheckpointError("resume checkpoint does not match the LSTM config")
        model = resume.to_model()
        start, optim = resume.step, resume.optimizer_state
    else:
        cnn_state = {k: torch.from_numpy(np.array(v)) for k, v in cnn_init.params.items()}
        model.cnn.load_state_dict(cnn_state, strict=True)
    extra = {"train_config": cfg.to_dict(), "adam": {"betas": list(ADAM_BETAS), "eps": ADAM_EPS}}
    if cnn_init is not None:
        extra["cnn_init_param_fingerprint"] = cnn_init.param_fingerprint()
    return _run(cfg, model, batcher, None if out_dir is None else Path(out_dir), start, optim, history, extra)


def read_train_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["loss"]), "wall_time_s": float(r["wall_time_s"])} for r in csv.DictReader(fh)]
