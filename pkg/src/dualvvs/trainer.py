"""Dual-task training loop: contrastive views + relative-position pairs, SGD."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentPolicy, interleave_views, make_views_batch, sample_rp_batch
from .data import ImageSet
from .losses import LossBreakdown, combine, combined_loss, nt_xent, rp_loss_from_log_probs
from .model import BackboneConfig, DualTaskModel, HeadConfig, save_checkpoint

log = logging.getLogger(__name__)

_STREAM_ORDER, _STREAM_VIEWS, _STREAM_RP = 0, 1, 2
CLIP_THRESHOLD = 5.0


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, checkpoint failure, ...)."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.2
    weight_decay: float = 1e-6
    momentum: float = 0.9
    alpha: float = 0.01
    temperature: float = 0.5
    literal_temperature: bool = False
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    checkpoint_every: int = 10
    lr_schedule: str = "constant"
    resize_rp_blocks: bool = True
    rp_enabled: bool = True
    nonfinite_failsafe: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy.from_dict(self.augment)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.heads, dict):
            self.heads = HeadConfig(**self.heads)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.augment.output_size != self.backbone.input_size:
            raise ValueError(
                f"augment.output_size {self.augment.output_size} != backbone.input_size {self.backbone.input_size}"
            )

    @classmethod
    def paper(cls, alpha: float = 0.01, **overrides) -> "TrainConfig":
        """ResNet-18 on 96x96 STL-10, the full-scale recipe."""
        base = dict(
            batch_size=512, epochs=500, learning_rate=1.5, weight_decay=1e-6, momentum=0.9,
            alpha=alpha, augment=AugmentPolicy(output_size=96),
            backbone=BackboneConfig("resnet18", 512, 96),
            heads=HeadConfig(projection_dim=128, hidden_dim=512), checkpoint_every=50,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, alpha: float = 0.01, **overrides) -> "TrainConfig":
        """tiny_conv on 32x32 synthetic images, minutes on one CPU core."""
        return cls(**{"alpha": alpha, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; order of creation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return stream(seed, epoch, 0, _STREAM_ORDER).permutation(count)


@dataclass
class CheckpointSeries:
    run_dir: Optional[Path]
    checkpoints: list  # [(epoch, path)]
    epoch_logs: list  # one dict per epoch
    model: DualTaskModel


class Trainer:
    """Owns one model and its optimizer; :meth:`step` performs one update."""

    def __init__(self, config: TrainConfig, model: Optional[DualTaskModel] = None,
                 steps_per_epoch: int = 1):
        self.config = config
        self.dtype = torch.float64 if config.dtype == "float64" else torch.float32
        if model is None:
            model = DualTaskModel(config.backbone, config.heads, seed=config.seed)
        self.model = model.to(self.dtype)
        self.model.train()
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=config.learning_rate,
            momentum=config.momentum, weight_decay=config.weight_decay,
        )
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.version = 0
        self.nonfinite_events = 0
        self.clip = False
        self.last_batch_stats: dict = {}

    def _lr(self, epoch: int, batch_index: int) -> float:
        lr = self.config.learning_rate
        if self.config.lr_schedule == "cosine":
            total = self.config.epochs * self.steps_per_epoch
            t = epoch * self.steps_per_epoch + batch_index
            lr = 0.5 * lr * (1 + math.cos(math.pi * min(t, total) / total))
        return lr

    def compute_losses(self, batch: torch.Tensor, rng_views, rng_rp):
        """Forward both branches; returns ``(cl, rpl)`` tensors."""
        cfg = self.config
        v1, v2 = make_views_batch(batch, rng_views, cfg.augment)
        views = interleave_views(v1, v2).to(self.dtype)
        z = self.model.project(self.model.encode(views))
        cl = nt_xent(z, cfg.temperature, cfg.literal_temperature)
        if not cfg.rp_enabled:
            return cl, None
        resize = cfg.backbone.input_size if cfg.resize_rp_blocks else None
        block_a, block_b, labels = sample_rp_batch(batch, rng_rp, resize_to=resize)
        blocks = torch.cat([block_a, block_b]).to(self.dtype)
        feats = self.model.encode(blocks)
        n = block_a.shape[0]
        log_probs = self.model.rp_log_probs(feats[:n], feats[n:])
        rpl = rp_loss_from_log_probs(log_probs, labels)
        return cl, rpl

    def step(self, batch, epoch: int = 0, batch_index: Optional[int] = None) -> LossBreakdown:
        """One optimizer update on a batch of ``N`` images."""
        if self.model.frozen:
            raise RuntimeError("model is frozen (probe mode); unfreeze it before training")
        if not self.model.training:
            raise RuntimeError("model must be in training mode for a training step")
        batch = torch.as_tensor(batch)
        if batch.ndim != 4 or batch.shape[0] == 0:
            raise ValueError("step needs a non-empty [N, C, k, k] batch")
        if batch.shape[0] < 2:
            raise ValueError("contrastive step needs at least 2 images")
        if batch_index is None:
            batch_index = self.version
        cfg = self.config
        rng_views = stream(cfg.seed, epoch, batch_index, _STREAM_VIEWS)
        rng_rp = stream(cfg.seed, epoch, batch_index, _STREAM_RP)

        for group in self.optimizer.param_groups:
            group["lr"] = self._lr(epoch, batch_index)
        self.optimizer.zero_grad(set_to_none=False)
        cl, rpl = self.compute_losses(batch, rng_views, rng_rp)
        total = cl if rpl is None else combine(cl, rpl, cfg.alpha)
        cl_v = float(cl.detach())
        rpl_v = float("nan") if rpl is None else float(rpl.detach())
        self.last_batch_stats = {
            "epoch": epoch, "batch_index": batch_index, "cl_loss": cl_v, "rpl_loss": rpl_v,
            "total": float(total.detach()), "batch_mean": float(batch.mean()),
            "batch_std": float(batch.std()),
        }
        if not math.isfinite(float(total.detach())):
            return self._nonfinite()
        total.backward()
        if self.clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), CLIP_THRESHOLD)
        self.optimizer.step()
        self.version += 1
        if rpl is None:
            return LossBreakdown(cl_v, 0.0, cl_v, 0.0)
        return combined_loss(cl_v, rpl_v, cfg.alpha)

    def _nonfinite(self):
        self.nonfinite_events += 1
        stats = json.dumps(self.last_batch_stats)
        if not self.config.nonfinite_failsafe or self.nonfinite_events > 2:
            raise TrainingError(f"non-finite loss; last batch: {stats}")
        log.warning("non-finite loss (%d), update skipped; last batch: %s", self.nonfinite_events, stats)
        if self.nonfinite_events == 2:
            log.warning("enabling gradient clipping at %.1f", CLIP_THRESHOLD)
            self.clip = True
        self.optimizer.zero_grad()
        return None


def batches(count: int, batch_size: int, order: np.ndarray):
    n_full = count // batch_size
    if n_full == 0:
        yield order
        return
    for b in range(n_full):
        yield order[b * batch_size:(b + 1) * batch_size]


class _JsonLines:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "a") if path is not None else None

    def write(self, record: dict):
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(config: TrainConfig, images: ImageSet, run_dir=None, progress: bool = False) -> CheckpointSeries:
    """Train ``f``, ``g`` and ``h`` jointly on ``images`` (labels are ignored).

    With ``run_dir`` set, writes ``train_log.jsonl`` and checkpoints
    ``checkpoints/epoch_XXXX.pt`` (every ``checkpoint_every`` epochs and the
    last one).
    """
    if images.size != config.backbone.input_size:
        raise ValueError(
            f"images are {images.size}x{images.size} but the backbone expects {config.backbone.input_size}"
        )
    count = len(images)
    if count < 2:
        raise ValueError("need at least 2 images to train")
    steps = max(1, count // config.batch_size)
    trainer = Trainer(config, steps_per_epoch=steps)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    logger = _JsonLines(run_dir / "train_log.jsonl" if run_dir is not None else None)
    checkpoints, epoch_logs = [], []
    try:
        for epoch in range(config.epochs):
            order = epoch_order(config.seed, epoch, count)
            sums = np.zeros(3)
            n_ok = 0
            t0 = time.time()
            for b, idx in enumerate(batches(count, config.batch_size, order)):
                batch = torch.from_numpy(images.get(idx))
                out = trainer.step(batch, epoch=epoch, batch_index=b)
                if out is None:
                    logger.write({"event": "nonfinite", "epoch": epoch, "step": b,
                                  **trainer.last_batch_stats, "time": time.time()})
                    continue
                sums += (out.cl_loss, out.rpl_loss, out.total)
                n_ok += 1
                logger.write({"event": "step", "epoch": epoch, "step": b, **out.to_dict(),
                              "time": time.time()})
            means = sums / max(n_ok, 1)
            rec = {"event": "epoch", "epoch": epoch, "cl_loss": means[0], "rpl_loss": means[1],
                   "total": means[2], "alpha": config.alpha, "steps": n_ok,
                   "seconds": time.time() - t0}
            epoch_logs.append(rec)
            logger.write({**rec, "time": time.time()})
            if progress:
                log.info("epoch %d cl=%.4f rpl=%.4f total=%.4f (%.1fs)", epoch, *means, rec["seconds"])
            last = epoch == config.epochs - 1
            if run_dir is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
                path = run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.pt"
                try:
                    save_checkpoint(trainer.model, path, epoch + 1, {"alpha": config.alpha, "seed": config.seed})
                except OSError as exc:
                    raise TrainingError(f"could not write checkpoint {path}: {exc}") from exc
                checkpoints.append((epoch + 1, path))
    finally:
        logger.close()
    trainer.model.eval()
    return CheckpointSeries(run_dir, checkpoints, epoch_logs, trainer.model)
