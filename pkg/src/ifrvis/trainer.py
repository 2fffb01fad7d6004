"""Training loop, Adam optimizer and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import VideoSample, downsample_masks, sample_training_clip
from .encoder import STRIDE
from .losses import ClipTarget, LossConfig, clip_loss
from .model import IFRModel, ModelConfig
from .tensor_io import load_tensors, save_tensors

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Loss or gradients became non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    clip_len: int = 2
    lr: float = 1e-3
    encoder_lr_mult: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0
    lr_decay_step: int = 0  # 0 disables step decay
    lr_decay_gamma: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.clip_len < 1:
            raise ValueError("steps must be >= 0, batch and clip_len >= 1")
        if not 0.0 < self.encoder_lr_mult <= 1.0:
            raise ValueError("encoder_lr_mult must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(
        self,
        named_params: dict,
        lr: float,
        lr_mult: Optional[dict] = None,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = named_params
        self.lr = lr
        self.lr_mult = lr_mult or {}
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lr * self.lr_mult.get(name, 1.0)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Sequence, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads:
            g *= factor
    return norm


def clip_target(clip: VideoSample) -> ClipTarget:
    masks = downsample_masks(clip.masks, STRIDE)
    K, n = masks.shape[:2]
    return ClipTarget(clip.categories.astype(np.int64), masks.reshape(K, n, -1).astype(np.float64))


def train_step(model: IFRModel, clips: Sequence[VideoSample], optimizer: Adam, loss_cfg: LossConfig, grad_clip: float = 1.0) -> dict:
    """One forward / match / loss / backward / update cycle on a batch of equally sized clips."""
    frames = np.stack([c.frames for c in clips]).astype(np.float64)
    out = model(frames)
    if not all(np.isfinite(x.data).all() for lp in out.layers for x in (lp.class_logits, lp.kernels)):
        raise NumericError(f"non-finite model outputs at step {optimizer.t + 1}")
    loss, breakdown = clip_loss(out, [clip_target(c) for c in clips], loss_cfg)
    if not np.isfinite(breakdown["total"]):
        optimizer.zero_grad()
        raise NumericError(f"non-finite loss at step {optimizer.t + 1}: {breakdown}")
    T.backward(loss)
    breakdown["grad_norm"] = clip_grad_norm(list(optimizer.params.values()), grad_clip)
    if not np.isfinite(breakdown["grad_norm"]):
        optimizer.zero_grad()
        raise NumericError(f"non-finite gradient norm at step {optimizer.t + 1}: {breakdown}")
    optimizer.step()
    optimizer.zero_grad()
    return breakdown


@dataclass
class Checkpoint:
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    adam_t: int
    rng_state: dict
    model: dict
    train: dict
    loss: dict
    log: list = field(default_factory=list)

    def build_model(self) -> IFRModel:
        model = IFRModel(ModelConfig(**self.model))
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, ck: Checkpoint) -> None:
    tensors = {f"param/{k}": v for k, v in ck.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in ck.adam_m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in ck.adam_v.items()})
    trailer = {
        "format_version": CHECKPOINT_VERSION,
        "step": ck.step,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "model": ck.model,
        "train": ck.train,
        "loss": ck.loss,
        "log": ck.log,
    }
    save_tensors(path, tensors, trailer)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = load_tensors(path)
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    groups: dict = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in tensors.items():
        prefix, _, name = key.partition("/")
        if prefix not in groups:
            raise CheckpointError(f"unexpected tensor {key!r}")
        groups[prefix][name] = arr
    return Checkpoint(
        groups["param"],
        groups["adam_m"],
        groups["adam_v"],
        int(meta["step"]),
        int(meta["adam_t"]),
        meta["rng_state"],
        meta["model"],
        meta["train"],
        meta["loss"],
        meta.get("log", []),
    )


class Trainer:
    """Seeded training loop whose full state (weights, moments, sampler RNG) can be checkpointed."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig, dataset: Sequence[VideoSample]):
        if not dataset:
            raise ValueError("training needs a non-empty dataset")
        self.model_cfg, self.train_cfg, self.loss_cfg = model_cfg, train_cfg, loss_cfg
        self.dataset = dataset
        self.model = IFRModel(model_cfg)
        params = dict(self.model.named_parameters())
        enc = self.model.encoder_parameter_names()
        self.optimizer = Adam(params, train_cfg.lr, {k: train_cfg.encoder_lr_mult for k in enc})
        self.rng = np.random.default_rng(train_cfg.seed)
        self.step = 0
        self.log: list = []

    def batch_indices(self) -> np.ndarray:
        """Dataset order for the current step: epochs of shuffled indices, each shuffle seeded by (seed, epoch)."""
        n, b = len(self.dataset), self.train_cfg.batch
        first = self.step * b
        out = []
        for pos in range(first, first + b):
            epoch, k = divmod(pos, n)
            out.append(np.random.default_rng([self.train_cfg.seed, epoch]).permutation(n)[k])
        return np.array(out)

    def sample_batch(self) -> list:
        idx = self.batch_indices()
        return [sample_training_clip(self.dataset[i], min(self.train_cfg.clip_len, self.dataset[i].length), self.rng) for i in idx]

    def current_lr(self) -> float:
        cfg = self.train_cfg
        if cfg.lr_decay_step > 0:
            return cfg.lr * cfg.lr_decay_gamma ** (self.step // cfg.lr_decay_step)
        return cfg.lr

    def run(
        self,
        steps: Optional[int] = None,
        checkpoint_path=None,
        on_step: Optional[Callable[[int, dict], None]] = None,
    ) -> Checkpoint:
        target = self.train_cfg.steps if steps is None else steps
        every = self.train_cfg.checkpoint_every
        while self.step < target:
            self.optimizer.lr = self.current_lr()
            br = train_step(self.model, self.sample_batch(), self.optimizer, self.loss_cfg, self.train_cfg.grad_clip)
            self.step += 1
            br["step"] = self.step
            self.log.append(br)
            if on_step is not None:
                on_step(self.step, br)
            if checkpoint_path and every and self.step % every == 0:
                save_checkpoint(checkpoint_path, self.checkpoint())
        ck = self.checkpoint()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, ck)
        return ck

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.model.state_dict(),
            {k: v.copy() for k, v in self.optimizer.m.items()},
            {k: v.copy() for k, v in self.optimizer.v.items()},
            self.step,
            self.optimizer.t,
            self.rng.bit_generator.state,
            self.model_cfg.to_dict(),
            self.train_cfg.to_dict(),
            self.loss_cfg.to_dict(),
            list(self.log),
        )

    def restore(self, ck: Checkpoint) -> None:
        if ModelConfig(**ck.model).to_dict() != self.model_cfg.to_dict():
            raise CheckpointError(f"checkpoint model config {ck.model} does not match {self.model_cfg.to_dict()}")
        self.model.load_state_dict(ck.params)
        for name in self.optimizer.m:
            if name not in ck.adam_m or ck.adam_m[name].shape != self.optimizer.m[name].shape:
                raise CheckpointError(f"optimizer moments missing or misshaped for {name}")
            self.optimizer.m[name][...] = ck.adam_m[name]
            self.optimizer.v[name][...] = ck.adam_v[name]
        self.optimizer.t = ck.adam_t
        self.rng.bit_generator.state = ck.rng_state
        self.step = ck.step
        self.log = list(ck.log)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    dataset: Sequence[VideoSample],
    resume: Optional[Checkpoint] = None,
    checkpoint_path=None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> Checkpoint:
    trainer = Trainer(model_cfg, train_cfg, loss_cfg, dataset)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run(checkpoint_path=checkpoint_path, on_step=on_step)
