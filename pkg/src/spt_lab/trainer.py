"""AdamW + warmup/cosine training of prompts and task head over a frozen backbone."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import ImageDataset, augment_batch
from .diagnostics import NmiCurve, nmi_trace
from .errors import ConfigError, DivergenceError
from .prompts import PromptSet, trainable_parameters
from .tensor import Tensor, cross_entropy, matmul, no_grad
from .vit import VitModel, forward_features, forward_logits, readout


@dataclass
class TrainConfig:
    base_lr: float = 5e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 3
    final_lr: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    augment: str = "resize_only"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    full_finetune: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, final_lr: float = 1e-8) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine from base_lr down to final_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span <= 0 else min(max((step - warmup_steps) / span, 0.0), 1.0)
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, beta1, beta2, eps)


def adamw_step(params: list[Tensor], state: OptimizerState, lr: float, weight_decay: float,
               grads: list[np.ndarray] | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Raises ``DivergenceError`` before touching anything if a gradient is not finite.
    """
    if grads is None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {p.name or f'param{i}'}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data * (1.0 - lr * weight_decay) - lr * update).astype(p.dtype)


def prompts_digest(prompts: PromptSet | None) -> str:
    h = hashlib.sha256()
    if prompts is not None:
        for t in prompts.tokens:
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def accuracy(model: VitModel, prompts: PromptSet | None, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 128) -> float:
    if len(labels) == 0:
        return float("nan")
    correct = 0
    with no_grad():
        for s in range(0, len(labels), batch_size):
            logits = forward_logits(images[s:s + batch_size], model, prompts)
            correct += int((logits.data.argmax(axis=-1) == labels[s:s + batch_size]).sum())
    return correct / len(labels)


@dataclass
class RunReport:
    records: list[dict] = field(default_factory=list)
    initial_val_acc: float = float("nan")
    nmi: NmiCurve | None = None
    backbone_digest_before: str = ""
    backbone_digest_after: str = ""
    prompts_digest_before: str = ""
    prompts_digest_after: str = ""
    aborted: bool = False
    config: dict = field(default_factory=dict)

    @property
    def val_acc(self) -> list[float]:
        return [r["val_acc"] for r in self.records]

    @property
    def train_loss(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def final_val_acc(self) -> float:
        return self.records[-1]["val_acc"] if self.records else self.initial_val_acc


def _features(model, prompts, images, batch_size=128) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            xL, EL = forward_features(images[s:s + batch_size], model, prompts)
            out.append(readout(model, xL, EL).data)
    return np.concatenate(out)


def train(model: VitModel, prompts: PromptSet | None, train_set: ImageDataset, val_set: ImageDataset | None,
          config: TrainConfig, probe_images: np.ndarray | None = None, log_path=None,
          on_epoch: Callable[[int, VitModel, PromptSet | None], None] | None = None,
          step_losses: list | None = None) -> RunReport:
    """Train prompts and head (or everything with ``full_finetune``).

    Writes one JSON line per epoch to ``log_path`` when given. ``probe_images``
    enables an NMI trace at epoch 0 and after every epoch. ``step_losses``, if
    a list, receives every mini-batch loss.
    """
    model.freeze_backbone(not config.full_finetune)
    if config.full_finetune:
        params = model.backbone_parameters() + trainable_parameters(model, prompts).parameters
    else:
        params = trainable_parameters(model, prompts).parameters

    report = RunReport(config=asdict(config))
    report.backbone_digest_before = model.backbone_digest()
    report.prompts_digest_before = prompts_digest(prompts)
    if probe_images is not None and prompts is not None:
        report.nmi = NmiCurve(meta={"seed": config.seed})
        report.nmi.add(0, nmi_trace(model, prompts, probe_images))
    val_images = val_set.images if val_set is not None else np.zeros((0,))
    val_labels = val_set.labels if val_set is not None else np.zeros((0,), dtype=np.int64)
    report.initial_val_acc = accuracy(model, prompts, val_images, val_labels) if len(val_labels) else float("nan")

    log = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "w")

    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size) if n else 0
    total = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    state = OptimizerState.for_params(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)

    # nothing upstream of the head trains: embed once, train the linear head on cached features
    head_only = (not config.full_finetune and (prompts is None or prompts.frozen)
                 and config.augment == "resize_only")
    cached = _features(model, prompts, train_set.images) if head_only and config.epochs > 0 else None

    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            losses = []
            lr = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                lr = lr_schedule(step, total, warmup, config.base_lr, config.final_lr)
                for p in params:
                    p.grad = None
                if cached is not None:
                    feats = Tensor(cached[idx], dtype=model.head_w.dtype)
                    logits = matmul(feats, model.head_w) + model.head_b
                else:
                    batch = augment_batch(train_set.images[idx], config.augment, rng, model.config.image_size)
                    logits = forward_logits(batch, model, prompts)
                loss = cross_entropy(logits, train_set.labels[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
                loss.backward()
                adamw_step(params, state, lr, config.weight_decay)
                losses.append(value)
                if step_losses is not None:
                    step_losses.append(value)
                step += 1
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan")}
            if len(val_labels) and (epoch % config.eval_every == 0 or epoch == config.epochs):
                record["val_acc"] = accuracy(model, prompts, val_images, val_labels)
            else:
                record["val_acc"] = float("nan")
            report.records.append(record)
            if report.nmi is not None:
                report.nmi.add(epoch, nmi_trace(model, prompts, probe_images))
            if log is not None:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if on_epoch is not None:
                on_epoch(epoch, model, prompts)
    except DivergenceError as err:
        report.aborted = True
        err.report = report
        raise
    finally:
        if log is not None:
            log.close()
        report.backbone_digest_after = model.backbone_digest()
        report.prompts_digest_after = prompts_digest(prompts)
        for p in params:
            p.grad = None
    return report


def pretrain_backbone(vit_config, data: ImageDataset, config: TrainConfig, seed: int = 0) -> VitModel:
    """Supervised full training of a fresh ViT: the desk-scale stand-in for a pretrained backbone."""
    model = VitModel(vit_config, seed=seed)
    full = TrainConfig(**{**asdict(config), "full_finetune": True})
    train(model, None, data.subset("train"), None, full)
    model.freeze_backbone(True)
    return model
