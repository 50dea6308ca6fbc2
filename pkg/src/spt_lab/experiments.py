"""Desk-scale experiment protocol shared by the acceptance suite and ``scripts/``.

A small ViT is pretrained with labels on a 10-class synthetic source task
(the stand-in for an ImageNet-pretrained backbone), then prompt-tuned on a
4-class downstream task with 512 training images.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import ImageDataset, SynthSpec, load_model, save_model, synth_dataset
from .prompt_init import (RANDOM_STRATEGIES, build_prompts, cross_layer_init, harvest_tokens,
                          vpt_uniform_bound)
from .prompts import PromptSet
from .trainer import RunReport, TrainConfig, train
from .vit import VitConfig, VitModel


@dataclass
class DeskSetup:
    vit: VitConfig = field(default_factory=VitConfig)
    source: SynthSpec = field(default_factory=lambda: SynthSpec(
        classes=10, per_class={"train": 100, "val": 20}, sigma_between=0.25, sigma_within=0.3, seed=100))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        base_lr=1e-3, weight_decay=0.05, epochs=8, warmup_epochs=1, full_finetune=True))
    downstream: SynthSpec = field(default_factory=lambda: SynthSpec(
        classes=4, per_class={"train": 128, "val": 16}, sigma_between=0.2, sigma_within=0.5))
    n_prompts: int = 8
    epochs: int = 30
    warmup_epochs: int = 3
    # base_lr per prompt strategy, picked by 5-seed final val accuracy (scripts/lr_grid.py)
    lr: dict = field(default_factory=lambda: {"random-uniform": 1e-2, "default": 5e-2})
    head_lr: float = 1e-2
    harvest_batch: int = 32
    probe_images: int = 16
    backbone_seed: int = 0

    def lr_for(self, strategy: str) -> float:
        return self.lr.get(strategy, self.lr["default"])


def pretrained_backbone(setup: DeskSetup, cache: str | Path | None = None) -> VitModel:
    """Supervised source-task training, reused from ``cache`` when the file exists."""
    if cache is not None and Path(cache).exists():
        model = load_model(cache)
    else:
        src = synth_dataset(setup.source)
        cfg = replace(setup.vit, num_classes=setup.source.classes)
        model = VitModel(cfg, seed=setup.backbone_seed)
        train(model, None, src.subset("train"), None, setup.pretrain)
        if cache is not None:
            save_model(cache, model)
    model.freeze_backbone(True)
    return model


def downstream_task(setup: DeskSetup, seed: int) -> tuple[ImageDataset, ImageDataset]:
    ds = synth_dataset(replace(setup.downstream, seed=1 + seed))
    return ds.subset("train"), ds.subset("val")


def make_prompts(model: VitModel, train_set: ImageDataset, strategy: str, seed: int, setup: DeskSetup,
                 mode: str = "deep", source: str = "self_prompt") -> PromptSet:
    c = model.config
    if strategy in RANDOM_STRATEGIES:
        scale = vpt_uniform_bound(c.patch_dim, c.dim) if strategy == "random-uniform" else None
        return build_prompts(strategy, mode, setup.n_prompts, c.depth, c.dim, seed=seed, scale=scale)
    pools = harvest_tokens(model, train_set.images, range(c.depth + 1), batch_size=setup.harvest_batch, seed=seed)
    if mode == "deep":
        return cross_layer_init(pools, setup.n_prompts, c.depth, source, strategy, seed)
    return build_prompts(strategy, mode, setup.n_prompts, c.depth, c.dim, pools, seed)


@dataclass
class TuningResult:
    strategy: str
    seed: int
    source: str
    frozen: bool
    report: RunReport
    seconds: float

    @property
    def val_acc(self) -> np.ndarray:
        return np.asarray(self.report.val_acc)

    @property
    def nmi(self) -> np.ndarray | None:
        return None if self.report.nmi is None else self.report.nmi.as_array()


def run_tuning(model: VitModel, setup: DeskSetup, seed: int, strategy: str, source: str = "self_prompt",
               frozen: bool = False, epochs: int | None = None, lr: float | None = None,
               probe: bool = True, mode: str = "deep") -> TuningResult:
    """One prompt-tuning run on the downstream task; the head is re-drawn from ``seed``."""
    train_set, val_set = downstream_task(setup, seed)
    model.reset_head(setup.downstream.classes, seed=seed)
    prompts = make_prompts(model, train_set, strategy, seed, setup, mode, source)
    prompts.set_frozen(frozen)
    if lr is None:
        lr = setup.head_lr if frozen else setup.lr_for(strategy)
    epochs = setup.epochs if epochs is None else epochs
    cfg = TrainConfig(base_lr=lr, epochs=epochs, warmup_epochs=min(setup.warmup_epochs, max(epochs - 1, 0)),
                      seed=seed)
    start = time.perf_counter()
    report = train(model, prompts, train_set, val_set, cfg,
                   probe_images=val_set.images[:setup.probe_images] if probe else None)
    return TuningResult(strategy, seed, source, frozen, report, time.perf_counter() - start)


def epochs_to_reach(curve, target: float) -> int | None:
    """First epoch (1-based) whose value is >= ``target``."""
    for e, v in enumerate(curve, start=1):
        if v >= target - 1e-12:
            return e
    return None

