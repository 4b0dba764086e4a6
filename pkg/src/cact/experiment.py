"""Context-aware grading vs. a patch-only vote on one synthetic dataset."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .context_net import Architecture, ContextModel
from .data import BACKGROUND, SyntheticSpec, derive_patch_dataset, generate, ingest
from .evaluation import accuracy
from .inference import patch_vote_baseline
from .local_repr import pretrain_patch_classifier
from .training import Strategy, TrainConfig, predict_images, train

log = logging.getLogger(__name__)


@dataclass
class ComparisonConfig:
    block_kind: str = "B1"
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    pretrain_cap: int | None = 240
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    finetune_extractor: bool = False
    augment: bool = True
    model_seed: int = 0
    splits: dict = field(default_factory=lambda: {"train": 15, "val": 5, "test": 5})


@dataclass
class ComparisonResult:
    data_seed: int
    context_accuracy: float
    patch_accuracy: float
    seconds: float

    @property
    def gap(self) -> float:
        return self.context_accuracy - self.patch_accuracy


def compare(data_seed: int, workdir, config: ComparisonConfig = ComparisonConfig()) -> ComparisonResult:
    """Generate the dataset for ``data_seed``, pretrain one extractor, then score both graders on test.

    The patch-only grader is the pretrained extractor with its patch head,
    voting over patches; an image with only background votes counts as background.
    """
    t0 = time.time()
    root = Path(workdir) / f"synthetic-{data_seed}"
    if not (root / "manifest.csv").exists():
        generate(root, SyntheticSpec(seed=data_seed), splits=config.splits)
    ds = ingest(root)
    tr, va, te = ds.subset(["train"]), ds.subset(["val"]), ds.subset(["test"])
    truths = [it.label for it in te]

    arch = Architecture(block_kind=config.block_kind, seed=config.model_seed)
    model = ContextModel(arch)
    patches, labels = derive_patch_dataset(tr, arch.extractor.patch_size, config.pretrain_cap,
                                           seed=config.model_seed)
    pre = pretrain_patch_classifier(model.encoder, patches, labels, arch.n_classes,
                                    epochs=config.pretrain_epochs, lr=config.pretrain_lr, seed=config.model_seed)
    votes = [patch_vote_baseline(it.pixels, pre.classifier) for it in te]
    patch_preds = [BACKGROUND if v.final_grade is None else v.final_grade for v in votes]
    patch_acc = accuracy(patch_preds, truths)

    tc = TrainConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, seed=config.model_seed,
                     finetune_extractor=config.finetune_extractor, augment=config.augment)
    model, _ = train(model, tr, va, Strategy("standard"), tc)
    ctx_acc = accuracy(predict_images(model, te).argmax(axis=1), truths)
    result = ComparisonResult(data_seed, ctx_acc, patch_acc, time.time() - t0)
    log.info("seed %d: context %.3f patch %.3f (%.0fs)", data_seed, ctx_acc, patch_acc, result.seconds)
    return result


def summary_rows(results) -> list[dict]:
    return [{**asdict(r), "gap": r.gap} for r in results]
