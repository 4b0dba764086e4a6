"""Training strategies, the training loop, and the k-fold experiment driver."""
from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .context_net import Architecture, ContextModel
from .data import LabeledImage, derive_patch_dataset, stratified_folds
from .errors import ConfigurationError, ContractError
from .local_repr import pretrain_patch_classifier
from .losses import loss_cls, loss_joint, loss_seg, loss_weighted, one_hot, sample_weight  # noqa: F401
from .optim import RMSprop
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

STRATEGIES = ("standard", "weighted", "auxiliary", "attention")
HISTORY_FIELDS = ("epoch", "train_loss", "val_accuracy", "strategy", "fold", "seed")


@dataclass(frozen=True)
class Strategy:
    kind: str = "standard"
    alpha_joint: float = 0.5
    alpha_roi: float = 0.10

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")

    @property
    def attention(self) -> bool:
        return self.kind == "attention"

    @property
    def auxiliary(self) -> bool:
        return self.kind in ("auxiliary", "attention")

    def architecture(self, base: Architecture) -> Architecture:
        """``base`` with the gate and auxiliary head switched to match this strategy."""
        return dataclasses.replace(base, attention=self.attention, auxiliary=self.auxiliary)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    finetune_extractor: bool = True
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    pretrain_cap: int | None = None
    augment: bool = False
    fold: str = ""


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    @property
    def val_accuracy(self) -> list[float]:
        return [r["val_accuracy"] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, "train_loss": repr(row["train_loss"]),
                                 "val_accuracy": repr(row["val_accuracy"])})

    @classmethod
    def read_csv(cls, path) -> "History":
        with open(path, newline="") as fh:
            rows = [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                     "val_accuracy": float(r["val_accuracy"]), "strategy": r["strategy"],
                     "fold": r["fold"], "seed": int(r["seed"])} for r in csv.DictReader(fh)]
        return cls(rows)


def _stack(items: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([it.pixels for it in items])


def dihedral(a: np.ndarray, t: int) -> np.ndarray:
    """One of the 8 flips/rotations of the last two axes (``t`` in 0..7; 0 is identity)."""
    if t >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, t % 4, axes=(-2, -1)))


def _encode_frozen(model: ContextModel, items: Sequence[LabeledImage], batch: int = 16) -> np.ndarray:
    model.encoder.eval()
    with no_grad():
        cubes = [model.encoder(_stack(items[i : i + batch])).data for i in range(0, len(items), batch)]
    return np.concatenate(cubes)


def predict_images(model: ContextModel, items: Sequence[LabeledImage], cubes: np.ndarray | None = None,
                   batch: int = 16) -> np.ndarray:
    """Class probabilities ``[K, C]`` for whole images, eval mode."""
    model.eval()
    with no_grad():
        if cubes is None:
            cubes = _encode_frozen(model, items, batch)
        probs = [model.context(Tensor(cubes[i : i + batch])).probs.data for i in range(0, len(cubes), batch)]
    return np.concatenate(probs)


def strategy_loss(strategy: Strategy, out, labels, masks, rois, n_classes: int) -> Tensor:
    Y = one_hot(labels, n_classes)
    if strategy.kind == "standard":
        return loss_cls(Y, out.probs)
    if strategy.kind == "weighted":
        weights = [sample_weight(r, strategy.alpha_roi) for r in rois]
        return loss_weighted(Y, out.probs, weights)
    S = one_hot(masks, n_classes, axis=1)
    return loss_joint(Y, out.probs, S, out.seg, strategy.alpha_joint)


def train(model: ContextModel, train_items: Sequence[LabeledImage], val_items: Sequence[LabeledImage],
          strategy: Strategy, config: TrainConfig) -> tuple[ContextModel, History]:
    """Optimize ``model`` under ``strategy`` and restore its best-validation state.

    With ``finetune_extractor`` off, the extractor is frozen in eval mode and
    feature cubes are computed once up front.
    """
    if not train_items:
        raise ContractError("training split is empty")
    if not val_items:
        raise ContractError("validation split is empty")
    overlap = {it.id for it in train_items} & {it.id for it in val_items}
    if overlap:
        raise ContractError(f"train and validation share image ids: {sorted(overlap)[:5]}")
    arch = model.arch
    if (arch.attention, arch.auxiliary) != (strategy.attention, strategy.auxiliary):
        raise ConfigurationError(
            f"model (attention={arch.attention}, auxiliary={arch.auxiliary}) does not match strategy {strategy.kind!r}")

    n_classes = arch.n_classes
    labels = np.array([it.label for it in train_items])
    masks = np.stack([it.mask for it in train_items])
    rois = np.array([it.roi_ratio for it in train_items])
    val_labels = np.array([it.label for it in val_items])

    frozen = not config.finetune_extractor
    params = model.context_parameters() if frozen else list(model.named_parameters())
    opt = RMSprop(params, lr=config.lr, rho=config.rho, eps=config.eps)
    shuffle = np.random.default_rng([config.seed, 1])

    square = train_items[0].pixels.shape[-1] == train_items[0].pixels.shape[-2]
    n_views = (8 if square else 2) if config.augment else 1
    views = [t if square else 4 * t for t in range(n_views)]
    val_cubes = _encode_frozen(model, val_items) if frozen else None
    pixels = _stack(train_items)
    if frozen:
        train_cubes = np.stack([_encode_frozen(model, [dataclasses.replace(it, pixels=dihedral(it.pixels, t))
                                                       for it in train_items]) for t in views])

    history = History()
    best_acc, best_state = -1.0, model.state_dict()
    for epoch in range(config.epochs):
        model.train()
        if frozen:
            model.encoder.eval()
        order = shuffle.permutation(len(train_items))
        total = 0.0
        view = shuffle.integers(n_views, size=order.size) if n_views > 1 else np.zeros(order.size, int)
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            vs = view[start : start + config.batch_size]
            batch_masks = np.stack([dihedral(masks[i], views[v]) for i, v in zip(idx, vs)])
            opt.zero_grad()
            if frozen:
                out = model.context(Tensor(train_cubes[vs, idx]))
            else:
                out = model(np.stack([dihedral(pixels[i], views[v]) for i, v in zip(idx, vs)]))
            loss = strategy_loss(strategy, out, labels[idx], batch_masks, rois[idx], n_classes)
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
        probs = predict_images(model, val_items, val_cubes)
        acc = float(np.mean(probs.argmax(axis=1) == val_labels))
        history.rows.append({"epoch": epoch, "train_loss": total / len(train_items), "val_accuracy": acc,
                             "strategy": strategy.kind, "fold": config.fold, "seed": config.seed})
        log.info("epoch %d loss %.4f val_acc %.3f", epoch, history.rows[-1]["train_loss"], acc)
        if acc > best_acc:
            best_acc, best_state = acc, model.state_dict()
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def fit(arch: Architecture, strategy: Strategy, train_items, val_items, config: TrainConfig,
        pretrained: dict | None = None) -> tuple[ContextModel, History]:
    """Build a model for ``strategy``, optionally pretrain its extractor on patches, then train."""
    model = ContextModel(strategy.architecture(arch))
    if pretrained is not None:
        model.encoder.load_state_dict(pretrained)
    elif config.pretrain_epochs > 0:
        patches, plabels = derive_patch_dataset(train_items, arch.extractor.patch_size,
                                                config.pretrain_cap, seed=config.seed)
        pretrain_patch_classifier(model.encoder, patches, plabels, arch.n_classes,
                                  epochs=config.pretrain_epochs, lr=config.pretrain_lr, seed=config.seed)
    return train(model, train_items, val_items, strategy, config)


# ---------------------------------------------------------------------------
# k-fold driver
# ---------------------------------------------------------------------------
@dataclass
class FoldTable:
    """Per-configuration fold accuracies (percent)."""

    k: int
    rows: dict[str, list[float]] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return [f"Fold-{i + 1}" for i in range(self.k)] + ["Mean", "Std."]

    def summary(self, name: str) -> tuple[float, float]:
        acc = np.asarray(self.rows[name])
        return float(acc.mean()), float(acc.std())

    def matrix(self) -> np.ndarray:
        return np.array([list(v) + list(self.summary(n)) for n, v in self.rows.items()])

    def write_csv(self, path) -> None:
        from .evaluation import write_matrix_csv

        write_matrix_csv(path, list(self.rows), self.columns, self.matrix())


@dataclass(frozen=True)
class FoldJob:
    name: str
    arch: Architecture
    strategy: Strategy
    config: TrainConfig
    fold: int


def _split_for_fold(folds: np.ndarray, f: int, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    test = np.flatnonzero(folds == f)
    if k >= 3:
        v = (f + 1) % k
        val = np.flatnonzero(folds == v)
        train = np.flatnonzero((folds != f) & (folds != v))
    else:
        train = val = np.flatnonzero(folds != f)
    return train, val, test


def _run_job(job: FoldJob, items, folds, k) -> float:
    train_idx, val_idx, test_idx = _split_for_fold(folds, job.fold, k)
    tr = [items[i] for i in train_idx]
    va = [items[i] for i in val_idx]
    te = [items[i] for i in test_idx]
    if val_idx is train_idx:
        va = [dataclasses.replace(it, id=f"{it.id}#val") for it in va]
    config = dataclasses.replace(job.config, fold=str(job.fold + 1))
    model, _ = fit(job.arch, job.strategy, tr, va, config)
    probs = predict_images(model, te)
    return 100.0 * float(np.mean(probs.argmax(axis=1) == np.array([it.label for it in te])))


def run_folds(items: Sequence[LabeledImage], k: int, configs: Sequence[tuple[str, Architecture, Strategy]],
              config: TrainConfig, workers: int = 1) -> FoldTable:
    """Class-stratified k-fold evaluation of every ``(name, arch, strategy)`` configuration."""
    folds = stratified_folds([it.label for it in items], k, [it.id for it in items])
    jobs = [FoldJob(name, arch, strat, config, f) for name, arch, strat in configs for f in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_run_job, jobs, [items] * len(jobs), [folds] * len(jobs), [k] * len(jobs)))
    else:
        accs = [_run_job(job, items, folds, k) for job in jobs]
    table = FoldTable(k)
    for job, acc in zip(jobs, accs):
        table.rows.setdefault(job.name, []).append(acc)
    return table
