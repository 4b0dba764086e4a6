"""Patch tiling, pluggable patch extractors, and feature-cube encoding."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, StratificationError
from .losses import loss_cls, one_hot
from .nn import BatchNorm2d, Conv2d, Dense, Module, ModuleList
from .optim import RMSprop
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

FAMILIES = ("reference5", "compact_residual", "compact_inception")


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------
def grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    return math.ceil(height / patch_size), math.ceil(width / patch_size)


def pad_to_grid(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Zero-pad ``[C,H,W]`` on the bottom/right to the next multiple of ``patch_size``."""
    if patch_size < 1:
        raise ContractError(f"patch size must be >= 1, got {patch_size}")
    if image.ndim != 3 or image.size == 0:
        raise ContractError(f"expected a non-empty [C,H,W] image, got shape {image.shape}")
    C, H, W = image.shape
    M, N = grid_shape(H, W, patch_size)
    if (M * patch_size, N * patch_size) == (H, W):
        return image
    return np.pad(image, ((0, 0), (0, M * patch_size - H), (0, N * patch_size - W)))


def tile(image: np.ndarray, patch_size: int) -> list[tuple[int, int, np.ndarray]]:
    """Non-overlapping patches in row-major order as ``(i, j, patch[C,p,p])``."""
    padded = pad_to_grid(np.asarray(image), patch_size)
    M, N = grid_shape(*padded.shape[1:], patch_size)
    p = patch_size
    return [(i, j, padded[:, i * p : (i + 1) * p, j * p : (j + 1) * p]) for i in range(M) for j in range(N)]


def untile(patches: list[tuple[int, int, np.ndarray]], height: int, width: int) -> np.ndarray:
    """Reassemble :func:`tile` output and crop the padding."""
    p = patches[0][2].shape[-1]
    M = max(i for i, _, _ in patches) + 1
    N = max(j for _, j, _ in patches) + 1
    out = np.zeros((patches[0][2].shape[0], M * p, N * p))
    for i, j, patch in patches:
        out[:, i * p : (i + 1) * p, j * p : (j + 1) * p] = patch
    return out[:, :height, :width]


def patchify(images: np.ndarray, patch_size: int) -> tuple[np.ndarray, int, int]:
    """``[B,C,H,W]`` -> ``([B*M*N, C, p, p], M, N)`` with row-major cells per image."""
    B, C, H, W = images.shape
    M, N = grid_shape(H, W, patch_size)
    p = patch_size
    if (M * p, N * p) != (H, W):
        images = np.pad(images, ((0, 0), (0, 0), (0, M * p - H), (0, N * p - W)))
    cells = images.reshape(B, C, M, p, N, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(cells.reshape(B * M * N, C, p, p)), M, N


# ---------------------------------------------------------------------------
# extractors
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ExtractorSpec:
    family: str = "reference5"
    feature_depth: int = 32
    patch_size: int = 56
    in_channels: int = 1
    width: int = 8
    depth: int = 1  # residual blocks / inception modules for the compact families
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown extractor family {self.family!r}; expected one of {FAMILIES}")
        if self.feature_depth < 1:
            raise ConfigurationError("feature depth must be >= 1")


class Reference5(Module):
    """Five 4x4 stride-2 convolutions, each followed by batch-norm and leaky ReLU."""

    def __init__(self, spec: ExtractorSpec, rng: np.random.Generator):
        super().__init__()
        w, d = spec.width, spec.feature_depth
        widths = [w, 2 * w, 2 * w, d, d]
        self.slope = spec.leaky_slope
        self.convs = ModuleList()
        self.norms = ModuleList()
        size, prev = spec.patch_size, spec.in_channels
        for out in widths:
            if size + 2 < 4:
                raise ConfigurationError(f"patch size {spec.patch_size} too small for five 4x4/2 convolutions")
            self.convs.append(Conv2d(prev, out, 4, rng, stride=2, padding=1, bias=False))
            self.norms.append(BatchNorm2d(out))
            size, prev = T.conv_output_size(size, 4, 2, 1), out

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = T.leaky_relu(norm(conv(x)), self.slope)
        return x


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding="same"):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, padding=padding, bias=False)
        self.norm = BatchNorm2d(out_ch)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class ResidualUnit(Module):
    def __init__(self, ch, rng):
        super().__init__()
        self.a = ConvBNReLU(ch, ch, 3, rng)
        self.conv = Conv2d(ch, ch, 3, rng, padding="same", bias=False)
        self.norm = BatchNorm2d(ch)

    def forward(self, x):
        return T.relu(T.add(x, self.norm(self.conv(self.a(x)))))


class CompactResidual(Module):
    """Strided stem, ``depth`` residual units, a strided transition and a 1x1 projection."""

    def __init__(self, spec: ExtractorSpec, rng):
        super().__init__()
        w = spec.width
        self.stem = ConvBNReLU(spec.in_channels, w, 3, rng, stride=2, padding=1)
        self.units = ModuleList(ResidualUnit(w, rng) for _ in range(spec.depth))
        self.down = ConvBNReLU(w, 2 * w, 3, rng, stride=2, padding=1)
        self.proj = ConvBNReLU(2 * w, spec.feature_depth, 1, rng)

    def forward(self, x):
        x = self.stem(x)
        for unit in self.units:
            x = unit(x)
        return self.proj(self.down(x))


class InceptionUnit(Module):
    def __init__(self, in_ch, branch, rng):
        super().__init__()
        self.b1 = ConvBNReLU(in_ch, branch, 1, rng)
        self.b3a = ConvBNReLU(in_ch, branch, 1, rng)
        self.b3b = ConvBNReLU(branch, branch, 3, rng)
        self.bp = ConvBNReLU(in_ch, branch, 1, rng)
        self.out_ch = 3 * branch

    def forward(self, x):
        return T.concat([self.b1(x), self.b3b(self.b3a(x)), self.bp(T.pool(x, "avg3x3"))], axis=1)


class CompactInception(Module):
    """Strided stem, ``depth`` parallel-branch units, then a 1x1 projection."""

    def __init__(self, spec: ExtractorSpec, rng):
        super().__init__()
        w = spec.width
        self.stem = ConvBNReLU(spec.in_channels, w, 3, rng, stride=2, padding=1)
        self.down = ConvBNReLU(w, w, 3, rng, stride=2, padding=1)
        self.units = ModuleList()
        ch = w
        for _ in range(spec.depth):
            unit = InceptionUnit(ch, w, rng)
            self.units.append(unit)
            ch = unit.out_ch
        self.proj = ConvBNReLU(ch, spec.feature_depth, 1, rng)

    def forward(self, x):
        x = self.down(self.stem(x))
        for unit in self.units:
            x = unit(x)
        return self.proj(x)


def build_extractor(spec: ExtractorSpec, rng: np.random.Generator) -> Module:
    cls = {"reference5": Reference5, "compact_residual": CompactResidual,
           "compact_inception": CompactInception}[spec.family]
    return cls(spec, rng)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------
@dataclass
class FeatureCube:
    grid: Tensor  # [1, d, M, N]
    origin: str = ""
    pooling: str = "avg"
    patch_size: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        _, d, M, N = self.grid.shape
        return M, N, d


class LocalEncoder(Module):
    """Runs the extractor over every grid cell and pools each map to one feature vector.

    ``patch_forwards`` counts patches pushed through the extractor.
    """

    def __init__(self, spec: ExtractorSpec, pooling: str, rng: np.random.Generator,
                 freeze_bn: bool = False, chunk: int = 512):
        super().__init__()
        if pooling not in ("avg", "max"):
            raise ConfigurationError(f"pooling must be 'avg' or 'max', got {pooling!r}")
        self.spec, self.pooling, self.freeze_bn, self.chunk = spec, pooling, freeze_bn, chunk
        self.extractor = build_extractor(spec, rng)
        self.patch_forwards = 0

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_bn:
            self.extractor.eval()
        return self

    def embed_patches(self, patches: np.ndarray) -> Tensor:
        """``[P,C,p,p]`` pixels -> pooled features ``[P, d]``."""
        self.patch_forwards += patches.shape[0]
        kind = "global_avg" if self.pooling == "avg" else "global_max"
        # eval-mode batch-norm is per-sample, so chunking cannot change results there
        step = patches.shape[0] if self.extractor.training else self.chunk
        pieces = []
        for start in range(0, patches.shape[0], step):
            fmap = self.extractor(Tensor(patches[start : start + step]))
            pooled = T.pool(fmap, kind)
            pieces.append(T.reshape(pooled, pooled.shape[:2]))
        return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)

    def forward(self, images: np.ndarray) -> Tensor:
        """``[B,C,H,W]`` pixels -> feature cube ``[B, d, M, N]``."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.size == 0:
            raise ContractError(f"expected non-empty [B,C,H,W] images, got {images.shape}")
        patches, M, N = patchify(images, self.spec.patch_size)
        feats = self.embed_patches(patches)
        cube = T.reshape(feats, (images.shape[0], M, N, feats.shape[1]))
        return T.transpose(cube, (0, 3, 1, 2))


def encode(image: np.ndarray, encoder: LocalEncoder, origin: str = "") -> FeatureCube:
    """Encode one ``[C,H,W]`` image into its feature cube (eval mode, no graph)."""
    was_training = encoder.training
    encoder.eval()
    try:
        with no_grad():
            grid = encoder(np.asarray(image)[None])
    finally:
        encoder.train(was_training)
    return FeatureCube(grid, origin, encoder.pooling, encoder.spec.patch_size)


# ---------------------------------------------------------------------------
# patch pretraining
# ---------------------------------------------------------------------------
class PatchClassifier(Module):
    """Extractor + global pooling + a throwaway dense head."""

    def __init__(self, encoder: LocalEncoder, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.encoder = encoder
        self.head = Dense(encoder.spec.feature_depth, n_classes, rng)

    def forward(self, patches: np.ndarray) -> Tensor:
        return T.softmax(self.head(self.encoder.embed_patches(patches)), axis=1)

    def predict(self, patches: np.ndarray) -> np.ndarray:
        self.eval()
        with no_grad():
            return self(patches).data.argmax(axis=1)


@dataclass
class PretrainResult:
    classifier: PatchClassifier
    losses: list[float] = field(default_factory=list)
    val_accuracy: float | None = None


def pretrain_patch_classifier(encoder: LocalEncoder, patches: np.ndarray, labels: np.ndarray,
                              n_classes: int, epochs: int = 10, lr: float = 1e-3, batch_size: int = 64,
                              seed: int = 0, val: tuple[np.ndarray, np.ndarray] | None = None,
                              rho: float = 0.9, eps: float = 1e-8) -> PretrainResult:
    """Train ``encoder``'s extractor as a patch classifier with RMSprop.

    The dense head is returned with the result but plays no further role.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    present = np.flatnonzero(counts)
    if present.size < 1 or labels.size == 0:
        raise StratificationError("patch dataset is empty")
    model = PatchClassifier(encoder, n_classes, np.random.default_rng([seed, 3]))
    opt = RMSprop(list(model.named_parameters()), lr=lr, rho=rho, eps=eps)
    shuffle = np.random.default_rng([seed, 1])
    targets = one_hot(labels, n_classes)
    result = PretrainResult(model)
    for epoch in range(epochs):
        model.train()
        order = shuffle.permutation(labels.size)
        total = 0.0
        for start in range(0, order.size, batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue
            opt.zero_grad()
            loss = loss_cls(targets[idx], model(patches[idx]))
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
        result.losses.append(total / labels.size)
        log.info("pretrain epoch %d loss %.4f", epoch, result.losses[-1])
    if val is not None:
        result.val_accuracy = float(np.mean(model.predict(val[0]) == val[1]))
    return result
