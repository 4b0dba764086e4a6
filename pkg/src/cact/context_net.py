"""Aggregation network over feature cubes: attention gate, context blocks, heads.

All 3x3 convolutions use "same" padding so every block preserves the M x N
grid, which the channel concatenations require.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .local_repr import ExtractorSpec, LocalEncoder
from .nn import BatchNorm2d, Conv2d, Dense, Module, ModuleList
from .tensor import Tensor

BLOCK_KINDS = ("B1", "B2", "B3")
DEFAULT_WIDTHS = {"B1": (64,), "B2": (16, 32), "B3": (8, 8, 8, 8)}
N_BLOCKS = 3

# component keys for independent initialization streams
_RNG_EXTRACTOR, _RNG_GATE, _RNG_BLOCKS, _RNG_HEAD, _RNG_AUX = range(5)


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng([seed, 100 + key])


class AttentionGate(Module):
    """``F' = softmax(conv1x1(F)) * F``; softmax over the grid (``spatial``) or the depth (``channel``)."""

    def __init__(self, depth: int, rng, axis: str = "spatial"):
        super().__init__()
        if axis not in ("spatial", "channel"):
            raise ConfigurationError(f"attention axis must be 'spatial' or 'channel', got {axis!r}")
        self.depth, self.axis = depth, axis
        # a per-channel bias is constant over the grid, so the spatial softmax would cancel it
        self.conv = Conv2d(depth, depth, 1, rng, bias=axis == "channel")

    def weights(self, cube: Tensor) -> Tensor:
        if cube.shape[1] != self.depth:
            raise DimensionError(f"attention gate depth {self.depth} != cube axis 1 ({cube.shape[1]})")
        return T.softmax(self.conv(cube), axis=(2, 3) if self.axis == "spatial" else 1)

    def forward(self, cube: Tensor) -> Tensor:
        return T.hadamard(self.weights(cube), cube)


class ConvNormAct(Module):
    """conv -> batch-norm -> ReLU (optionally without the norm)."""

    def __init__(self, in_ch, out_ch, kernel, rng, norm=True):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, padding="same", bias=not norm)
        self.norm = BatchNorm2d(out_ch) if norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return T.relu(x)


class BlockB1(Module):
    """3x3 conv -> ReLU -> batch-norm."""

    def __init__(self, in_ch, widths, rng, norm=True):
        super().__init__()
        (width,) = widths
        self.conv = Conv2d(in_ch, width, 3, rng, padding="same")
        self.norm = BatchNorm2d(width) if norm else None
        self.out_ch = width

    def forward(self, x):
        x = T.relu(self.conv(x))
        return self.norm(x) if self.norm is not None else x


class BlockB2(Module):
    """Squeeze 1x1 -> 3x3 -> expand 1x1, concatenated with the block input."""

    def __init__(self, in_ch, widths, rng, norm=True):
        super().__init__()
        squeeze, expand = widths
        self.squeeze = ConvNormAct(in_ch, squeeze, 1, rng, norm)
        self.spatial = ConvNormAct(squeeze, squeeze, 3, rng, norm)
        self.expand = ConvNormAct(squeeze, expand, 1, rng, norm)
        self.out_ch = in_ch + expand

    def forward(self, x):
        return T.concat([self.expand(self.spatial(self.squeeze(x))), x], axis=1)


class BlockB3(Module):
    """Four parallel branches (1x1-3x3-3x3, 1x1, 1x1-3x3, avg3x3-1x1), concatenated."""

    def __init__(self, in_ch, widths, rng, norm=True):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.a1 = ConvNormAct(in_ch, w1, 1, rng, norm)
        self.a2 = ConvNormAct(w1, w1, 3, rng, norm)
        self.a3 = ConvNormAct(w1, w1, 3, rng, norm)
        self.b1 = ConvNormAct(in_ch, w2, 1, rng, norm)
        self.c1 = ConvNormAct(in_ch, w3, 1, rng, norm)
        self.c2 = ConvNormAct(w3, w3, 3, rng, norm)
        self.d1 = ConvNormAct(in_ch, w4, 1, rng, norm)
        self.out_ch = w1 + w2 + w3 + w4

    def forward(self, x):
        return T.concat([
            self.a3(self.a2(self.a1(x))),
            self.b1(x),
            self.c2(self.c1(x)),
            self.d1(T.pool(x, "avg3x3")),
        ], axis=1)


_BLOCKS = {"B1": BlockB1, "B2": BlockB2, "B3": BlockB3}


def block_out_depth(kind: str, in_depth: int, widths) -> int:
    if kind == "B1":
        return widths[0]
    if kind == "B2":
        return in_depth + widths[1]
    if kind == "B3":
        return sum(widths)
    raise ConfigurationError(f"unknown block kind {kind!r}")


def cascade_depths(kind: str, in_depth: int, widths, n_blocks: int = N_BLOCKS) -> list[int]:
    depths = [in_depth]
    for _ in range(n_blocks):
        depths.append(block_out_depth(kind, depths[-1], widths))
    return depths


class Cascade(Module):
    def __init__(self, kinds, in_depth, widths, rng, norm=True):
        super().__init__()
        if len(set(kinds)) != 1:
            raise ConfigurationError(f"all context blocks must share one kind, got {list(kinds)}")
        kind = kinds[0]
        if kind not in _BLOCKS:
            raise ConfigurationError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
        expected = len(DEFAULT_WIDTHS[kind])
        if len(widths) != expected:
            raise ConfigurationError(f"{kind} needs {expected} widths, got {tuple(widths)}")
        self.kind = kind
        self.blocks = ModuleList()
        depth = in_depth
        for _ in kinds:
            block = _BLOCKS[kind](depth, tuple(widths), rng, norm)
            self.blocks.append(block)
            depth = block.out_ch
        self.out_ch = depth

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def context_forward(cube: Tensor, cascade: Cascade) -> Tensor:
    """Run an attended cube through the block cascade, keeping the ``M x N`` grid."""
    return cascade(cube)


class ContextOutput(NamedTuple):
    probs: Tensor  # [B, C]
    seg: Tensor | None  # [B, C, M, N]


class ContextNet(Module):
    def __init__(self, in_depth: int, n_classes: int, kind: str = "B3", widths=None, *,
                 attention: bool = False, auxiliary: bool = False, attention_axis: str = "spatial",
                 norm: bool = True, seed: int = 0, n_blocks: int = N_BLOCKS):
        super().__init__()
        widths = tuple(widths) if widths is not None else DEFAULT_WIDTHS.get(kind, ())
        self.in_depth, self.n_classes, self.kind, self.widths = in_depth, n_classes, kind, widths
        self.gate = AttentionGate(in_depth, _rng(seed, _RNG_GATE), attention_axis) if attention else None
        self.cascade = Cascade([kind] * n_blocks, in_depth, widths, _rng(seed, _RNG_BLOCKS), norm)
        self.head = Dense(self.cascade.out_ch, n_classes, _rng(seed, _RNG_HEAD))
        self.aux = Conv2d(self.cascade.out_ch, n_classes, 1, _rng(seed, _RNG_AUX)) if auxiliary else None

    def attend(self, cube: Tensor) -> Tensor:
        return self.gate(cube) if self.gate is not None else cube

    def classify_features(self, h: Tensor) -> Tensor:
        pooled = T.pool(h, "global_avg")
        return T.softmax(self.head(T.reshape(pooled, pooled.shape[:2])), axis=1)

    def segment_features(self, h: Tensor) -> Tensor:
        if self.aux is None:
            raise ContractError("auxiliary head is disabled for this model")
        return T.softmax(self.aux(h), axis=1)

    def forward(self, cube: Tensor) -> ContextOutput:
        if cube.ndim != 4 or cube.shape[1] != self.in_depth:
            raise DimensionError(f"expected cube [B,{self.in_depth},M,N], got {cube.shape}")
        h = context_forward(self.attend(cube), self.cascade)
        seg = self.segment_features(h) if self.aux is not None else None
        return ContextOutput(self.classify_features(h), seg)

    def classify(self, cube: Tensor) -> Tensor:
        return self(cube).probs

    def segment(self, cube: Tensor) -> Tensor:
        if self.aux is None:
            raise ContractError("auxiliary head is disabled for this model")
        return self(cube).seg


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------
@dataclass
class Architecture:
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    pooling: str = "avg"
    block_kind: str = "B3"
    widths: tuple = ()
    n_classes: int = 4
    attention: bool = False
    auxiliary: bool = False
    attention_axis: str = "spatial"
    freeze_extractor_bn: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorSpec(**self.extractor)
        self.widths = tuple(self.widths) or DEFAULT_WIDTHS.get(self.block_kind, ())
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.block_kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        return cls(**json.loads(text))


class ContextModel(Module):
    """Local encoder followed by the aggregation network."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        self.encoder = LocalEncoder(arch.extractor, arch.pooling, _rng(arch.seed, _RNG_EXTRACTOR),
                                    freeze_bn=arch.freeze_extractor_bn)
        self.context = ContextNet(arch.extractor.feature_depth, arch.n_classes, arch.block_kind, arch.widths,
                                  attention=arch.attention, auxiliary=arch.auxiliary,
                                  attention_axis=arch.attention_axis, seed=arch.seed)

    def forward(self, images: np.ndarray) -> ContextOutput:
        return self.context(self.encoder(images))

    def context_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("encoder.")]


def save_model(path, model: ContextModel) -> str:
    """Write the checkpoint at ``path`` and its architecture to ``path`` + ``.json``."""
    path = Path(path)
    Path(str(path) + ".json").write_text(model.arch.to_json() + "\n")
    return checkpoint.save(path, model.state_dict())


def load_model(path) -> ContextModel:
    path = Path(path)
    arch = Architecture.from_json(Path(str(path) + ".json").read_text())
    model = ContextModel(arch)
    model.load_state_dict(checkpoint.load(path))
    model.eval()
    return model
