"""Three-stage LightViT backbone, its variant table and weight initialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionToggles, effective_window
from .errors import ConfigError, ResolutionError
from .ffn import FfnParams, FfnToggles
from .nn import LayerNorm, Linear, Module, ModuleList, Conv2d, Parameter, trunc_normal
from .tensor import Tensor

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class Toggles:
    """Ablation switches: attention paths and FFN gate branches."""

    local: bool = True
    global_: bool = True
    spatial: bool = True
    channel: bool = True


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    stem_width: int = 64
    depths: tuple[int, ...] = (2, 6, 6)
    widths: tuple[int, ...] = (64, 128, 256)
    heads: tuple[int, ...] = (2, 4, 8)
    window: int = 7
    global_tokens: int = 8
    mlp_ratio: int = 4
    reduction: int = 4
    num_classes: int = 1000
    toggles: Toggles = field(default_factory=Toggles)
    act: str = "gelu"
    reduce_act: str = "gelu"
    gate_insert: str = "hidden"
    attn_scale: Optional[float] = None

    def __post_init__(self):
        for name in ("depths", "widths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.toggles, dict):
            object.__setattr__(self, "toggles", Toggles(**self.toggles))

    @property
    def active_global_tokens(self) -> int:
        return self.global_tokens if self.toggles.global_ else 0

    def violations(self) -> list[str]:
        errs = []
        if not (len(self.depths) == len(self.widths) == len(self.heads) == 3):
            errs.append("depths, widths and heads must each list three stages")
            return errs
        if any(d < 1 for d in self.depths):
            errs.append(f"stage depths must be >= 1, got {self.depths}")
        if self.stem_width != self.widths[0]:
            errs.append(f"stem width {self.stem_width} must equal stage-1 width {self.widths[0]}")
        if self.stem_width % 2:
            errs.append(f"stem width {self.stem_width} must be even")
        for i in range(2):
            if self.widths[i + 1] != 2 * self.widths[i]:
                errs.append(f"stage {i + 2} width {self.widths[i + 1]} must be 2 x {self.widths[i]}")
        for i, (c, h) in enumerate(zip(self.widths, self.heads)):
            if h < 1 or c % h:
                errs.append(f"stage {i + 1}: heads {h} must divide width {c}")
        if self.window < 1:
            errs.append(f"window size must be >= 1, got {self.window}")
        if self.global_tokens < 0:
            errs.append(f"global token count must be >= 0, got {self.global_tokens}")
        if not (self.toggles.local or self.toggles.global_):
            errs.append("local and global attention cannot both be disabled")
        if not self.toggles.local and self.global_tokens == 0:
            errs.append("global-only attention needs at least one global token")
        if self.mlp_ratio < 1:
            errs.append(f"mlp ratio must be >= 1, got {self.mlp_ratio}")
        gate_width = self.mlp_ratio if self.gate_insert == "hidden" else 1
        if self.reduction < 1 or any((gate_width * c) % self.reduction for c in self.widths):
            errs.append(f"reduction ratio {self.reduction} must divide every gated width")
        if self.gate_insert not in ("hidden", "input"):
            errs.append(f"gate_insert must be 'hidden' or 'input', got {self.gate_insert!r}")
        for a in (self.act, self.reduce_act):
            if a not in ("gelu", "relu"):
                errs.append(f"unknown activation {a!r}")
        if self.num_classes < 1:
            errs.append("num_classes must be >= 1")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.violations()
        if errs:
            raise ConfigError("invalid model config: " + "; ".join(errs))
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["toggles"] = dataclasses.asdict(self.toggles)
        for k in ("depths", "widths", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        if "toggles" in d:
            d["toggles"] = Toggles(**d["toggles"])
        return cls(**d)

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


VARIANTS: dict[str, ModelConfig] = {
    "T": ModelConfig("T", 64, (2, 6, 6), (64, 128, 256), (2, 4, 8), global_tokens=8),
    "S": ModelConfig("S", 96, (2, 6, 6), (96, 192, 384), (3, 6, 12), global_tokens=16),
    "B": ModelConfig("B", 128, (3, 8, 6), (128, 256, 512), (4, 8, 16), global_tokens=24),
}

# Reduced configuration used by the end-to-end gradient check.
TINY = ModelConfig("tiny", 8, (1, 1, 1), (8, 16, 32), (1, 2, 4), window=2, global_tokens=2, num_classes=10)


def get_config(name: str) -> ModelConfig:
    key = name.upper() if name.upper() in VARIANTS else name.lower()
    if key in VARIANTS:
        return VARIANTS[key]
    if key == "tiny":
        return TINY
    raise ConfigError(f"unknown variant {name!r}; valid names: {', '.join(list(VARIANTS) + ['tiny'])}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _to_tokens(x: Tensor) -> Tensor:
    return x.transpose(1, 2, 0)


def _to_channels(x: Tensor) -> Tensor:
    return x.transpose(2, 0, 1)


class Stem(Module):
    """Three overlapping 3x3 stride-2 convolutions, LayerNorm over channels after each."""

    def __init__(self, width: int, act: str = "gelu"):
        super().__init__()
        mid = width // 2
        self.act = act
        self.conv1 = Conv2d(3, mid, 3, stride=2, padding=1)
        self.norm1 = LayerNorm(mid)
        self.conv2 = Conv2d(mid, mid, 3, stride=2, padding=1)
        self.norm2 = LayerNorm(mid)
        self.conv3 = Conv2d(mid, width, 3, stride=2, padding=1)
        self.norm3 = LayerNorm(width)

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ConfigError(f"stem expects a 3 x H x W image, got {image.shape}")
        _, H, W = image.shape
        if H % 8 or W % 8:
            raise ConfigError(f"image extents {H}x{W} must be multiples of 8")
        act = T.gelu if self.act == "gelu" else T.relu
        x = act(self.norm1(_to_tokens(self.conv1(image))))
        x = act(self.norm2(_to_tokens(self.conv2(_to_channels(x)))))
        return self.norm3(_to_tokens(self.conv3(_to_channels(x))))


class Block(Module):
    """Pre-norm attention + gated FFN; global tokens ride along the token axis."""

    def __init__(self, dim: int, heads: int, cfg: ModelConfig):
        super().__init__()
        self.window = cfg.window
        tg = cfg.toggles
        self.attn_toggles = AttentionToggles(tg.local, tg.global_)
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, cfg.attn_scale)
        self.ffn = FfnParams(
            dim,
            cfg.mlp_ratio,
            cfg.reduction,
            cfg.act,
            FfnToggles(tg.channel, tg.spatial),
            cfg.gate_insert,
            cfg.reduce_act,
        )

    def forward(self, x: Tensor, g: Optional[Tensor]) -> tuple[Tensor, Optional[Tensor]]:
        H, W, C = x.shape
        N = H * W
        use_global = g is not None and g.shape[0] > 0 and self.attn_toggles.global_
        S = effective_window(H, W, self.window)
        g_in = self.norm1(g) if use_global else g
        x_att, g_att = self.attn(self.norm1(x), g_in, S, self.attn_toggles)
        x = x + x_att
        if use_global:
            g = g + g_att
            tokens = self.ffn(T.concat([x.reshape(N, C), g], axis=0), n_mean=N)
            return tokens[:N].reshape(H, W, C), tokens[N:]
        return self.ffn(x.reshape(N, C)).reshape(H, W, C), g


class ResidualPatchMerging(Module):
    """Swin 2x2 merge (concat, norm, 4C -> 2C) plus an average-pool residual (C -> 2C)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)
        self.residual = Linear(dim, 2 * dim, bias=False)

    def main_branch(self, x: Tensor) -> Tensor:
        H, W, C = x.shape
        # neighbor order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        quad = x.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 3, 1, 4).reshape(H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(quad))

    def residual_branch(self, x: Tensor) -> Tensor:
        H, W, C = x.shape
        pooled = x.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))
        return self.residual(pooled)

    def forward(self, x: Tensor) -> Tensor:
        H, W, C = x.shape
        if H % 2 or W % 2:
            raise ConfigError(f"patch merging needs even grid extents, got {H}x{W}")
        return self.main_branch(x) + self.residual_branch(x)


def residual_patch_merging(x: Tensor, merge: ResidualPatchMerging) -> Tensor:
    return merge(x)


class Stage(Module):
    def __init__(self, index: int, cfg: ModelConfig):
        super().__init__()
        dim = cfg.widths[index]
        self.index = index
        if index > 0:
            self.downsample = ResidualPatchMerging(cfg.widths[index - 1])
            if cfg.active_global_tokens:
                self.global_proj = Linear(cfg.widths[index - 1], dim)
        self.blocks = ModuleList(Block(dim, cfg.heads[index], cfg) for _ in range(cfg.depths[index]))

    def forward(self, x: Tensor, g: Optional[Tensor]) -> tuple[Tensor, Optional[Tensor]]:
        if self.index > 0:
            x = self.downsample(x)
            if g is not None:
                g = self.global_proj(g)
        with T.scope("blocks"):
            for blk in self.blocks:
                x, g = blk(x, g)
        return x, g


def project_global_tokens(g: Tensor, stage: Stage) -> Tensor:
    """Carry global tokens across a stage boundary (C -> 2C)."""
    return stage.global_proj(g)


@dataclass
class StageOutput:
    features: list[Tensor]
    global_tokens: Optional[Tensor]


class LightViT(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.stem = Stem(cfg.stem_width, cfg.act)
        if cfg.active_global_tokens:
            self.global_tokens = Parameter(np.zeros((cfg.active_global_tokens, cfg.widths[0]), dtype=np.float32))
        self.stages = ModuleList(Stage(i, cfg) for i in range(3))
        self.norm = LayerNorm(cfg.widths[-1])
        self.head = Linear(cfg.widths[-1], cfg.num_classes)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def check_resolution(self, H: int, W: int) -> None:
        check_resolution(self.config, H, W)

    def forward_features(self, image: Tensor) -> StageOutput:
        _, H, W = image.shape
        self.check_resolution(H, W)
        x = self.stem(image)
        g = self.global_tokens if self.config.active_global_tokens else None
        feats = []
        with T.scope("stages"):
            for stage in self.stages:
                x, g = stage(x, g)
                feats.append(x)
        return StageOutput(feats, g)

    def forward_head(self, x: Tensor) -> Tensor:
        H, W, C = x.shape
        pooled = self.norm(x.reshape(H * W, C)).mean(axis=0)
        return self.head(pooled.reshape(1, C)).reshape(self.config.num_classes)

    def classify(self, image: Tensor) -> Tensor:
        return self.forward_head(self.forward_features(image).features[-1])

    def forward(self, image: Tensor) -> Tensor:
        return self.classify(image)


def stage_grids(H: int, W: int) -> list[tuple[int, int]]:
    return [(H // s, W // s) for s in STRIDES]


def check_resolution(cfg: ModelConfig, H: int, W: int) -> None:
    """Raise ResolutionError with an actionable message if (H, W) cannot be windowed."""
    if H % 32 or W % 32:
        raise ResolutionError(f"input {H}x{W}: extents must be multiples of 32 (stride-32 final stage)")
    for i, (h, w) in enumerate(stage_grids(H, W)):
        S = effective_window(h, w, cfg.window)
        if h % S or w % S:
            raise ResolutionError(
                f"input {H}x{W}: stage {i + 1} grid {h}x{w} is not divisible by window size {cfg.window}; "
                f"use a resolution that is a multiple of {32 * cfg.window} (e.g. {32 * cfg.window})"
            )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

_ZERO_WEIGHT_SUFFIXES = ("bidim.channel.weight", "bidim.spatial.weight")


def init_weights(model: Module, seed: int, std: float = 0.02) -> Module:
    """Deterministic initialization: trunc-normal weights, zero biases, unit norm scales.

    The final layers of both gate branches start at zero so every gate opens at 0.5.
    """
    rng = np.random.default_rng(seed)
    norm_params = {
        name
        for mname, m in model.named_modules()
        if isinstance(m, LayerNorm)
        for name in (f"{mname}.weight" if mname else "weight", f"{mname}.bias" if mname else "bias")
    }
    for name, p in model.named_parameters():
        dtype = p.data.dtype
        if name in norm_params:
            p.data = (np.ones if name.endswith("weight") else np.zeros)(p.shape, dtype=dtype)
        elif name.endswith("bias") or name.endswith(_ZERO_WEIGHT_SUFFIXES):
            p.data = np.zeros(p.shape, dtype=dtype)
        else:
            p.data = trunc_normal(rng, p.shape, std).astype(dtype)
    return model


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> LightViT:
    model = LightViT(cfg)
    model.astype(dtype)
    init_weights(model, seed)
    return model


def perturb(model: Module, seed: int, std: float = 0.2) -> Module:
    """Add Gaussian noise to every parameter so gradient checks exercise all paths."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = (p.data + std * rng.standard_normal(p.shape)).astype(p.data.dtype)
    return model
