"""Feed-forward network gated by channel and spatial attention.

Both gate branches share one linear reduction layer (width C_h -> C_h / r)
followed by an activation. The channel branch maps the reduced token mean back
to C_h gates; the spatial branch maps each reduced token, concatenated with the
reduced mean, to a single gate. Token means can be restricted to the leading
``n_mean`` rows so that appended global tokens are gated without skewing the
statistics of the image tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import ACTIVATIONS, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class FfnToggles:
    channel: bool = True
    spatial: bool = True


class BiDimParams(Module):
    def __init__(self, width: int, reduction: int = 4, act: str = "gelu", channel: bool = True, spatial: bool = True):
        super().__init__()
        if reduction <= 0 or width % reduction:
            raise ConfigError(f"reduction ratio r={reduction} must divide width {width}")
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}; expected one of {sorted(ACTIVATIONS)}")
        self.width = width
        self.reduced = width // reduction
        self.act = act
        self.has_channel = channel
        self.has_spatial = spatial
        if channel or spatial:
            self.reduce = Linear(width, self.reduced)
        if channel:
            self.channel = Linear(self.reduced, width)
        if spatial:
            self.spatial = Linear(2 * self.reduced, 1)


def _token_mean(x: Tensor, n_mean: Optional[int]) -> Tensor:
    rows = x if n_mean is None else x[:n_mean]
    if rows.shape[0] < 1:
        raise DimensionError("bi-dimensional attention needs at least one token")
    return rows.mean(axis=0, keepdims=True)


def _check(x: Tensor, p: BiDimParams) -> None:
    if x.ndim != 2 or x.shape[-1] != p.width:
        raise DimensionError(f"expected N x {p.width} tokens, got {x.shape}")


def bidim_gates(
    x: Tensor, p: BiDimParams, channel: bool = True, spatial: bool = True, n_mean: Optional[int] = None
) -> tuple[Optional[Tensor], Optional[Tensor]]:
    """Return ``(channel_gates[C_h], spatial_gates[N])``; a disabled branch yields None."""
    _check(x, p)
    channel = channel and p.has_channel
    spatial = spatial and p.has_spatial
    if not (channel or spatial):
        return None, None
    act = ACTIVATIONS[p.act]
    with T.scope(p._name):
        reduced_mean = act(p.reduce(_token_mean(x, n_mean)))
        cg = sg = None
        if channel:
            cg = T.sigmoid(p.channel(reduced_mean)).reshape(p.width)
        if spatial:
            n = x.shape[0]
            local = act(p.reduce(x))
            pair = T.concat([local, T.broadcast_to(reduced_mean, (n, p.reduced))], axis=1)
            sg = T.sigmoid(p.spatial(pair)).reshape(n)
    return cg, sg


def channel_attention(x: Tensor, p: BiDimParams, n_mean: Optional[int] = None) -> Tensor:
    """Per-channel gates in (0, 1) computed from the token mean."""
    if not p.has_channel:
        raise ConfigError("channel branch is not built for these parameters")
    return bidim_gates(x, p, channel=True, spatial=False, n_mean=n_mean)[0]


def spatial_attention(x: Tensor, p: BiDimParams, n_mean: Optional[int] = None) -> Tensor:
    """Per-token gates in (0, 1) from each token paired with the token mean."""
    if not p.has_spatial:
        raise ConfigError("spatial branch is not built for these parameters")
    return bidim_gates(x, p, channel=False, spatial=True, n_mean=n_mean)[1]


class FfnParams(Module):
    """Pre-norm two-layer FFN with optional bi-dimensional gating.

    ``insert`` selects where gates apply: ``"hidden"`` gates the activated FC1
    output (width ``ratio * dim``); ``"input"`` gates the normalized input.
    """

    def __init__(
        self,
        dim: int,
        ratio: int = 4,
        reduction: int = 4,
        act: str = "gelu",
        toggles: FfnToggles = FfnToggles(),
        insert: str = "hidden",
        reduce_act: Optional[str] = None,
    ):
        super().__init__()
        if insert not in ("hidden", "input"):
            raise ConfigError(f"insert must be 'hidden' or 'input', got {insert!r}")
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        self.dim = dim
        self.hidden = ratio * dim
        self.act = act
        self.insert = insert
        self.toggles = toggles
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, self.hidden)
        self.fc2 = Linear(self.hidden, dim)
        if toggles.channel or toggles.spatial:
            width = self.hidden if insert == "hidden" else dim
            self.bidim = BiDimParams(width, reduction, reduce_act or act, toggles.channel, toggles.spatial)

    def forward(self, x: Tensor, n_mean: Optional[int] = None) -> Tensor:
        return bidim_ffn(x, self, n_mean=n_mean)


def _apply_gates(h: Tensor, p: FfnParams, n_mean: Optional[int]) -> Tensor:
    cg, sg = bidim_gates(h, p.bidim, p.toggles.channel, p.toggles.spatial, n_mean)
    if cg is not None:
        h = h * cg
    if sg is not None:
        h = h * sg.reshape(h.shape[0], 1)
    return h


def bidim_ffn(x: Tensor, p: FfnParams, n_mean: Optional[int] = None) -> Tensor:
    """``x + fc2(gated(act(fc1(norm(x)))))`` on N x C tokens."""
    if x.ndim != 2 or x.shape[-1] != p.dim:
        raise DimensionError(f"expected N x {p.dim} tokens, got {x.shape}")
    gated = p.toggles.channel or p.toggles.spatial
    h = p.norm(x)
    if gated and p.insert == "input":
        h = _apply_gates(h, p, n_mean)
    h = ACTIVATIONS[p.act](p.fc1(h))
    if gated and p.insert == "hidden":
        h = _apply_gates(h, p, n_mean)
    return x + p.fc2(h)
