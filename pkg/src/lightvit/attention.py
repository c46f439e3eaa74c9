"""Windowed self-attention with global-token aggregation and broadcast.

All functions operate on a single feature map ``x`` of shape (H, W, C) and a
set of ``T`` global tokens of shape (T, C). Attention "cores" are the
head-concatenated ``softmax(q k^T * scale) v`` products; the output projection
is applied once, after local and global cores have been summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class WindowLayout:
    H: int
    W: int
    S: int

    @property
    def n_windows(self) -> int:
        return (self.H // self.S) * (self.W // self.S)


@dataclass(frozen=True)
class AttentionToggles:
    local: bool = True
    global_: bool = True

    def __post_init__(self):
        if not (self.local or self.global_):
            raise ConfigError("at least one of the local and global attention paths must be enabled")


class AttentionParams(Module):
    """Q/K/V/output projections shared by image tokens and global tokens."""

    def __init__(self, dim: int, heads: int, scale: Optional[float] = None):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise ConfigError(f"heads={heads} must divide width C={dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        # None -> 1/sqrt(d); 1.0 reproduces the unscaled softmax(q k^T) v form
        self.scale = 1.0 / math.sqrt(self.head_dim) if scale is None else scale
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)

    def forward(self, x, g, window, toggles=AttentionToggles()):
        return lightvit_attention(x, g, self, window, toggles)


def window_partition(x: Tensor, S: int) -> tuple[Tensor, WindowLayout]:
    """Split (H, W, C) into (nW, S*S, C) windows, row-major over windows and tokens."""
    if x.ndim != 3:
        raise DimensionError(f"window_partition expects H x W x C, got {x.shape}")
    H, W, C = x.shape
    if S <= 0 or H % S or W % S:
        raise ConfigError(
            f"window size S={S} must divide the token grid H={H}, W={W}; "
            f"choose an input resolution whose per-stage grids are multiples of {S}"
        )
    layout = WindowLayout(H, W, S)
    w = x.reshape(H // S, S, W // S, S, C).transpose(0, 2, 1, 3, 4)
    return w.reshape(layout.n_windows, S * S, C), layout


def window_reverse(w: Tensor, layout: WindowLayout) -> Tensor:
    H, W, S = layout.H, layout.W, layout.S
    if w.ndim != 3 or w.shape[0] != layout.n_windows or w.shape[1] != S * S:
        raise DimensionError(f"windows of shape {w.shape} do not match layout {layout}")
    C = w.shape[2]
    x = w.reshape(H // S, W // S, S, S, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, C)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, C) -> (..., heads, n, d)
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(perm)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(perm).reshape(*lead, n, h * d)


def _core(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams) -> Tensor:
    """softmax(q k^T * scale) v over already-projected, head-split operands."""
    logits = T.matmul(q, T.swap_last(k)) * p.scale
    return T.matmul(T.softmax(logits, axis=-1), v)


def _check_width(t: Tensor, p: AttentionParams, what: str) -> None:
    if t.shape[-1] != p.dim:
        raise ConfigError(f"{what} width {t.shape[-1]} != attention width {p.dim}")


def scaled_mha(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: AttentionParams, project: bool = True) -> Tensor:
    """Multi-head attention of ``q_in`` over ``k_in``/``v_in`` using ``p``'s projections."""
    for t, what in ((q_in, "query"), (k_in, "key"), (v_in, "value")):
        _check_width(t, p, what)
    if k_in.shape[:-1] != v_in.shape[:-1]:
        raise DimensionError(f"key shape {k_in.shape} and value shape {v_in.shape} disagree")
    q = _split_heads(p.q(q_in), p.heads)
    k = _split_heads(p.k(k_in), p.heads)
    v = _split_heads(p.v(v_in), p.heads)
    out = _merge_heads(_core(q, k, v, p))
    return p.proj(out) if project else out


def _local_core(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, S: int) -> Tensor:
    H, W, _ = q.shape
    qw, layout = window_partition(q, S)
    kw, _ = window_partition(k, S)
    vw, _ = window_partition(v, S)
    with T.scope("local_core"):
        o = _core(_split_heads(qw, p.heads), _split_heads(kw, p.heads), _split_heads(vw, p.heads), p)
    return window_reverse(_merge_heads(o), layout).reshape(H * W, p.dim)


def local_attention(x: Tensor, p: AttentionParams, S: int, project: bool = True) -> Tensor:
    """Self-attention restricted to non-overlapping S x S windows of ``x``."""
    _check_width(x, p, "input")
    H, W, C = x.shape
    window_partition(x, S)  # fail early on a bad grid
    flat = x.reshape(H * W, C)
    q = p.q(flat).reshape(H, W, C)
    k = p.k(flat).reshape(H, W, C)
    v = p.v(flat).reshape(H, W, C)
    out = _local_core(q, k, v, p, S)
    if project:
        out = p.proj(out)
    return out.reshape(H, W, C)


def _aggregate_core(gq: Tensor, xk: Tensor, xv: Tensor, p: AttentionParams) -> Tensor:
    with T.scope("aggregate_core"):
        o = _core(_split_heads(gq, p.heads), _split_heads(xk, p.heads), _split_heads(xv, p.heads), p)
    return _merge_heads(o)


def _broadcast_core(xq: Tensor, g_hat: Tensor, p: AttentionParams) -> Tensor:
    gk = p.k(g_hat)
    gv = p.v(g_hat)
    with T.scope("broadcast_core"):
        o = _core(_split_heads(xq, p.heads), _split_heads(gk, p.heads), _split_heads(gv, p.heads), p)
    return _merge_heads(o)


def global_aggregate(g: Tensor, x: Tensor, p: AttentionParams) -> Tensor:
    """Global tokens as queries over every image token; returns the new tokens (T, C)."""
    if g.ndim != 2 or g.shape[0] == 0:
        raise ContractError("global_aggregate needs T >= 1 global tokens; skip the global path when T = 0")
    _check_width(g, p, "global token")
    _check_width(x, p, "input")
    flat = x.reshape(-1, p.dim)
    return _aggregate_core(p.q(g), p.k(flat), p.v(flat), p)


def global_broadcast(x: Tensor, g_hat: Tensor, p: AttentionParams, project: bool = True) -> Tensor:
    """Image tokens as queries over the aggregated global tokens.

    With ``project`` the output projection is applied without its bias, which the
    merged forward adds exactly once (to the local branch).
    """
    _check_width(x, p, "input")
    _check_width(g_hat, p, "global token")
    H, W, C = x.shape
    out = _broadcast_core(p.q(x.reshape(H * W, C)), g_hat, p)
    if project:
        out = T.matmul(out, p.proj.weight)
    return out.reshape(H, W, C)


def lightvit_attention(
    x: Tensor,
    g: Optional[Tensor],
    p: AttentionParams,
    S: int,
    toggles: AttentionToggles = AttentionToggles(),
    project: bool = True,
) -> tuple[Tensor, Optional[Tensor]]:
    """Local window attention plus global aggregate/broadcast, summed per token.

    Returns ``(x_new, g_hat)``. When the global path is inactive (toggle off or no
    global tokens) ``g`` is returned unchanged. With ``project`` both outputs pass
    through the shared output projection.
    """
    _check_width(x, p, "input")
    H, W, C = x.shape
    N = H * W
    use_global = toggles.global_ and g is not None and g.shape[0] > 0
    if not toggles.local and not use_global:
        raise ConfigError("global-only attention requires at least one global token")
    if toggles.local:
        window_partition(x, S)

    flat = x.reshape(N, C)
    xq = p.q(flat)
    if use_global:
        _check_width(g, p, "global token")
        gq = p.q(g)
    xk = p.k(flat)
    xv = p.v(flat)

    parts = []
    if toggles.local:
        parts.append(_local_core(xq.reshape(H, W, C), xk.reshape(H, W, C), xv.reshape(H, W, C), p, S))
    g_hat = None
    if use_global:
        g_hat = _aggregate_core(gq, xk, xv, p)
        parts.append(_broadcast_core(xq, g_hat, p))
    core = parts[0] if len(parts) == 1 else parts[0] + parts[1]

    if not project:
        return core.reshape(H, W, C), (g_hat if use_global else g)
    x_out = p.proj(core).reshape(H, W, C)
    return x_out, (p.proj(g_hat) if use_global else g)


def effective_window(H: int, W: int, S: int) -> int:
    """Window size actually used on an H x W grid: grids smaller than S use one whole-map window."""
    return S if min(H, W) > S else min(H, W)
