"""Parameter/FLOP accounting, attention cost model and per-stage benchmark.

FLOPs here are multiply-accumulate counts of matrix products and convolutions.
Softmax, normalization and activations are excluded from headline totals and
tracked separately as ``aux`` element counts in verbose breakdowns.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import effective_window
from .errors import ConfigError
from .model import LightViT, ModelConfig, check_resolution, stage_grids
from .nn import Module

# Published budgets per variant at 224x224: (params, MAC FLOPs).
REFERENCE_BUDGETS = {"T": (9.4e6, 0.73e9), "S": (19.2e6, 1.7e9), "B": (35.2e6, 3.9e9)}
# Reported global-token sweep for variant T at 224 (GFLOPs).
REFERENCE_GLOBAL_SWEEP = {0: 0.68, 2: 0.69, 4: 0.70, 8: 0.73, 16: 0.80, 32: 0.92}

ATTENTION_CORES = ("local_core", "aggregate_core", "broadcast_core")


@dataclass
class CostNode:
    name: str
    params: int = 0
    flops: int = 0
    aux: int = 0
    children: dict[str, "CostNode"] = field(default_factory=dict)

    def child(self, key: str) -> "CostNode":
        if key not in self.children:
            self.children[key] = CostNode(key)
        return self.children[key]

    def find(self, path: str) -> "CostNode":
        node = self
        for part in path.split("."):
            node = node.children[part]
        return node

    def leaves(self, prefix: str = "") -> Iterable[tuple[str, "CostNode"]]:
        if not self.children:
            yield prefix.rstrip("."), self
        for key, c in self.children.items():
            yield from c.leaves(prefix + key + ".")

    def is_consistent(self) -> bool:
        if not self.children:
            return True
        kids = self.children.values()
        return (
            self.params == sum(c.params for c in kids)
            and self.flops == sum(c.flops for c in kids)
            and self.aux == sum(c.aux for c in kids)
            and all(c.is_consistent() for c in kids)
        )

    def to_dict(self) -> dict:
        d = {"name": self.name, "params": self.params, "flops": self.flops}
        if self.aux:
            d["aux"] = self.aux
        if self.children:
            d["children"] = [c.to_dict() for c in self.children.values()]
        return d


@dataclass
class CostReport:
    root: CostNode
    resolution: Optional[tuple[int, int]] = None

    @property
    def params(self) -> int:
        return self.root.params

    @property
    def flops(self) -> int:
        return self.root.flops

    def subtotal(self, path: str) -> CostNode:
        return self.root.find(path)

    def leaf_flops(self) -> dict[str, int]:
        return {k: n.flops for k, n in self.root.leaves() if n.flops}

    def attention_core_flops(self) -> int:
        return sum(n.flops for k, n in self.root.leaves() if k.split(".")[-1] in ATTENTION_CORES)

    def dumps(self) -> str:
        """Machine-readable dump with a stable key order."""
        payload = {"resolution": list(self.resolution) if self.resolution else None, "tree": self.root.to_dict()}
        return json.dumps(payload, indent=1)

    def table(self, depth: int = 2, verbose: bool = False) -> str:
        head = f"{'module':<44}{'params':>14}{'MACs':>16}"
        if verbose:
            head += f"{'aux elems':>14}"
        lines = [head, "-" * len(head)]

        def walk(node: CostNode, label: str, level: int):
            row = f"{label:<44}{node.params:>14,}{node.flops:>16,}"
            if verbose:
                row += f"{node.aux:>14,}"
            lines.append(row)
            if level < depth:
                for key, c in node.children.items():
                    walk(c, "  " * (level + 1) + key, level + 1)

        walk(self.root, "total", 0)
        return "\n".join(lines)


def _tree(entries: dict[str, tuple[int, int, int]], name: str = "model") -> CostNode:
    root = CostNode(name)
    for path, (params, flops, aux) in entries.items():
        chain = [root]
        node = root
        for part in path.split("."):
            node = node.child(part)
            chain.append(node)
        for n in chain:
            n.params += params
            n.flops += flops
            n.aux += aux
    return root


class _Ledger:
    """Ordered leaf accumulator: path -> [params, flops, aux]."""

    def __init__(self) -> None:
        self.entries: dict[str, list[int]] = {}

    def add(self, path: str, params: int = 0, flops: int = 0, aux: int = 0) -> None:
        e = self.entries.setdefault(path, [0, 0, 0])
        e[0] += int(params)
        e[1] += int(flops)
        e[2] += int(aux)

    def linear(self, path: str, n_in: int, n_out: int, rows: int, bias: bool = True) -> None:
        self.add(path, n_in * n_out + (n_out if bias else 0), rows * n_in * n_out)

    def norm(self, path: str, dim: int, rows: int) -> None:
        self.add(path, 2 * dim, 0, rows * dim)


def _analytic_entries(cfg: ModelConfig, H: int, W: int) -> dict[str, tuple[int, int, int]]:
    cfg.validate()
    check_resolution(cfg, H, W)
    L = _Ledger()
    tg = cfg.toggles
    Tn = cfg.active_global_tokens
    C0 = cfg.stem_width
    mid = C0 // 2

    # stem
    h1, w1 = H // 2, W // 2
    h2, w2 = H // 4, W // 4
    h3, w3 = H // 8, W // 8
    L.add("stem.conv1", mid * 3 * 9 + mid, mid * 3 * 9 * h1 * w1)
    L.norm("stem.norm1", mid, h1 * w1)
    L.add("stem.conv2", mid * mid * 9 + mid, mid * mid * 9 * h2 * w2)
    L.norm("stem.norm2", mid, h2 * w2)
    L.add("stem.conv3", C0 * mid * 9 + C0, C0 * mid * 9 * h3 * w3)
    L.norm("stem.norm3", C0, h3 * w3)
    if Tn:
        L.add("global_tokens", Tn * cfg.widths[0])

    for i, ((h, w), C) in enumerate(zip(stage_grids(H, W), cfg.widths)):
        N = h * w
        pre = f"stages.{i}"
        if i > 0:
            Cp = cfg.widths[i - 1]
            L.norm(f"{pre}.downsample.norm", 4 * Cp, N)
            L.linear(f"{pre}.downsample.reduction", 4 * Cp, C, N, bias=False)
            L.linear(f"{pre}.downsample.residual", Cp, C, N, bias=False)
            if Tn:
                L.linear(f"{pre}.global_proj", Cp, C, Tn)
        S = effective_window(h, w, cfg.window)
        heads = cfg.heads[i]
        rows = N + Tn
        hidden = cfg.mlp_ratio * C
        gw = hidden if cfg.gate_insert == "hidden" else C
        red = gw // cfg.reduction
        for j in range(cfg.depths[i]):
            b = f"{pre}.blocks.{j}"
            L.norm(f"{b}.norm1", C, rows)
            for name in ("q", "k", "v", "proj"):
                L.linear(f"{b}.attn.{name}", C, C, rows)
            if tg.local:
                L.add(f"{b}.attn.local_core", 0, 2 * N * S * S * C, heads * N * S * S)
            if Tn:
                L.add(f"{b}.attn.aggregate_core", 0, 2 * Tn * N * C, heads * Tn * N)
                L.add(f"{b}.attn.broadcast_core", 0, 2 * N * Tn * C, heads * N * Tn)
            L.norm(f"{b}.ffn.norm", C, rows)
            L.linear(f"{b}.ffn.fc1", C, hidden, rows)
            L.add(f"{b}.ffn.fc1", 0, 0, rows * hidden)  # activation
            if tg.channel or tg.spatial:
                L.linear(f"{b}.ffn.bidim.reduce", gw, red, 1 + (rows if tg.spatial else 0))
            if tg.channel:
                L.linear(f"{b}.ffn.bidim.channel", red, gw, 1)
                L.add(f"{b}.ffn.bidim.channel", 0, 0, rows * gw)  # gating
            if tg.spatial:
                L.linear(f"{b}.ffn.bidim.spatial", 2 * red, 1, rows)
                L.add(f"{b}.ffn.bidim.spatial", 0, 0, rows * gw)
            L.linear(f"{b}.ffn.fc2", hidden, C, rows)

    C3 = cfg.widths[-1]
    h, w = stage_grids(H, W)[-1]
    L.norm("norm", C3, h * w)
    L.linear("head", C3, cfg.num_classes, 1)
    return {k: tuple(v) for k, v in L.entries.items()}


def analytic_report(cfg: ModelConfig, H: int = 224, W: Optional[int] = None) -> CostReport:
    """Closed-form params and MACs for ``cfg`` at resolution H x W, no model needed."""
    W = H if W is None else W
    return CostReport(_tree(_analytic_entries(cfg, H, W), cfg.name), (H, W))


def _param_owner_paths(model: Module) -> dict[str, int]:
    composite = {name for name, m in model.named_modules() if m._modules}
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        owner = name.rsplit(".", 1)[0] if "." in name else ""
        key = name if owner in composite or owner == "" else owner
        counts[key] = counts.get(key, 0) + p.size
    return counts


def count_params(model: Module) -> CostReport:
    """Exact census of parameter elements grouped by owning module path."""
    entries = {k: (v, 0, 0) for k, v in _param_owner_paths(model).items()}
    name = getattr(getattr(model, "config", None), "name", "model")
    return CostReport(_tree(entries, name))


def count_flops(model: LightViT, H: int = 224, W: Optional[int] = None) -> CostReport:
    """Analytical MACs for ``model`` with parameter counts from its actual census."""
    W = H if W is None else W
    entries = _analytic_entries(model.config, H, W)
    census = _param_owner_paths(model)
    merged = {k: (census.get(k, 0), f, a) for k, (_, f, a) in entries.items()}
    for k, v in census.items():
        if k not in merged:
            merged[k] = (v, 0, 0)
    return CostReport(_tree(merged, model.config.name), (H, W))


def instrumented_macs(model: LightViT, H: int = 224, W: Optional[int] = None, seed: int = 0) -> T.MacCounter:
    """Run one classification pass and return the per-scope runtime MAC counter."""
    W = H if W is None else W
    rng = np.random.default_rng(seed)
    image = T.Tensor(rng.standard_normal((3, H, W)).astype(model.dtype))
    with T.no_grad(), T.count_macs() as counter:
        model.classify(image)
    return counter


@dataclass(frozen=True)
class AttentionCost:
    local: int
    global_: int
    projections: int


def attention_cost(H: int, W: int, S: int, T: int, C: int, heads: int) -> AttentionCost:
    """MACs of one attention layer on an H x W grid with T global tokens.

    local = QK^T + AV inside S x S windows; global = aggregate + broadcast.
    Projection MACs (q, k, v, output on image and global tokens) are separate.
    """
    if S < 1 or H % S or W % S:
        raise ConfigError(f"window size S={S} must divide H={H} and W={W}")
    if heads < 1 or C % heads:
        raise ConfigError(f"heads={heads} must divide C={C}")
    N = H * W
    return AttentionCost(
        local=2 * N * S * S * C,
        global_=2 * (N * T * C) * 2,
        projections=4 * (N + T) * C * C,
    )


@dataclass(frozen=True)
class SweepRow:
    tokens: int
    params: int
    flops: int
    ref_gflops: Optional[float]


def global_token_overhead(
    cfg: ModelConfig, tokens: Sequence[int] = (0, 2, 4, 8, 16, 32), H: int = 224, W: Optional[int] = None
) -> list[SweepRow]:
    rows = []
    for t in tokens:
        c = cfg.replace(global_tokens=t)
        rep = analytic_report(c, H, W)
        ref = REFERENCE_GLOBAL_SWEEP.get(t) if cfg.name == "T" else None
        rows.append(SweepRow(t, rep.params, rep.flops, ref))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'#global':>8}{'params':>14}{'GMACs':>10}{'ref G':>10}{'vs T=0':>10}"]
    base = next((r.flops for r in rows if r.tokens == 0), None)
    for r in rows:
        rel = f"{100 * (r.flops - base) / base:+.1f}%" if base else "-"
        ref = f"{r.ref_gflops:.2f}" if r.ref_gflops is not None else "-"
        lines.append(f"{r.tokens:>8}{r.params:>14,}{r.flops / 1e9:>10.3f}{ref:>10}{rel:>10}")
    return "\n".join(lines)


@dataclass(frozen=True)
class Deviation:
    variant: str
    params: int
    flops: int
    ref_params: float
    ref_flops: float

    @property
    def params_dev(self) -> float:
        return (self.params - self.ref_params) / self.ref_params

    @property
    def flops_dev(self) -> float:
        return (self.flops - self.ref_flops) / self.ref_flops

    @property
    def worst(self) -> float:
        return max(abs(self.params_dev), abs(self.flops_dev))

    def line(self) -> str:
        return (
            f"{self.variant}: params {self.params / 1e6:.2f}M vs reference {self.ref_params / 1e6:.1f}M "
            f"({100 * self.params_dev:+.1f}%), MACs {self.flops / 1e9:.3f}G vs reference "
            f"{self.ref_flops / 1e9:.2f}G ({100 * self.flops_dev:+.1f}%)"
        )


def budget_deviation(cfg: ModelConfig, H: int = 224) -> Deviation:
    if cfg.name not in REFERENCE_BUDGETS:
        raise ConfigError(f"no reference budget for variant {cfg.name!r}")
    rep = analytic_report(cfg, H)
    p, f = REFERENCE_BUDGETS[cfg.name]
    return Deviation(cfg.name, rep.params, rep.flops, p, f)


def best_mlp_ratio(cfg: ModelConfig, candidates: Sequence[int] = (2, 3, 4, 5, 6, 8)) -> tuple[int, Deviation]:
    """FFN expansion ratio minimizing the worse of the params/FLOPs deviations."""
    scored = []
    for r in candidates:
        c = cfg.replace(mlp_ratio=r)
        if c.violations():
            continue
        scored.append((budget_deviation(c).worst, r, budget_deviation(c)))
    _, r, dev = min(scored, key=lambda s: (s[0], s[1]))
    return r, dev


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageTiming:
    name: str
    tokens: int
    flops: int
    seconds: float
    samples: tuple[float, ...]

    @property
    def flops_per_sec(self) -> float:
        return self.flops / self.seconds if self.seconds > 0 else float("inf")


BENCH_SECTIONS = ("stem", "stages.0", "stages.1", "stages.2", "head")


def _section_flops(report: CostReport) -> dict[str, int]:
    out = {s: report.subtotal(s).flops for s in BENCH_SECTIONS if s != "head"}
    out["head"] = report.flops - sum(out.values())
    return out


def bench_stage_throughput(model: LightViT, H: int = 224, repeats: int = 3, warmup: int = 1, seed: int = 0) -> list[StageTiming]:
    """Median wall time per backbone section over ``repeats`` timed passes."""
    if repeats < 3:
        raise ConfigError("repeats must be >= 3")
    check_resolution(model.config, H, H)
    rng = np.random.default_rng(seed)
    image = T.Tensor(rng.standard_normal((3, H, H)).astype(model.dtype))
    report = count_flops(model, H, H)
    flops = _section_flops(report)
    samples: dict[str, list[float]] = {s: [] for s in BENCH_SECTIONS}

    def one_pass(record: bool) -> None:
        times = {}
        t0 = time.perf_counter()
        x = model.stem(image)
        times["stem"] = time.perf_counter() - t0
        g = model.global_tokens if model.config.active_global_tokens else None
        for i, stage in enumerate(model.stages):
            t0 = time.perf_counter()
            with T.scope("stages"):
                x, g = stage(x, g)
            times[f"stages.{i}"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        model.forward_head(x)
        times["head"] = time.perf_counter() - t0
        if record:
            for k, v in times.items():
                samples[k].append(v)

    with T.no_grad():
        for _ in range(warmup):
            one_pass(False)
        for _ in range(repeats):
            one_pass(True)

    grids = stage_grids(H, H)
    tokens = {"stem": (H // 8) * (H // 8), "head": grids[-1][0] * grids[-1][1]}
    for i, (h, w) in enumerate(grids):
        tokens[f"stages.{i}"] = h * w
    return [
        StageTiming(s, tokens[s], flops[s], statistics.median(samples[s]), tuple(samples[s])) for s in BENCH_SECTIONS
    ]


def format_bench(rows: Sequence[StageTiming]) -> str:
    lines = [f"{'section':<10}{'tokens':>8}{'MACs':>16}{'median ms':>12}{'GMAC/s':>10}"]
    for r in rows:
        lines.append(f"{r.name:<10}{r.tokens:>8}{r.flops:>16,}{1e3 * r.seconds:>12.2f}{r.flops_per_sec / 1e9:>10.2f}")
    total_f = sum(r.flops for r in rows)
    total_t = sum(r.seconds for r in rows)
    lines.append(f"{'total':<10}{'':>8}{total_f:>16,}{1e3 * total_t:>12.2f}{total_f / total_t / 1e9:>10.2f}")
    stages = sorted((r for r in rows if r.name.startswith("stages")), key=lambda r: r.flops_per_sec)
    lines.append("stage efficiency (low -> high): " + " < ".join(r.name for r in stages))
    return "\n".join(lines)
