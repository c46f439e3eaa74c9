"""Command-line front end.

Exit codes: 0 success, 2 usage (including resolutions the windowing cannot
handle), 3 config or digest mismatch, 4 I/O or file-format failure, 5 a
numeric check failed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analyzer, serialization
from .errors import ConfigError, FormatError, LightViTError, ResolutionError
from .model import STRIDES, ModelConfig, Toggles, build, check_resolution, get_config, perturb
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(LightViTError):
    pass


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser, variant_default: Optional[str] = "T") -> None:
    p.add_argument("variant", nargs="?", default=variant_default, help="T, S, B or tiny")
    p.add_argument("--config", type=Path, help="JSON model config file (overrides the variant)")
    p.add_argument("--global-tokens", type=int, help="number of global tokens T")
    p.add_argument("--mlp-ratio", type=int, help="FFN expansion ratio")
    p.add_argument("--no-local", action="store_true", help="disable local window attention")
    p.add_argument("--no-global", action="store_true", help="disable global aggregate/broadcast")
    p.add_argument("--no-spatial-attn", action="store_true", help="disable the FFN spatial gate")
    p.add_argument("--no-channel-attn", action="store_true", help="disable the FFN channel gate")


def resolve_config(args: argparse.Namespace) -> ModelConfig:
    if args.config is not None:
        try:
            cfg = ModelConfig.from_dict(json.loads(args.config.read_text()))
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e.strerror}") from e
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{args.config}: invalid config: {e}") from e
    else:
        try:
            cfg = get_config(args.variant)
        except ConfigError as e:
            raise UsageError(str(e)) from e
    changes = {}
    if args.global_tokens is not None:
        changes["global_tokens"] = args.global_tokens
    if args.mlp_ratio is not None:
        changes["mlp_ratio"] = args.mlp_ratio
    tg = cfg.toggles
    toggles = Toggles(
        local=tg.local and not args.no_local,
        global_=tg.global_ and not args.no_global,
        spatial=tg.spatial and not args.no_spatial_attn,
        channel=tg.channel and not args.no_channel_attn,
    )
    if toggles != tg:
        changes["toggles"] = toggles
    if changes:
        cfg = cfg.replace(**changes)
    errs = cfg.violations()
    if errs:
        raise UsageError("invalid configuration: " + "; ".join(errs))
    return cfg


def _check_resolution(cfg: ModelConfig, res: int) -> None:
    check_resolution(cfg, res, res)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def describe_rows(cfg: ModelConfig) -> list[dict]:
    rows = [{"stage": "S0", "kind": "stem", "stride": f"1/{STRIDES[0]}", "C": cfg.stem_width}]
    for i, s in enumerate(STRIDES):
        rows.append(
            {
                "stage": f"S{i + 1}",
                "kind": "LightViT-Block",
                "stride": f"1/{s}",
                "B": cfg.depths[i],
                "C": cfg.widths[i],
                "H": cfg.heads[i],
                "T": cfg.active_global_tokens,
            }
        )
    return rows


def cmd_describe(args) -> int:
    cfg = resolve_config(args)
    rows = describe_rows(cfg)
    if args.format == "structured":
        print(json.dumps({"variant": cfg.name, "window": cfg.window, "global_tokens": cfg.active_global_tokens,
                          "stages": rows}, indent=1))
        return EXIT_OK
    print(f"LightViT-{cfg.name}: window S={cfg.window}, global tokens T={cfg.active_global_tokens}, "
          f"mlp ratio {cfg.mlp_ratio}, reduction r={cfg.reduction}")
    for r in rows:
        if r["kind"] == "stem":
            print(f"{r['stage']}  {'stem':<15} stride {r['stride']:<5} C={r['C']}")
        else:
            print(f"{r['stage']}  {r['kind']:<15} stride {r['stride']:<5} B={r['B']} C={r['C']} H={r['H']} T={r['T']}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    res = args.resolution
    _check_resolution(cfg, res)
    report = analyzer.analytic_report(cfg, res)
    sweep = None
    if args.sweep_global_tokens:
        try:
            tokens = [int(t) for t in args.sweep_global_tokens.split(",")]
        except ValueError as e:
            raise UsageError(f"--sweep-global-tokens expects comma-separated integers: {e}") from e
        sweep = analyzer.global_token_overhead(cfg, tokens, res)
    if args.format == "structured":
        payload = json.loads(report.dumps())
        payload["attention_core_flops"] = report.attention_core_flops()
        if sweep is not None:
            payload["global_token_sweep"] = [
                {"tokens": r.tokens, "params": r.params, "flops": r.flops} for r in sweep
            ]
        print(json.dumps(payload, indent=1))
        return EXIT_OK
    print(f"LightViT-{cfg.name} at {res}x{res} (FLOPs = multiply-accumulates)")
    print(report.table(depth=args.depth, verbose=args.verbose))
    print(f"attention-core MACs: {report.attention_core_flops():,}")
    if cfg.name in analyzer.REFERENCE_BUDGETS and res == 224:
        dev = analyzer.budget_deviation(cfg, res)
        print("* " + dev.line())
        print(f"* stem: {report.subtotal('stem').params:,} params, {report.subtotal('stem').flops:,} MACs; "
              f"head: {report.subtotal('head').params:,} params (neither is pinned down by the reference budgets)")
        ratio, best = analyzer.best_mlp_ratio(cfg)
        print(f"* FFN expansion ratio {cfg.mlp_ratio} in use; ratio {ratio} minimizes deviation "
              f"({100 * best.params_dev:+.1f}% params, {100 * best.flops_dev:+.1f}% MACs)")
    if sweep is not None:
        print()
        print(analyzer.format_sweep(sweep))
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = resolve_config(args)
    dtype = np.float64 if args.float64 else np.float32
    model = build(cfg, args.seed, dtype)
    serialization.save(model, args.out)
    print(f"wrote {args.out}: {sum(p.size for p in model.parameters()):,} parameters, digest {cfg.digest()[:16]}")
    return EXIT_OK


def _load_image(path: Path, mean, std) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return serialization.read_ppm(path, mean, std)
    arr = serialization.read_tensor(path)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"{path}: expected a 3 x H x W tensor, got shape {arr.shape}")
    return arr


def cmd_forward(args) -> int:
    expected = None
    if args.expect is not None:
        try:
            expected = get_config(args.expect)
        except ConfigError as e:
            raise UsageError(str(e)) from e
    model = serialization.load(args.weights, expected)
    image = _load_image(args.image, args.mean, args.std).astype(model.dtype)
    _, H, W = image.shape
    model.check_resolution(H, W)
    with no_grad():
        if args.features:
            out = model.forward_features(Tensor(image))
            base = Path(args.out)
            for i, f in enumerate(out.features):
                p = base.with_name(f"{base.stem}.stage{i + 1}{base.suffix}")
                serialization.dump_tensor(f, p)
                print(f"stage {i + 1}: {tuple(f.shape)} -> {p}")
            if out.global_tokens is not None:
                p = base.with_name(f"{base.stem}.global{base.suffix}")
                serialization.dump_tensor(out.global_tokens, p)
                print(f"global tokens: {tuple(out.global_tokens.shape)} -> {p}")
        else:
            logits = model.classify(Tensor(image))
            serialization.dump_tensor(logits, args.out)
            top = np.argsort(-logits.data)[:5]
            print("top-5: " + ", ".join(f"{i}:{logits.data[i]:.4f}" for i in top))
    return EXIT_OK


def run_gradcheck(cfg: ModelConfig, seed: int, eps: float, resolution: int, max_entries: Optional[int]):
    from .gradcheck import gradcheck

    model = perturb(build(cfg, seed, np.float64), seed + 1)
    rng = np.random.default_rng(seed + 2)
    image = Tensor(rng.standard_normal((3, resolution, resolution)), requires_grad=True)
    weights = rng.standard_normal(cfg.num_classes)

    def loss():
        return (model.classify(image) * weights).sum()

    names, params = zip(*model.named_parameters())
    return gradcheck(loss, list(params) + [image], list(names) + ["image"], eps, max_entries, seed)


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    _check_resolution(cfg, args.resolution)
    results = run_gradcheck(cfg, args.seed, args.eps, args.resolution, args.max_entries)
    groups: dict[str, float] = {}
    for r in results:
        key = r.name.rsplit(".", 1)[0] if "." in r.name else r.name
        groups[key] = max(groups.get(key, 0.0), r.rel_err)
    for key, err in groups.items():
        flag = "ok" if err < args.threshold else "FAIL"
        print(f"{key:<48} max rel err {err:.3e}  {flag}")
    worst = max(r.rel_err for r in results)
    print(f"worst relative error {worst:.3e} (threshold {args.threshold:g}, step {args.eps:g}, float64)")
    return EXIT_OK if worst < args.threshold else EXIT_NUMERIC


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    _check_resolution(cfg, args.resolution)
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    model = build(cfg, args.seed)
    rows = analyzer.bench_stage_throughput(model, args.resolution, args.repeats, args.warmup, args.seed)
    mode = "parallel" if args.parallel else "single-context"
    print(f"LightViT-{cfg.name} at {args.resolution}x{args.resolution}, {args.repeats} repeats, {mode}")
    print(analyzer.format_bench(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _floats3(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightvit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numeric kernels (LIGHTVIT_THREADS caps threads otherwise)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print the stage table of a variant")
    _add_model_args(p)
    p.add_argument("--format", choices=("table", "structured"), default="table")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("analyze", help="parameter and MAC breakdown")
    _add_model_args(p)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--sweep-global-tokens", metavar="LIST", help="e.g. 0,2,4,8,16,32")
    p.add_argument("--format", choices=("table", "structured"), default="table")
    p.add_argument("--depth", type=int, default=2, help="table nesting depth")
    p.add_argument("--verbose", action="store_true", help="include non-MAC element counts")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("init", help="initialize weights and write a weight file")
    _add_model_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--float64", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser(
        "forward",
        help="run a weight file on an image",
        description="Images are binary PPM (P6, 8-bit) scaled to [0,1] and normalized with --mean/--std "
        "(defaults: ImageNet mean 0.485,0.456,0.406 and std 0.229,0.224,0.225), or a tensor file.",
    )
    p.add_argument("weights", type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--features", action="store_true", help="dump the three stage feature maps instead of logits")
    p.add_argument("--expect", metavar="VARIANT", help="fail unless the weight file was built for this variant")
    p.add_argument("--mean", type=_floats3, default=serialization.IMAGENET_MEAN)
    p.add_argument("--std", type=_floats3, default=serialization.IMAGENET_STD)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole model")
    _add_model_args(p, variant_default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=6, help="probed entries per tensor (0 = all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-stage wall time and MAC throughput")
    _add_model_args(p)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", action="store_true", help="allow multi-threaded kernels")
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit(args) -> Optional[int]:
    if args.deterministic:
        return 1
    if getattr(args, "command", None) == "bench" and not args.parallel:
        return 1
    env = os.environ.get("LIGHTVIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"LIGHTVIT_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "max_entries", None) == 0:
        args.max_entries = None
    try:
        limit = _thread_limit(args)
        ctx = contextlib.nullcontext()
        if limit is not None:
            from threadpoolctl import threadpool_limits

            ctx = threadpool_limits(limits=limit)
        with ctx:
            return args.func(args)
    except (UsageError, ResolutionError) as e:
        print(f"lightvit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"lightvit {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"lightvit {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except LightViTError as e:
        print(f"lightvit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
