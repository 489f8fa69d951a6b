"""Command-line entry point.

Subcommands write their outputs under ``--out`` next to a ``manifest.json``
recording the command line, config hash and package version. Exit codes: 0
on success, 1 on usage or config errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (
    aux_features,
    attention_map,
    collect_trace,
    corr_decay_slope,
    default_probe_layer,
    heatmap_pixels,
    linear_probe,
    patch_grid,
    pca_rgb,
    rgb_pixels,
    token_norms,
    tv_profile,
    write_report,
)
from .backbone import count_params, estimate_flops
from .config import (
    DUAL_COMPONENTS,
    ConfigError,
    DualConfig,
    ModelConfig,
    SampleConfig,
    config_hash,
    load_config,
    validate,
)
from .datakit import Dataset, denormalize, gen_synthetic, load_folder, write_pnm
from .flow import euler_sample
from .trainer import create_state, fit, load_checkpoint

log = logging.getLogger("regdit")

# Reference parameter counts (millions) for dual-stream variants of B/16:
# (label, mode, components, reference)
DUAL_TABLE = (
    ("single", "single", (), 131),
    ("full: all", "full_dual", DUAL_COMPONENTS, 230),
    ("full: adaln", "full_dual", ("adaln",), 173),
    ("full: mlp", "full_dual", ("mlp",), 168),
    ("full: attention", "full_dual", ("attention",), 150),
    ("full: rmsnorm", "full_dual", ("rmsnorm",), 131),
    ("compact: all", "compact_dual", DUAL_COMPONENTS, 161),
    ("compact: adaln+mlp+rmsnorm", "compact_dual", ("adaln", "mlp", "rmsnorm"), 149),
    ("compact: adaln+rmsnorm", "compact_dual", ("adaln", "rmsnorm"), 136),
    ("compact: mlp+rmsnorm", "compact_dual", ("mlp", "rmsnorm"), 143),
    ("compact: adaln+mlp", "compact_dual", ("adaln", "mlp"), 149),
)

DUAL_SHORTHAND = {
    "single": ("single", ()),
    "full": ("full_dual", DUAL_COMPONENTS),
    "compact": ("compact_dual", ("adaln", "mlp", "rmsnorm")),
    "compact-all": ("compact_dual", DUAL_COMPONENTS),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_dual(spec: str) -> DualConfig:
    """``single``, ``full``, ``compact``, ``compact-all`` or
    ``<full|compact>:comp1,comp2``."""
    if spec in DUAL_SHORTHAND:
        mode, comps = DUAL_SHORTHAND[spec]
        return DualConfig(mode, frozenset(comps))
    head, _, tail = spec.partition(":")
    if head not in ("full", "compact") or not tail:
        raise UsageError(f"bad --dual value {spec!r}")
    comps = frozenset(c.strip() for c in tail.split(","))
    unknown = comps - set(DUAL_COMPONENTS)
    if unknown:
        raise UsageError(f"unknown dual components {sorted(unknown)}")
    return DualConfig("full_dual" if head == "full" else "compact_dual", comps)


# --- shared plumbing -----------------------------------------------------------------

def _write_manifest(out: Path, argv: list[str], command: str, digest: str | None, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": list(argv), "config_hash": digest, "version": __version__}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _load_dataset(model_cfg: ModelConfig, per_class: int, seed: int, data: str | None) -> Dataset:
    if data:
        ds = load_folder(data, model_cfg.image, model_cfg.channels)
        if ds.num_classes > model_cfg.num_classes:
            raise ValueError(f"{data} has {ds.num_classes} classes, model has {model_cfg.num_classes}")
        return ds
    return gen_synthetic(model_cfg.num_classes, per_class, model_cfg.image, seed=seed,
                         channels=model_cfg.channels)


def _configs(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"sample.seed={args.seed}"]
    return load_config(args.config, overrides)


# --- commands ------------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    out = Path(args.out)
    if args.resume:
        if args.config:
            model_cfg, train_cfg, _ = _configs(args)
            state = load_checkpoint(args.resume, model_cfg, train_cfg)
        else:
            state = load_checkpoint(args.resume)
            if args.seed is not None or args.set:
                raise UsageError("--seed/--set with --resume need --config")
    else:
        if not args.config:
            raise UsageError("train needs --config (or --resume)")
        model_cfg, train_cfg, _ = _configs(args)
        state = create_state(model_cfg, train_cfg)
    tcfg = state.train_cfg
    ds = _load_dataset(state.model_cfg, tcfg.per_class, tcfg.seed, args.data)
    digest = config_hash(state.model_cfg, tcfg)
    _write_manifest(out, argv, "train", digest, {"start_step": state.step})
    history = fit(state, ds.images, ds.labels, out_dir=out)
    if history:
        print(f"step {state.step} loss {history[-1]['loss']:.6f}")
    return 0


def _model_from_ckpt(path: str, raw: bool):
    state = load_checkpoint(path)
    model = state.model.eval() if raw else state.ema_model()
    return state, model


def cmd_sample(args, argv) -> int:
    state, model = _model_from_ckpt(args.ckpt, args.raw)
    cfg = state.model_cfg
    scfg = SampleConfig(steps=args.steps, guidance=args.cfg, seed=args.seed)
    validate(cfg, sample=scfg)
    if not 0 <= args.label < cfg.num_classes:
        raise UsageError(f"--class must be in [0, {cfg.num_classes})")
    gen = torch.Generator().manual_seed(scfg.seed)
    labels = torch.full((args.n,), args.label, dtype=torch.long)
    x = euler_sample(model, labels, scfg.steps, scfg.guidance, generator=gen)
    out = Path(args.out)
    _write_manifest(out, argv, "sample", config_hash(cfg, state.train_cfg, scfg),
                    {"step": state.step})
    pix = denormalize(x.permute(0, 2, 3, 1))
    for i, img in enumerate(pix):
        write_pnm(out / f"sample_{i:04d}.ppm", img)
    print(f"wrote {len(pix)} samples to {out}")
    return 0


def _analysis_inputs(args, state, model):
    cfg = state.model_cfg
    ds = _load_dataset(cfg, state.train_cfg.per_class, args.seed, args.data)
    n = min(args.n, len(ds))
    gen = torch.Generator().manual_seed(args.seed)
    idx = torch.randperm(len(ds), generator=gen)[:n]
    images, labels = ds.images[idx], ds.labels[idx]
    return images, labels, collect_trace(model, images, labels, args.t, seed=args.seed)


def cmd_analyze(args, argv) -> int:
    out = Path(args.out)
    state, model = _model_from_ckpt(args.ckpt, args.raw)
    cfg = state.model_cfg
    images, labels, trace = _analysis_inputs(args, state, model)
    meta = {"t": args.t, "n_images": int(images.shape[0]), "step": state.step}
    layer = args.layer
    if layer is not None and not 0 <= layer < cfg.depth:
        raise UsageError(f"--layer must be in [0, {cfg.depth})")
    _write_manifest(out, argv, f"analyze {args.what}", config_hash(cfg, state.train_cfg))

    if args.what == "norms":
        prof = token_norms(trace)
        width = max(len(v) for v in prof.layers)
        grid = np.zeros((len(prof.layers), width))
        for l, v in enumerate(prof.layers):
            grid[l, : len(v)] = v
        write_pnm(out / "map_0000.ppm", heatmap_pixels(grid, 4))
        aux = [prof.aux_norms(l).tolist() for l in range(len(prof.layers))]
        write_report(out, "norms", {**meta, "splits": prof.splits,
                                    "layers": [v.tolist() for v in prof.layers], "aux": aux},
                     prof.rows())
    elif args.what == "tv":
        tv_a = tv_profile(trace)
        payload = {**meta, "tv": tv_a.tolist()}
        rows = [{"layer": l, "tv": float(v)} for l, v in enumerate(tv_a)]
        if args.ckpt2:
            state2, model2 = _model_from_ckpt(args.ckpt2, args.raw)
            if state2.model_cfg.depth != cfg.depth:
                raise ValueError("tv ratio checkpoints differ in depth")
            tr2 = collect_trace(model2, images, labels, args.t, seed=args.seed)
            tv_b = tv_profile(tr2)
            ratio = [float(a / b) if b else None for a, b in zip(tv_a, tv_b)]
            payload.update(tv_without=tv_b.tolist(), ratio=ratio,
                           zero_denominator=[l for l, r in enumerate(ratio) if r is None])
            for row, b, r in zip(rows, tv_b, ratio):
                row.update(tv_without=float(b), ratio=r)
        write_report(out, "tv", payload, rows)
    elif args.what == "probe":
        layer = default_probe_layer(cfg.depth) if layer is None else layer
        snap = trace.blocks[layer]
        feats, names = [], []
        if snap.split:
            feats.append(aux_features(trace, layer))
            names += [f"aux_{i}" for i in range(snap.split)]
        feats.append(snap.patches.mean(1, keepdim=True).transpose(0, 1))
        names.append("patch_mean")
        res = linear_probe(torch.cat(feats), labels, cfg.num_classes, layer=layer, seed=args.seed)
        rows = [{"token": n, "accuracy": a, "mean_norm": m}
                for n, a, m in zip(names, res.accuracy, res.mean_norm)]
        write_report(out, "probe", {**meta, "layer": layer, "tokens": rows}, rows)
    elif args.what in ("attn", "pca"):
        layer = (cfg.reg_start if cfg.has_aux else 0) if layer is None else layer
        maps = []
        for i in range(min(args.maps, images.shape[0])):
            if args.what == "attn":
                m = attention_map(trace, layer, args.token, image=i)
                px = heatmap_pixels(m)
            else:
                m = pca_rgb(patch_grid(trace.blocks[layer], trace.grid)[i])
                px = rgb_pixels(m)
            write_pnm(out / f"map_{i:04d}.ppm", px)
            maps.append(np.asarray(m).tolist())
        write_report(out, args.what, {**meta, "layer": layer, "token": args.token, "maps": maps})
    elif args.what == "slope":
        rows = [{"layer": l, "slope": corr_decay_slope(patch_grid(b, trace.grid))}
                for l, b in enumerate(trace.blocks)]
        write_report(out, "slope", {**meta, "slopes": [r["slope"] for r in rows]}, rows)
    print(f"wrote {out / 'report.json'}")
    return 0


def _with_dual(cfg: ModelConfig, dual: DualConfig | None) -> ModelConfig:
    return cfg if dual is None else replace(cfg, dual=dual)


def cmd_params(args, argv) -> int:
    model_cfg, _, _ = load_config(args.config, args.set or [])
    if args.table:
        print(f"{'variant':<28} {'params (M)':>11} {'reference':>10} {'rel.err':>8}")
        base = count_params(replace(model_cfg, dual=DualConfig()))["total"]
        rows = []
        for label, mode, comps, ref in DUAL_TABLE:
            cfg = replace(model_cfg, dual=DualConfig(mode, frozenset(comps)))
            validate(cfg)
            total = count_params(cfg)["total"]
            rows.append({"variant": label, "params": total, "reference_M": ref,
                         "ratio_to_single": total / base})
            print(f"{label:<28} {total / 1e6:>11.2f} {ref:>10d} {total / 1e6 / ref - 1:>+8.1%}")
    else:
        cfg = _with_dual(model_cfg, parse_dual(args.dual) if args.dual else None)
        validate(cfg)
        counts = count_params(cfg)
        for k, v in counts.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    print(f"  {k}.{kk:<10} {vv:>14,d}")
            else:
                print(f"{k:<14} {v:>14,d}")
        print(f"total {counts['total'] / 1e6:.2f}M")
    if args.out:
        payload = {"rows": rows} if args.table else {"counts": counts}
        _write_manifest(Path(args.out), argv, "params", config_hash(model_cfg))
        write_report(args.out, "params", payload, rows if args.table else None)
    return 0


def cmd_flops(args, argv) -> int:
    model_cfg, _, _ = load_config(args.config, args.set or [])
    cfg = _with_dual(model_cfg, parse_dual(args.dual) if args.dual else None)
    validate(cfg)
    est = estimate_flops(cfg)
    for k, v in est["terms"].items():
        print(f"{k:<14} {v / 1e9:>10.3f}")
    print(f"total {est['gflops']:.2f} GFLOPs")
    if args.out:
        _write_manifest(Path(args.out), argv, "flops", config_hash(cfg))
        write_report(args.out, "flops", est)
    return 0


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regdit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp, required=True):
        sp.add_argument("--config", required=required, help="config file or bundled preset name")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="train a model")
    config_flags(t, required=False)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--data", help="class-subfolder image directory (default: synthetic shapes)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--class", dest="label", type=int, default=0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg", type=float, default=1.0, help="guidance scale")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--raw", action="store_true", help="use live weights instead of EMA")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="measure a checkpoint")
    a.add_argument("what", choices=("norms", "tv", "probe", "attn", "pca", "slope"))
    a.add_argument("--ckpt", required=True)
    a.add_argument("--ckpt2", help="baseline checkpoint for tv ratios")
    a.add_argument("--out", required=True)
    a.add_argument("--data")
    a.add_argument("--n", type=int, default=256, help="number of images")
    a.add_argument("--t", type=float, default=0.1, help="noise level of the input")
    a.add_argument("--layer", type=int)
    a.add_argument("--token", type=int, default=0, help="query token for attention maps")
    a.add_argument("--maps", type=int, default=4, help="images to render maps for")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--raw", action="store_true")
    a.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("params", cmd_params, "parameter counts"),
                                 ("flops", cmd_flops, "GFLOPs estimate")):
        q = sub.add_parser(name, help=helptext)
        config_flags(q)
        q.add_argument("--dual", help="single | full | compact | compact-all | <full|compact>:a,b")
        q.add_argument("--out")
        if name == "params":
            q.add_argument("--table", action="store_true", help="dual-stream variant grid")
        q.set_defaults(func=func)
    return p


def _apply_threads():
    n = os.environ.get("RDIT_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"RDIT_THREADS must be an integer, got {n!r}") from None


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        _apply_threads()
        return args.func(args, argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # runtime failures
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
