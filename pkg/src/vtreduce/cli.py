"""Command line entry point.

Subcommands:
    gen        write a synthetic encoder or decoder trace bundle
    pipeline   run scan -> merge -> prune -> cost report on trace bundles
    flops      prefill FLOPs at a uniform visual-token count
    budget     encoder retention needed for a target average retention
    analyze    bias-histogram / attention-sum CSVs from a decoder trace

Exit codes: 0 ok, 1 domain error (bad trace, infeasible budget, bad
config), 2 usage error. The environment variable VTREDUCE_OUT_DIR
overrides output directories that were not set explicitly on the command
line.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import analysis, cost_model, decoder_prune, encoder_scan, trace_io
from .errors import ConfigError, VtReduceError

OUT_DIR_ENV = "VTREDUCE_OUT_DIR"

_PIPELINE_KEYS = {
    "preset",
    "encoder_trace",
    "decoder_trace",
    "retention",
    "target_average",
    "global_fraction",
    "local_layer",
    "output_layer",
    "window_rows",
    "window_cols",
    "score_source",
    "decoder_retention",
    "prune_layer",
    "n_layers",
    "hidden_size",
    "ffn_size",
    "n_text_total",
    "out_dir",
}


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError("grid", f"expected HxW, got {text!r}") from None


def _resolve_out(flag_value, fallback=None):
    if flag_value is not None:
        return Path(flag_value)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    if fallback is not None:
        return Path(fallback)
    raise ConfigError("out", "no output directory given")


def _cmd_gen(args) -> int:
    out = _resolve_out(args.out)
    if args.kind == "encoder":
        grid_h, grid_w = _parse_grid(args.grid)
        trace = trace_io.generate_synthetic_encoder(
            seed=args.seed,
            grid_h=grid_h,
            grid_w=grid_w,
            n_layers=args.layers,
            n_heads=args.heads,
            embed_dim=args.embed_dim,
            locality_strength=args.locality,
            include_self_attention=not args.cls_only,
        )
        manifest = trace_io.write_encoder_bundle(trace, out)
    else:
        trace = trace_io.generate_synthetic_decoder(
            seed=args.seed,
            n_layers=args.layers,
            n_heads=args.heads,
            n_pre_text=args.pre_text,
            n_visual=args.visual,
            n_post_text=args.post_text,
            position_bias_strength=args.bias,
            visual_boost_strength=args.visual_boost,
        )
        manifest = trace_io.write_decoder_bundle(trace, out)
    print(manifest)
    return 0


def _load_pipeline_config(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a JSON object")
        for key in loaded:
            if key not in _PIPELINE_KEYS:
                raise ConfigError(key, "unknown config field")
        cfg.update(loaded)

    overrides = {
        "preset": args.preset,
        "encoder_trace": args.encoder_trace,
        "decoder_trace": args.decoder_trace,
        "retention": args.retention,
        "target_average": args.target_average,
        "global_fraction": args.global_fraction,
        "local_layer": args.local_layer,
        "output_layer": args.output_layer,
        "window_rows": args.window_rows,
        "window_cols": args.window_cols,
        "score_source": args.score_source,
        "decoder_retention": args.decoder_retention,
        "prune_layer": args.prune_layer,
        "n_layers": args.n_layers,
        "hidden_size": args.hidden_size,
        "ffn_size": args.ffn_size,
        "n_text_total": args.n_text_total,
        "out_dir": args.out,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})

    if cfg.get("preset"):
        name = cfg["preset"]
        if name not in cost_model.MODEL_PRESETS:
            raise ConfigError(
                "preset",
                f"unknown preset {name!r}, have {sorted(cost_model.MODEL_PRESETS)}",
            )
        preset = cost_model.MODEL_PRESETS[name]
        cfg.setdefault("n_layers", preset.dims.n_layers)
        cfg.setdefault("hidden_size", preset.dims.hidden_size)
        cfg.setdefault("ffn_size", preset.dims.ffn_size)
        cfg.setdefault("local_layer", preset.local_layer)
        cfg.setdefault("prune_layer", preset.prune_layer)

    for key in ("encoder_trace", "decoder_trace"):
        if key not in cfg:
            raise ConfigError(key, "required (config file or flag)")
    for key in ("n_layers", "hidden_size", "ffn_size"):
        if key not in cfg:
            raise ConfigError(key, "required unless a preset supplies it")
    if "retention" in cfg and "target_average" in cfg:
        raise ConfigError(
            "target_average", "give either retention or target_average, not both"
        )
    cfg.setdefault("decoder_retention", 0.333)
    cfg.setdefault("local_layer", 6)
    cfg.setdefault("prune_layer", max(1, cfg["n_layers"] // 2))
    return cfg


def _cmd_pipeline(args) -> int:
    stage = "config"
    try:
        cfg = _load_pipeline_config(args)
        dims = cost_model.ModelDims(
            n_layers=cfg["n_layers"],
            hidden_size=cfg["hidden_size"],
            ffn_size=cfg["ffn_size"],
        )
        prune_cfg = decoder_prune.PruneConfig(
            prune_layer=cfg["prune_layer"],
            retention=cfg["decoder_retention"],
            n_layers=cfg["n_layers"],
        )
        if "target_average" in cfg:
            retention = cost_model.solve_encoder_retention(
                cfg["target_average"],
                cfg["decoder_retention"],
                cfg["prune_layer"],
                cfg["n_layers"],
            )
        else:
            retention = cfg.get("retention", 1.0)
        scan_cfg = encoder_scan.ScanConfig(
            retention=retention,
            global_fraction=cfg.get("global_fraction", 0.5),
            local_layer=cfg["local_layer"],
            output_layer=cfg.get("output_layer"),
            window_rows=cfg.get("window_rows", 4),
            window_cols=cfg.get("window_cols", 4),
            score_source=cfg.get("score_source", "cls"),
        )
        out_dir = _resolve_out(args.out, fallback=cfg.get("out_dir", "."))

        stage = "load-traces"
        encoder = trace_io.read_encoder_bundle(cfg["encoder_trace"])
        decoder = trace_io.read_decoder_bundle(cfg["decoder_trace"])
        if decoder.n_layers != dims.n_layers:
            raise ConfigError(
                "decoder_trace",
                f"trace has {decoder.n_layers} layers, n_layers says {dims.n_layers}",
            )

        stage = "encoder-scan"
        selection = encoder_scan.select_tokens(encoder, scan_cfg)

        stage = "merge"
        selection = encoder_scan.merge_tokens(encoder.embeddings, selection)
        n_merged = len(selection.selected)
        if decoder.n_visual != n_merged:
            raise ConfigError(
                "decoder_trace",
                f"trace carries {decoder.n_visual} visual tokens but the scan "
                f"kept {n_merged}; regenerate with --visual {n_merged}",
            )

        stage = "decoder-scores"
        scores = decoder_prune.text_attention_scores(decoder, cfg["prune_layer"])

        stage = "prune"
        profile = decoder_prune.prune_at_layer(scores, prune_cfg, n_merged)

        stage = "report"
        n_text = cfg.get(
            "n_text_total", decoder.n_pre_text + decoder.n_post_text
        )
        report = cost_model.build_report(selection, profile, dims, n_text)

        stage = "write"
        out_dir.mkdir(parents=True, exist_ok=True)
        encoder_scan.write_selection(selection, out_dir)
        (out_dir / "profile.json").write_text(
            json.dumps(
                {
                    "counts": profile.counts,
                    "retained": profile.retained,
                    "n_merged": profile.n_merged,
                    "prune_layer": profile.prune_layer,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        cost_model.write_report_csv(report, out_dir / "cost_report.csv")
        cost_model.write_report_summary(report, out_dir / "cost_summary.json")
    except VtReduceError as exc:
        print(f"pipeline failed at stage {stage!r}: {exc}", file=sys.stderr)
        return 1

    print(f"selected {len(selection.selected)}/{selection.n_tokens} tokens "
          f"({len(selection.global_indices)} global + "
          f"{len(selection.local_indices)} local), "
          f"{len(profile.retained)} retained after layer {profile.prune_layer}")
    print(f"total FLOPs {report.total_flops:.6e} "
          f"(uniform convention {report.total_flops_uniform:.6e}), "
          f"speedup {report.prefill_speedup_estimate:.3f}, "
          f"KV fraction {report.kv_fraction:.4f}")
    print(out_dir / "cost_summary.json")
    return 0


def _dims_from_args(args) -> cost_model.ModelDims:
    if args.preset:
        if args.preset not in cost_model.MODEL_PRESETS:
            raise ConfigError(
                "preset",
                f"unknown preset {args.preset!r}, "
                f"have {sorted(cost_model.MODEL_PRESETS)}",
            )
        return cost_model.MODEL_PRESETS[args.preset].dims
    if None in (args.n_layers, args.hidden_size, args.ffn_size):
        raise ConfigError(
            "preset", "need --preset or all of --n-layers/--hidden-size/--ffn-size"
        )
    return cost_model.ModelDims(args.n_layers, args.hidden_size, args.ffn_size)


def _cmd_flops(args) -> int:
    dims = _dims_from_args(args)
    total = cost_model.flops_total([args.tokens] * dims.n_layers, dims)
    print(f"{total:.6e}")
    return 0


def _cmd_budget(args) -> int:
    value = cost_model.solve_encoder_retention(
        args.target, args.decoder_retention, args.prune_layer, args.n_layers
    )
    print(f"{value:.6g}")
    return 0


def _cmd_analyze(args) -> int:
    trace = trace_io.read_decoder_bundle(args.trace)
    if args.what == "attention-sum":
        curve = analysis.attention_sum_per_layer(trace)
        out = args.out
        if out is None:
            writer = csv.writer(sys.stdout)
            writer.writerow(["layer", "head", "sum"])
            for i in range(curve.per_head.shape[0]):
                for h in range(curve.per_head.shape[1]):
                    writer.writerow([i + 1, h, f"{curve.per_head[i, h]:.12g}"])
        else:
            analysis.write_attention_sums_csv(curve, out)
            print(out)
    else:
        grid_h, grid_w = _parse_grid(args.grid)
        hist = analysis.position_bias_histogram(
            trace, args.layer, args.retention, grid_h, grid_w
        )
        out = args.out
        if out is None:
            writer = csv.writer(sys.stdout)
            writer.writerow(["layer", "row", "col", "count"])
            for r in range(grid_h):
                for c in range(grid_w):
                    writer.writerow([hist.layer, r, c, int(hist.counts[r, c])])
        else:
            analysis.write_bias_histogram_csv(hist, out)
            print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtreduce",
        description="Two-stage visual token reduction over attention traces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic trace bundle")
    gen.add_argument("--kind", choices=["encoder", "decoder"], required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", help="bundle directory")
    gen.add_argument("--layers", type=int, default=12)
    gen.add_argument("--heads", type=int, default=4)
    gen.add_argument("--grid", default="6x6", help="encoder patch grid, HxW")
    gen.add_argument("--embed-dim", type=int, default=32)
    gen.add_argument("--locality", type=float, default=0.0,
                     help="encoder distance-decay strength at layer 1")
    gen.add_argument("--cls-only", action="store_true",
                     help="skip self-attention arrays (smaller bundles)")
    gen.add_argument("--pre-text", type=int, default=4)
    gen.add_argument("--visual", type=int, default=36)
    gen.add_argument("--post-text", type=int, default=8)
    gen.add_argument("--bias", type=float, default=0.0,
                     help="decoder early-layer recency strength")
    gen.add_argument("--visual-boost", type=float, default=0.0,
                     help="decoder mid-layer visual logit bonus")
    gen.set_defaults(func=_cmd_gen)

    pipe = sub.add_parser("pipeline", help="run the full reduction pipeline")
    pipe.add_argument("--config", help="JSON config file")
    pipe.add_argument("--preset", help="model preset name")
    pipe.add_argument("--encoder-trace", dest="encoder_trace")
    pipe.add_argument("--decoder-trace", dest="decoder_trace")
    pipe.add_argument("--retention", type=float, help="encoder-stage retention")
    pipe.add_argument("--target-average", dest="target_average", type=float,
                      help="solve the encoder retention for this average")
    pipe.add_argument("--global-fraction", dest="global_fraction", type=float)
    pipe.add_argument("--local-layer", dest="local_layer", type=int)
    pipe.add_argument("--output-layer", dest="output_layer", type=int)
    pipe.add_argument("--window-rows", dest="window_rows", type=int)
    pipe.add_argument("--window-cols", dest="window_cols", type=int)
    pipe.add_argument("--score-source", dest="score_source",
                      choices=["cls", "self_avg"])
    pipe.add_argument("--decoder-retention", dest="decoder_retention", type=float)
    pipe.add_argument("--prune-layer", dest="prune_layer", type=int)
    pipe.add_argument("--n-layers", dest="n_layers", type=int)
    pipe.add_argument("--hidden-size", dest="hidden_size", type=int)
    pipe.add_argument("--ffn-size", dest="ffn_size", type=int)
    pipe.add_argument("--n-text-total", dest="n_text_total", type=int)
    pipe.add_argument("--out", help="artifact directory")
    pipe.set_defaults(func=_cmd_pipeline)

    flops = sub.add_parser("flops", help="prefill FLOPs at a uniform token count")
    flops.add_argument("--preset")
    flops.add_argument("--n-layers", dest="n_layers", type=int)
    flops.add_argument("--hidden-size", dest="hidden_size", type=int)
    flops.add_argument("--ffn-size", dest="ffn_size", type=int)
    flops.add_argument("--tokens", type=float, required=True)
    flops.set_defaults(func=_cmd_flops)

    budget = sub.add_parser("budget", help="solve the encoder retention")
    budget.add_argument("--target", type=float, required=True)
    budget.add_argument("--decoder-retention", dest="decoder_retention",
                        type=float, required=True)
    budget.add_argument("--prune-layer", dest="prune_layer", type=int, required=True)
    budget.add_argument("--n-layers", dest="n_layers", type=int, required=True)
    budget.set_defaults(func=_cmd_budget)

    analyze = sub.add_parser("analyze", help="decoder-trace measurements")
    analyze.add_argument("what", choices=["attention-sum", "bias-histogram"])
    analyze.add_argument("--trace", required=True)
    analyze.add_argument("--out", help="CSV path (stdout when omitted)")
    analyze.add_argument("--layer", type=int, default=1)
    analyze.add_argument("--retention", type=float, default=0.5)
    analyze.add_argument("--grid", default="6x6")
    analyze.set_defaults(func=_cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VtReduceError as exc:
        print(f"error[{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
