"""Command-line interface.

Subcommands cover the whole workflow: ``score-heads`` profiles a corpus,
``guide`` produces a crop box for one record, ``crop`` applies a box to an
image, ``synth`` generates scenario data or runs the parameter sweep, and
``render`` visualizes a saved map.  Reports go to stdout as JSON.

Exit codes: 0 success, 1 usage or configuration error, 2 invalid input
data, 3 degenerate result (constant score matrix or empty guidance map).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import sweep_guidance
from .config import RunConfig, apply_overrides, load_config, load_scenario
from .errors import (
    ConfigError,
    DegenerateMatrixError,
    HavcError,
    NoSalientRegionError,
    PipelineError,
)
from .guidance import run_pipeline
from .pixmap import crop_image, read_pixmap, render_map, write_pixmap
from .profiling import (
    accumulate_scores,
    normalize_and_filter,
    read_expert_heads,
    write_expert_heads,
)
from .spatial import CropBox
from .synth import gen_diagnostic_corpus, gen_inference_record
from .tensor_store import (
    load_corpus,
    load_inference,
    load_tensor,
    save_corpus,
    save_inference,
)

log = logging.getLogger("havc.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DEGENERATE = 3


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _add_param_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("pipeline parameters (override config file)")
    group.add_argument("--alpha", type=float, help="fusion blend toward the focus channel")
    group.add_argument("--top-k", type=int, dest="top_k", help="heads kept after fusion")
    group.add_argument("--temperature", type=float, help="softmax temperature for head weights")
    group.add_argument("--entropy-threshold", type=float, dest="entropy_threshold")
    group.add_argument("--component-weight", type=float, dest="component_weight")
    group.add_argument("--dispersion-weight", type=float, dest="dispersion_weight")
    group.add_argument("--norm-scope", choices=["survivors", "experts"], dest="norm_scope")
    group.add_argument("--otsu-bins", type=int, dest="otsu_bins")
    group.add_argument("--connectivity", type=int, choices=[4, 8])
    group.add_argument("--box-threshold", type=float, dest="box_threshold")
    group.add_argument("--box-pad", type=int, dest="box_pad")
    group.add_argument("--box-min-side", type=int, dest="box_min_side")


_PARAM_FLAGS = (
    "alpha",
    "top_k",
    "temperature",
    "entropy_threshold",
    "component_weight",
    "dispersion_weight",
    "norm_scope",
    "otsu_bins",
    "connectivity",
    "box_threshold",
    "box_pad",
    "box_min_side",
)


def _resolve_config(args) -> RunConfig:
    config = load_config(getattr(args, "config", None))
    overrides = {k: getattr(args, k, None) for k in _PARAM_FLAGS}
    for extra in ("score_threshold", "per_layer"):
        if getattr(args, extra, None) is not None:
            overrides[extra] = getattr(args, extra)
    return apply_overrides(config, overrides)


def _params_doc(config: RunConfig) -> dict:
    return {
        "alpha": config.alpha,
        "top_k": config.top_k,
        "temperature": config.temperature,
        "entropy_threshold": config.entropy_threshold,
        "component_weight": config.component_weight,
        "dispersion_weight": config.dispersion_weight,
        "norm_scope": config.norm_scope,
        "otsu_bins": config.otsu_bins,
        "connectivity": config.connectivity,
        "box_threshold": config.box_threshold,
        "box_pad": config.box_pad,
        "box_min_side": config.box_min_side,
    }


def cmd_score_heads(args) -> int:
    config = _resolve_config(args)
    if not (0.0 <= config.score_threshold <= 1.0):
        raise ConfigError(
            f"score threshold {config.score_threshold} outside [0, 1]"
        )
    corpus = load_corpus(args.corpus)
    matrix = accumulate_scores(corpus)
    experts = normalize_and_filter(
        matrix, config.score_threshold, per_layer=config.per_layer
    )
    if args.out:
        write_expert_heads(args.out, experts, matrix, per_layer=config.per_layer)
    doc = {
        "schema": "havc-score-report/1",
        "geometry": {"n_layers": corpus.n_layers, "n_heads": corpus.n_heads},
        "threshold": config.score_threshold,
        "per_layer": config.per_layer,
        "n_records": len(corpus.records),
        "expert_heads": [[h.layer, h.head] for h in experts.heads],
    }
    if args.scores:
        doc["normalized_scores"] = [
            [float(v) for v in row] for row in matrix.normalized
        ]
    _emit(doc, args.report)
    return EXIT_OK


def cmd_guide(args) -> int:
    config = _resolve_config(args)
    experts = read_expert_heads(args.experts)
    record = load_inference(args.record)
    result = run_pipeline(experts, record, config.guidance_params())
    doc = {
        "schema": "havc-guidance-report/1",
        "params": _params_doc(config),
        "record": {
            "grid_side": record.grid_side,
            "image_w": record.image_w,
            "image_h": record.image_h,
            "patch_size": record.patch_size,
            "predicted_token": record.predicted_token,
            "log_prob": record.log_prob,
        },
        "selected": [
            {
                "layer": a.head.layer,
                "head": a.head.head,
                "entropy": a.entropy,
                "grad_score": a.grad_score,
                "fused": a.fused,
                "weight": a.weight,
            }
            for a in result.selected
        ],
        "fallback_used": result.fallback_used,
        "grad_available": result.grad_available,
        "patch_box": list(result.patch_box),
        "crop_box": {
            "x0": result.crop.x0,
            "y0": result.crop.y0,
            "x1": result.crop.x1,
            "y1": result.crop.y1,
        },
    }
    if args.map_out:
        from .tensor_store import save_tensor

        save_tensor(args.map_out, result.guidance_map)
    _emit(doc, args.report)
    return EXIT_OK


def _parse_box(text: str) -> CropBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"box must be 'x0,y0,x1,y1', got {text!r}")
    try:
        x0, y0, x1, y1 = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"box must contain integers, got {text!r}") from None
    return CropBox(x0=x0, y0=y0, x1=x1, y1=y1)


def cmd_crop(args) -> int:
    if (args.box is None) == (args.report is None):
        raise ConfigError("pass exactly one of --box or --report")
    if args.box is not None:
        box = _parse_box(args.box)
    else:
        doc = json.loads(Path(args.report).read_text())
        cb = doc.get("crop_box")
        if not isinstance(cb, dict):
            raise ConfigError(f"{args.report}: no crop_box in report")
        box = CropBox(x0=cb["x0"], y0=cb["y0"], x1=cb["x1"], y1=cb["y1"])
    image = read_pixmap(args.image)
    write_pixmap(args.out, crop_image(image, box))
    print(json.dumps({"crop_box": [box.x0, box.y0, box.x1, box.y1], "out": args.out}))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.sweep:
        alphas = [float(v) for v in args.alphas.split(",")]
        ks = [int(v) for v in args.ks.split(",")]
        config = _resolve_config(args)
        report = sweep_guidance(
            range(args.seeds), alphas, ks, config.guidance_params()
        )
        _emit(report, args.report)
        return EXIT_OK
    spec = load_scenario(args.scenario)
    out = Path(args.out or ".")
    written = {}
    if args.kind in ("diagnostic", "both"):
        corpus = gen_diagnostic_corpus(spec, args.records)
        written["corpus"] = str(save_corpus(out, corpus, name="corpus"))
    if args.kind in ("inference", "both"):
        record = gen_inference_record(spec, with_grad=not args.no_grad)
        written["record"] = str(save_inference(out, record, name="record"))
    print(json.dumps(written, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    values = load_tensor(args.tensor)
    if values.ndim != 2:
        raise ConfigError(f"render expects a 2-D map, got rank {values.ndim}")
    write_pixmap(args.out, render_map(values, scale=args.scale))
    print(json.dumps({"out": args.out, "shape": list(values.shape)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="havc",
        description="Expert-head profiling and attention-guided visual cropping.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score-heads", help="profile heads on a diagnostic corpus")
    p.add_argument("corpus", help="corpus manifest (.hvm)")
    p.add_argument("--out", help="write the expert head set to this JSON file")
    p.add_argument("--report", help="also write the report JSON to this file")
    p.add_argument("--scores", action="store_true", help="include the score matrix")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--threshold", type=float, dest="score_threshold")
    p.add_argument("--per-layer", action="store_const", const=True, dest="per_layer")
    p.set_defaults(func=cmd_score_heads)

    p = sub.add_parser("guide", help="build crop guidance for one record")
    p.add_argument("experts", help="expert head set JSON")
    p.add_argument("record", help="inference record manifest (.hvm)")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--report", help="also write the report JSON to this file")
    p.add_argument("--map-out", dest="map_out", help="save the guidance map (.hvt)")
    _add_param_flags(p)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("crop", help="apply a crop box to a pixmap image")
    p.add_argument("image", help="input image (.pgm or .ppm)")
    p.add_argument("--box", help="crop box as 'x0,y0,x1,y1'")
    p.add_argument("--report", help="guidance report JSON to take the box from")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("synth", help="generate synthetic data or run the sweep")
    p.add_argument("scenario", nargs="?", help="scenario TOML file")
    p.add_argument("--kind", choices=["diagnostic", "inference", "both"], default="both")
    p.add_argument("--records", type=int, default=50, help="corpus size")
    p.add_argument("--no-grad", action="store_true", help="omit gradients")
    p.add_argument("--out", help="output directory")
    p.add_argument("--sweep", action="store_true", help="run the alpha x top-k sweep")
    p.add_argument("--alphas", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--ks", default="1,2,4,8,16")
    p.add_argument("--seeds", type=int, default=40, help="number of sweep seeds")
    p.add_argument("--report", help="write the sweep report to this file")
    p.add_argument("--config", help="TOML config file")
    _add_param_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render a saved map as a grayscale image")
    p.add_argument("tensor", help="2-D tensor file (.hvt)")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.add_argument("--scale", type=int, default=8, help="integer upscaling factor")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth" and not args.sweep and not args.scenario:
            parser.error("synth needs a scenario file unless --sweep is given")
        return args.func(args)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateMatrixError, NoSalientRegionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except PipelineError as exc:
        cause = exc.__cause__
        if isinstance(cause, (DegenerateMatrixError, NoSalientRegionError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DEGENERATE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (HavcError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
