"""Command-line entry for the capture harness.

Three subcommands: fabricate a demo input set, run the reading
diagnostic over an item list, and export one inference record.  Outputs
are machine-readable JSON on stdout; errors go to stderr with exit code
1 for usage problems and 2 for data or capture failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from havc import HavcError, load_inference
from havc.pixmap import read_pixmap, write_pixmap

from .adapters import get_adapter, registered_models
from .demo import make_demo_items
from .errors import ExporterError, UnsupportedModelError
from .export import (
    DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_PROMPT,
    DEFAULT_QUESTION,
    DiagnosticItem,
    export_diagnostic,
    export_inference,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_items(path: Path) -> tuple[str, list[DiagnosticItem]]:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ExporterError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ExporterError(f"{path}: expected an object with an 'items' list")
    prompt = doc.get("prompt", DEFAULT_PROMPT)
    items = []
    for i, entry in enumerate(doc["items"]):
        try:
            image = read_pixmap(path.parent / entry["image"])
            box = tuple(int(v) for v in entry["box"])
            word = str(entry["word"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ExporterError(f"{path}: item {i} is malformed: {exc}") from exc
        if len(box) != 4:
            raise ExporterError(f"{path}: item {i} box must have 4 edges")
        items.append(DiagnosticItem(image=image, word=word, box=box))
    if not items:
        raise ExporterError(f"{path}: item list is empty")
    return prompt, items


def cmd_demo(args) -> int:
    adapter = get_adapter(args.model)
    items = make_demo_items(
        adapter,
        args.images,
        seed=args.seed,
        max_new_tokens=args.max_new_tokens,
        unmatched_every=args.unmatched_every,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, item in enumerate(items):
        image_name = f"img_{i:03d}.pgm"
        write_pixmap(out / image_name, item.image)
        entries.append(
            {"image": image_name, "word": item.word, "box": list(item.box)}
        )
    items_path = out / "items.json"
    items_path.write_text(
        json.dumps({"prompt": DEFAULT_PROMPT, "items": entries}, indent=2) + "\n"
    )
    _emit({"items": str(items_path), "images": len(entries)})
    return EXIT_OK


def cmd_diagnostic(args) -> int:
    adapter = get_adapter(args.model)
    prompt, items = _load_items(Path(args.items))
    summary = export_diagnostic(
        adapter,
        items,
        args.out,
        prompt=prompt,
        max_new_tokens=args.max_new_tokens,
        name=args.name,
    )
    _emit(
        {
            "manifest": str(summary.manifest),
            "records": summary.n_records,
            "skipped": summary.n_skipped,
            "skip_reasons": dict(summary.skip_reasons),
        }
    )
    return EXIT_OK


def cmd_inference(args) -> int:
    adapter = get_adapter(args.model)
    image = read_pixmap(Path(args.image))
    manifest = export_inference(
        adapter,
        image,
        args.question,
        args.experts,
        args.out,
        with_grad=not args.no_grad,
        token_step=args.token_step,
        name=args.name,
    )
    record = load_inference(manifest)
    _emit(
        {
            "manifest": str(manifest),
            "predicted_token": record.predicted_token,
            "log_prob": record.log_prob,
            "has_grad": record.grad is not None,
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="havc-export",
        description="Capture model attention and write corpora and records.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model(p):
        p.add_argument(
            "--model",
            default="tiny",
            help=f"model id (registered: {', '.join(registered_models())})",
        )

    demo = sub.add_parser("demo", help="fabricate a labelled demo input set")
    add_model(demo)
    demo.add_argument("--out", required=True, help="output directory")
    demo.add_argument("--images", type=int, default=20)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--max-new-tokens", type=int, default=DEFAULT_MAX_NEW_TOKENS)
    demo.add_argument(
        "--unmatched-every",
        type=int,
        default=5,
        help="label every n-th image with a word the model does not emit",
    )
    demo.set_defaults(func=cmd_demo)

    diag = sub.add_parser("diagnostic", help="export a diagnostic corpus")
    add_model(diag)
    diag.add_argument("--items", required=True, help="items.json input list")
    diag.add_argument("--out", required=True, help="output directory")
    diag.add_argument("--max-new-tokens", type=int, default=DEFAULT_MAX_NEW_TOKENS)
    diag.add_argument("--name", default="corpus", help="manifest base name")
    diag.set_defaults(func=cmd_diagnostic)

    inf = sub.add_parser("inference", help="export one inference record")
    add_model(inf)
    inf.add_argument("--image", required=True, help="input pixmap")
    inf.add_argument("--experts", required=True, help="expert head JSON file")
    inf.add_argument("--out", required=True, help="output directory")
    inf.add_argument("--question", default=DEFAULT_QUESTION)
    inf.add_argument("--no-grad", action="store_true", help="skip gradient capture")
    inf.add_argument(
        "--token-step",
        type=int,
        default=0,
        help="capture at the n-th generated token instead of the first",
    )
    inf.add_argument("--name", default="record", help="manifest base name")
    inf.set_defaults(func=cmd_inference)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UnsupportedModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ExporterError, HavcError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
