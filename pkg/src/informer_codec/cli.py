"""Command-line entry point: ``informer-codec <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import coder, data, profiler
from .train import TrainConfig, evaluate, load_model, train

log = logging.getLogger("informer_codec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    ckpt = train(config)
    if not config.checkpoint:
        log.warning("no checkpoint path configured; trained weights were not saved")
    print(f"trained {ckpt.step} steps, final loss {ckpt.history[-1]:.4f}" if ckpt.history
          else f"nothing to do at step {ckpt.step}")
    return 0


def _cmd_encode(args) -> int:
    model = load_model(args.model)
    img = coder.read_ppm(args.input)
    b = coder.encode_image(img, model)
    blob = coder.serialize(b)
    Path(args.output).write_bytes(blob)
    h, w = img.shape[:2]
    print(f"{args.output}: {len(blob)} bytes, {8 * len(blob) / (h * w):.4f} bpp")
    return 0


def _cmd_decode(args) -> int:
    model = load_model(args.model)
    img = coder.decode_image(Path(args.input).read_bytes(), model)
    coder.write_ppm(args.output, img)
    print(f"{args.output}: {img.shape[1]}x{img.shape[0]}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(load_model(args.model), args.dir)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def _cmd_profile(args) -> int:
    try:
        resolutions = profiler.parse_resolutions(args.resolutions)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = TrainConfig.from_file(args.config).model_config()
    report = profiler.profile(config, resolutions)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    else:
        sys.stdout.write(report.to_csv())
    print(report.summary())
    return 0


def _cmd_gen_data(args) -> int:
    spec_text = args.spec
    if Path(spec_text).is_file():
        spec_text = Path(spec_text).read_text()
    d = json.loads(spec_text)
    if not isinstance(d, dict):
        raise ValueError("dataset spec must be a JSON object")
    spec = data.SyntheticDatasetSpec.from_dict(d)
    paths = data.write_dataset(data.generate(spec), args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="informer-codec", description="Learned image codec with global and local hyperpriors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode", help="compress a P6 PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream to a P6 PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="rate and PSNR over a directory of PPM images")
    p.add_argument("--model", required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--csv", help="also write per-image metrics to this CSV file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("profile", help="analytic entropy-model FLOPs per resolution")
    p.add_argument("--config", required=True)
    p.add_argument("--resolutions", required=True, help="comma-separated WxH list")
    p.add_argument("--csv", help="write the CSV here instead of standard output")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as PPM files")
    p.add_argument("--spec", required=True, help="JSON object or path to a JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"informer-codec: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, OverflowError, json.JSONDecodeError) as exc:
        print(f"informer-codec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
