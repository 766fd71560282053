"""Command-line interface.

Subcommands: gen, composite, infer, train-coarse, train-refine, eval, gradcheck.
Exit codes: 0 success, 1 domain failure, 2 usage error. Failures print one
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, synth
from .errors import CtomError, DataError, FormatError, UsageError
from .matte import composite
from .network import CoarseNetParams, RefineNetParams, init_coarse, init_refine
from .trainer import (
    TrainConfig,
    evaluate_split,
    load_dataset,
    predict_mattes,
    train_coarse,
    train_refine,
)

log = logging.getLogger("ctom")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        raise SystemExit(2)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like 64x64") from None
    return w, h


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError("file not found", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError("invalid JSON", path=str(path), reason=str(exc)) from None


def load_coarse(path) -> CoarseNetParams:
    header, tensors = io.read_checkpoint(path)
    if header.get("stage") != "coarse":
        raise FormatError("not a coarse checkpoint", path=str(path), stage=header.get("stage"))
    params = init_coarse(int(header.get("seed", 0)), **header["config"])
    params.load_state_dict(tensors)
    return params


def load_refine(path) -> RefineNetParams:
    header, tensors = io.read_checkpoint(path)
    if header.get("stage") != "refine":
        raise FormatError("not a refine checkpoint", path=str(path), stage=header.get("stage"))
    params = init_refine(int(header.get("seed", 0)), **header["config"])
    params.load_state_dict(tensors)
    return params


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    width, height = args.size
    if args.counts:
        counts = _load_json(args.counts)
    elif args.count_per_group is not None:
        counts = {args.split: {g: args.count_per_group for g in synth.ALL_GROUPS}}
    else:
        raise UsageError("gen needs --count-per-group or --counts")
    bg_dir = args.bg_dir
    if bg_dir is None:
        if not args.procedural_bg:
            raise UsageError("gen needs --bg-dir or --procedural-bg N")
        bg_dir = Path(args.out) / "backgrounds"
        synth.write_procedural_backgrounds(bg_dir, args.procedural_bg, width, height, args.seed)
    records = synth.generate_dataset(counts, bg_dir, args.out, args.seed, width, height, args.swap_flow_axes)
    print(json.dumps({"samples": len(records), "manifest": str(Path(args.out) / "manifest.jsonl")}))
    return 0


def cmd_composite(args) -> int:
    matte = io.read_matte(args.matte)
    bg_path = args.new_bg or args.bg
    if bg_path is None:
        raise UsageError("composite needs --bg or --new-bg")
    background = io.read_image(bg_path)
    io.write_image(args.out, composite(matte, background, binarize=args.binarize))
    return 0


def cmd_infer(args) -> int:
    coarse = load_coarse(args.coarse)
    refine = load_refine(args.refine) if args.refine else None
    img = io.read_image(args.image).transpose(2, 0, 1)[None].astype(np.float32)
    matte = predict_mattes(coarse, refine, img)[0]
    io.write_matte(args.out_matte, matte)
    return 0


def _train_config(path, stage: str) -> TrainConfig:
    cfg = _load_json(path) if path else {}
    cfg["stage"] = stage
    return TrainConfig.from_dict(cfg)


def cmd_train_coarse(args) -> int:
    cfg = _train_config(args.config, "coarse")
    data = load_dataset(args.manifest, cfg.split)
    eval_data = load_dataset(args.manifest, cfg.eval_split) if cfg.eval_split else None
    _, report = train_coarse(cfg, data, checkpoint_dir=args.out_dir, eval_data=eval_data)
    _write_json(Path(args.out_dir) / "coarse_report.json", report.to_dict())
    _write_json(Path(args.out_dir) / "coarse_timing.json", {"wall_time": report.wall_time})
    return 0


def cmd_train_refine(args) -> int:
    cfg = _train_config(args.config, "refine")
    data = load_dataset(args.manifest, cfg.split)
    coarse = load_coarse(args.coarse)
    _, report = train_refine(cfg, data, coarse, checkpoint_dir=args.out_dir)
    _write_json(Path(args.out_dir) / "refine_report.json", report.to_dict())
    _write_json(Path(args.out_dir) / "refine_timing.json", {"wall_time": report.wall_time})
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.manifest, args.split)
    if args.gt_as_prediction:
        preds = [data.gt_matte(i) for i in range(len(data))]
        report = evaluate_split(None, None, data, predictions=preds)
    else:
        if not args.coarse:
            raise UsageError("eval needs --coarse or --gt-as-prediction")
        coarse = load_coarse(args.coarse)
        refine = load_refine(args.refine) if args.refine else None
        report = evaluate_split(coarse, refine, data)
    _write_json(args.report, report)
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run_suite(args.seeds, network=not args.no_network)
    summary = gradcheck.summarize(results)
    ok = all(r.passed for r in results)
    print(json.dumps({"passed": ok, "checks": summary}, indent=2, sort_keys=True))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ctom", description="Colored transparent object matting toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--count-per-group", type=int)
    p.add_argument("--counts", help="JSON file: {split: {group: count}}")
    p.add_argument("--split", default="train")
    p.add_argument("--bg-dir")
    p.add_argument("--procedural-bg", type=int, default=0, help="write N procedural backgrounds and use them")
    p.add_argument("--swap-flow-axes", action="store_true", help="store ground-truth flow in (row, column) order")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("composite", help="render a matte over a background")
    p.add_argument("--matte", required=True)
    p.add_argument("--bg")
    p.add_argument("--new-bg")
    p.add_argument("--out", required=True)
    p.add_argument("--binarize", action="store_true")
    p.set_defaults(fn=cmd_composite)

    p = sub.add_parser("infer", help="predict a matte for one image")
    p.add_argument("--coarse", required=True)
    p.add_argument("--refine")
    p.add_argument("--image", required=True)
    p.add_argument("--out-matte", required=True)
    p.set_defaults(fn=cmd_infer)

    for name, fn in (("train-coarse", cmd_train_coarse), ("train-refine", cmd_train_refine)):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out-dir", required=True)
        if name == "train-refine":
            p.add_argument("--coarse", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="per-group metrics plus the background baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--coarse")
    p.add_argument("--refine")
    p.add_argument("--gt-as-prediction", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--no-network", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CtomError as exc:
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
