"""Command-line front end: scenes, training data, calibration, campaigns, reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .calibration import DEFAULT_LEVELS, MIN_SAMPLES, EccentricityBins, TrainingSet, train
from .harness import CampaignConfig, ConfigError, TrialError, run_campaign, summarize, trial_rng
from .semantic_map import GridGeometry
from .simworld import EmulatorConfig, generate_scene, generate_training_records

EXIT_OK, EXIT_CONFIG, EXIT_TRIAL = 0, 1, 2


def _canvas(text: str) -> tuple[float, float]:
    try:
        w, h = (float(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"canvas must look like WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("canvas dimensions must be positive")
    return w, h


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _emulator(path: str | None, num_classes: int | None = None) -> EmulatorConfig:
    if path is None:
        return EmulatorConfig() if num_classes is None else EmulatorConfig(num_classes=num_classes)
    return EmulatorConfig.load(path)


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = trial_rng(args.seed, 0)
    names = []
    for i in range(args.count):
        scene = generate_scene(args.classes, args.canvas, rng)
        name = f"scene_{i:04d}"
        scene.save(out / f"{name}.json")
        names.append(name)
    manifest = {"count": args.count, "classes": args.classes, "canvas": list(args.canvas), "seed": args.seed, "scenes": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_gen_train(args) -> int:
    config = _emulator(args.emulator, args.classes)
    geometry = GridGeometry(*args.canvas) if args.natural else None
    records = generate_training_records(config, args.count, trial_rng(args.seed, 9), not args.natural, geometry)
    records.write_jsonl(args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_fit_calib(args) -> int:
    if args.records:
        data = TrainingSet.read_jsonl(args.records)
        if len(data) == 0:
            raise ConfigError(f"{args.records}: no training records")
        num_classes = data.scores.shape[1] - 1
        bins = EccentricityBins.uniform(args.bins)
    else:
        config = _emulator(args.emulator, args.classes)
        if args.bins != config.bins.n_levels:
            raise ConfigError(f"--bins {args.bins} does not match the emulator's {config.bins.n_levels} levels")
        data = generate_training_records(config, args.emulate, trial_rng(args.seed, 9))
        num_classes, bins = config.num_classes, config.bins
    model = train(data, num_classes, bins, args.min_samples)
    model.save(args.out)
    print(model.report())
    print(f"wrote calibration model to {args.out}")
    return EXIT_OK


def _cmd_campaign(kind: str):
    def run(args) -> int:
        cfg = CampaignConfig.load(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config describes a {cfg.kind} campaign, not {kind}")
        if args.seed is not None:
            cfg.seed = args.seed
        results = run_campaign(cfg, jobs=args.jobs, out_dir=args.out)
        for name, res in results.items():
            print(f"{name}: final {res.mean[-1]:.4f} +- {res.sem[-1]:.4f}, {1e3 * res.time_per_iteration:.3f} ms/iter")
        return EXIT_OK

    return run


def cmd_report(args) -> int:
    rows = summarize(args.input)
    if not rows:
        raise ConfigError(f"no result CSVs in {args.input}")
    fields = list(dict.fromkeys(k for r in rows for k in r))
    if args.format == "csv":
        w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        print(json.dumps(rows, indent=2))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors, so they share exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semfov", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic benchmark scenes")
    p.add_argument("--count", type=_nonneg, required=True)
    p.add_argument("--classes", type=_positive, default=5)
    p.add_argument("--canvas", type=_canvas, default=(640.0, 480.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-train", help="generate emulator training records (JSONL)")
    p.add_argument("--count", type=_positive, required=True)
    p.add_argument("--classes", type=_positive, default=None)
    p.add_argument("--emulator", help="emulator config JSON (default emulator otherwise)")
    p.add_argument("--natural", action="store_true", help="sample fixations geometrically instead of stratifying")
    p.add_argument("--canvas", type=_canvas, default=(640.0, 480.0), help="canvas for --natural sampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("fit-calib", help="fit the foveal calibration model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--records", help="training records JSONL")
    src.add_argument("--emulate", type=_positive, metavar="N", help="train on N emulator records")
    p.add_argument("--bins", type=_positive, default=DEFAULT_LEVELS)
    p.add_argument("--classes", type=_positive, default=None)
    p.add_argument("--emulator", help="emulator config JSON for --emulate")
    p.add_argument("--min-samples", type=_positive, default=MIN_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_calib)

    for kind in ("search", "explore"):
        p = sub.add_parser(f"run-{kind}", help=f"run a {kind} campaign")
        p.add_argument("--config", required=True)
        p.add_argument("--jobs", type=_positive, default=1)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True)
        p.set_defaults(func=_cmd_campaign(kind))

    p = sub.add_parser("report", help="summarize campaign CSVs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrialError as exc:
        print(f"trial error: {exc}", file=sys.stderr)
        return EXIT_TRIAL
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
