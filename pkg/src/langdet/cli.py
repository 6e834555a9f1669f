"""Command line entry point: ``langdet <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import RunConfig, parse_ablation
from .synth import generate_split, write_split
from .train import TrainingDiverged, prepare_bank, train

logger = logging.getLogger("langdet")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "ablation", None):
        changes.update(parse_ablation(args.ablation))
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    try:
        result = train(cfg, cfg.out_dir)
    except TrainingDiverged as exc:
        logger.error("%s; last good checkpoint kept in %s", exc, cfg.out_dir)
        return 2
    print(f"initial AP {result.initial_ap:.4f} -> final AP {result.final_ap:.4f} ({cfg.out_dir})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = harness.run_ablation(cfg, seeds, cfg.out_dir)
    print(harness.format_table(result))
    failed = 0
    for name, ok, detail in harness.ablation_checks(result):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed and args.strict else 0


def cmd_eval_by_variation(args) -> int:
    rows, _ = harness.eval_by_variation(args.checkpoint, args.manifest)
    path = harness.write_variation(rows, Path(args.out or ".") / "variation.csv")
    for r in rows:
        ap = "n/a" if r["ap"] != r["ap"] else f"{100 * r['ap']:.2f}"
        print(f"{r['subset']:<18} {r['images']:>5} {ap:>7}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_plot_bank(args) -> int:
    from .bank import load_frozen

    cfg = _config(args)
    bank = load_frozen(args.bank) if args.bank else prepare_bank(cfg)
    prefix = Path(args.out or ".") / ("bank_raw" if args.raw else "bank")
    csv_path, svg_path = harness.plot_bank(bank, prefix, with_prompts=not args.raw)
    print(f"wrote {csv_path} and {svg_path}; silhouette {harness.coordinate_silhouette(csv_path):.3f}")
    return 0


def cmd_make_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    dist = {"weather": cfg.weather_distribution} if cfg.weather_distribution else None
    if cfg.style == "visdrone" and dist:
        dist = {"time": cfg.weather_distribution}
    for name, size, seed in (("train", cfg.train_size, cfg.data_seed),
                             ("eval", cfg.eval_size, cfg.data_seed + 1_000_003)):
        samples, manifest = generate_split(size, seed, cfg.style, dist)
        print(f"wrote {write_split(samples, manifest, out / name)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langdet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, ablation=True):
        p.add_argument("--config", help="JSON run config (see README for the schema)")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="model/optimizer seed")
        if ablation:
            p.add_argument("--ablation", help="reasoner=<on|off>,relation=<on|off>")

    p = sub.add_parser("train", help="train one detector")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="four-row component ablation over several seeds")
    common(p, seed=False, ablation=False)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--strict", action="store_true", help="exit 1 when a directional check fails")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-by-variation", help="AP per scene-attribute subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="split manifest (default: the checkpoint's eval split)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_by_variation)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot-bank", help="PCA scatter of the language bank")
    common(p, seed=False, ablation=False)
    p.add_argument("--bank", help="frozen bank JSON (default: build from config)")
    p.add_argument("--raw", action="store_true", help="plot D without categorical prompts")
    p.set_defaults(func=cmd_plot_bank)

    p = sub.add_parser("make-data", help="write train/eval splits as PPM images + manifest")
    common(p, seed=False, ablation=False)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
