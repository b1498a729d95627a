"""Command-line entry point: ``mosformer {train,eval,predict,gen-phantoms,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from .ablation import AXES, run_ablation
from .config import RunConfig
from .data import PhantomSpec, generate_phantoms, load_cases, parse_phantom_spec, read_volume, write_volume
from .exceptions import MosformerError
from .gradsuite import format_report, run_suite
from .training import evaluate, load_model, predict_case, train

logger = logging.getLogger("mosformer")


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="key-value config file layered on top of the preset")
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)


def resolve_config(args) -> RunConfig:
    text = args.config.read_text(encoding="utf-8") if getattr(args, "config", None) else ""
    cfg = config_mod.from_text(text, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=str(args.out)))
    if getattr(args, "data", None):
        cfg = replace(cfg, paths=replace(cfg.paths, data=str(args.data)))
    return cfg


def _manifest(cfg: RunConfig) -> Path:
    if not cfg.paths.data:
        raise MosformerError("no dataset: pass --data or set paths.data in the config")
    return Path(cfg.paths.data)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cases = load_cases(_manifest(cfg), "train")
    out = Path(cfg.paths.out)
    result = train(cfg, cases, out)
    (out / "config.txt").write_text(config_mod.to_text(cfg), encoding="utf-8")
    losses = result.epoch_losses()
    print(f"trained {len(losses)} epochs; loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint {out / 'checkpoint.mosf'}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    manifest = args.data or _manifest(cfg)
    cases = load_cases(manifest, None if args.split == "all" else args.split)
    report = evaluate(model, cfg, cases)
    text = report.to_csv()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    model, cfg = load_model(args.checkpoint)
    vol = read_volume(args.input)
    pred = predict_case(model, cfg, vol.data.astype(np.dtype(cfg.train.dtype)))
    out = args.out or args.input.with_name(args.input.stem + "_pred.mvol")
    write_volume(out, pred.astype(np.uint8), vol.spacing, n_classes=cfg.model.n_classes)
    print(f"wrote {out}")
    return 0


def cmd_gen_phantoms(args) -> int:
    spec = parse_phantom_spec(args.spec.read_text(encoding="utf-8")) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest = generate_phantoms(spec, args.out or Path("phantoms"))
    print(f"wrote {spec.count} cases; manifest {manifest}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.dtype, seed=args.seed or 0, units=args.units or None)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = args.seeds or [cfg.train.seed]
    out = Path(cfg.paths.out) if args.out is None else args.out
    table = run_ablation(cfg, args.axis, _manifest(cfg), seeds, out, values=args.values)
    print(table.to_csv(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mosformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset manifest CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, print the metric CSV")
    _add_common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="test", help="manifest split to score, or 'all'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one volume file")
    _add_common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("input", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gen-phantoms", help="write a synthetic ellipsoid dataset")
    _add_common(p, config=False)
    p.add_argument("--spec", type=Path, help="phantom spec file (defaults: 25 cases, 64×64×24)")
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable unit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--units", nargs="*")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate variants along one axis")
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset manifest CSV")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--values", nargs="*", help="subset of the axis values to run")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (MosformerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
