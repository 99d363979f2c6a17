"""Batch command-line interface.

Exit codes: 0 success, 2 invalid flags or config, 3 data error (missing or
malformed files, pre-classification found nothing to learn from), 4 numerical
failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import kvdoc
from .crf import CrfConfig, grid_search_fit, load_crf_config, refine, save_crf_config
from .metrics import evaluate
from .networks import DSMSFCN, build_network, load_network_config, save_network_config
from .pipelines import (
    SupervisedRunConfig,
    UnsupervisedRunConfig,
    run_supervised_infer,
    run_supervised_train,
)
from .preclassify import PreclassificationError
from .raster import (
    LabelMask,
    RasterFormatError,
    RasterPair,
    load_mask,
    load_raster,
    read_bras,
    save_map_png,
    save_mask,
    save_raster,
    write_bras,
)
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .tensor_nn import CheckpointError, NumericalError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORMATS = ("band-raster", "png8")
log = logging.getLogger("dsmscd")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------- parser


def _add_pair(p: argparse.ArgumentParser) -> None:
    p.add_argument("--t1", help="first-date image")
    p.add_argument("--t2", help="second-date image")
    p.add_argument("--format", default="band-raster", choices=FORMATS)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value file mirroring the flags")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dsmscd", description="Siamese multi-scale change detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic scene (t1, t2, mask)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--change-frac", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--gain", type=float, default=1.1)
    p.add_argument("--bias", type=float, default=0.2)

    p = sub.add_parser("unsup", parents=[common], help="unsupervised change detection")
    _add_pair(p)
    p.add_argument("--out")
    p.add_argument("--truth", help="optional ground truth; adds a metric block to the report")
    p.add_argument("--patch-size", type=int, default=13)
    p.add_argument("--neg-pos-ratio", type=float, default=4.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=250, help="optimizer step cap; 0 disables")

    p = sub.add_parser("train", parents=[common], help="train DSMS-FCN on labelled pairs")
    p.add_argument("--scene", nargs=3, action="append", metavar=("T1", "T2", "MASK"), help="repeatable")
    p.add_argument("--format", default="band-raster", choices=FORMATS)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--steps-per-epoch", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="apply a trained DSMS-FCN")
    _add_pair(p)
    p.add_argument("--model", help="directory written by train")
    p.add_argument("--out")
    p.add_argument("--crf-config", help="also write a CRF-refined map")

    p = sub.add_parser("refine", parents=[common], help="dense CRF refinement of a probability map")
    _add_pair(p)
    p.add_argument("--prob", help="probability map (BRAS)")
    p.add_argument("--out")
    p.add_argument("--crf-config")
    p.add_argument("--grid", help="grid spec file; fitted on --fit scenes")
    p.add_argument("--fit", nargs=4, action="append", metavar=("T1", "T2", "PROB", "TRUTH"))

    p = sub.add_parser("eval", parents=[common], help="print the metric block")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--format", default="band-raster", choices=FORMATS)

    p = sub.add_parser("ingest-acd", parents=[common], help="convert an ACD directory to BRAS scenes")
    p.add_argument("--root")
    p.add_argument("--out")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse, then re-parse with config-file values as defaults so explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = kvdoc.load(path)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r} for '{args.command}'")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ validation


def _need(args, *names: str) -> None:
    for n in names:
        if getattr(args, n) in (None, []):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _existing(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _positive(args, *names: str) -> None:
    for n in names:
        if getattr(args, n) <= 0:
            raise UsageError(f"--{n.replace('_', '-')} must be positive")


def validate(args) -> dict:
    """Check every flag and input path, returning the prepared configs; no side effects."""
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    c = args.command
    prepared: dict = {}
    try:
        if c == "synth":
            _need(args, "out")
            if not 0.0 < args.change_frac < 0.5:
                raise UsageError(f"--change-frac must be in (0, 0.5), got {args.change_frac}")
            _positive(args, "size", "bands")
            prepared["spec"] = SyntheticSceneSpec(
                height=args.size, width=args.size, bands=args.bands, change_frac=args.change_frac,
                noise_std=args.noise, gain=args.gain, bias=args.bias, seed=args.seed,
                size_range=(max(1, round(10 * args.size / 128)), max(1, round(28 * args.size / 128))),
            )
        elif c == "unsup":
            _need(args, "t1", "t2", "out")
            if args.patch_size % 2 == 0:
                raise UsageError(f"--patch-size must be odd, got {args.patch_size}")
            _positive(args, "neg_pos_ratio", "epochs", "batch_size", "lr")
            if args.max_steps < 0:
                raise UsageError("--max-steps must be >= 0")
            prepared["cfg"] = UnsupervisedRunConfig(
                patch_size=args.patch_size, ratio=args.neg_pos_ratio, epochs=args.epochs,
                batch_size=args.batch_size, lr=args.lr, max_steps=args.max_steps or None, seed=args.seed,
            )
            _existing(args.t1, args.t2, *([args.truth] if args.truth else []))
        elif c == "train":
            _need(args, "scene", "out")
            _positive(args, "epochs", "steps_per_epoch", "batch_size", "lr")
            if args.tile < 16 or args.tile % 16:
                raise UsageError(f"--tile must be a positive multiple of 16, got {args.tile}")
            prepared["cfg"] = SupervisedRunConfig(
                lr=args.lr, epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
                batch_size=args.batch_size, tile=args.tile, augment=not args.no_augment, seed=args.seed,
            )
            _existing(*[p for triple in args.scene for p in triple])
        elif c == "infer":
            _need(args, "t1", "t2", "model", "out")
            model = Path(args.model)
            _existing(args.t1, args.t2, model / "model.ckpt", model / "model.cfg")
            if args.crf_config:
                _existing(args.crf_config)
                prepared["crf"] = load_crf_config(args.crf_config)
        elif c == "refine":
            _need(args, "t1", "t2", "prob", "out")
            if bool(args.crf_config) == bool(args.grid):
                raise UsageError("give exactly one of --crf-config or --grid")
            if args.grid and not args.fit:
                raise UsageError("--grid needs at least one --fit T1 T2 PROB TRUTH scene")
            _existing(args.t1, args.t2, args.prob)
            if args.crf_config:
                _existing(args.crf_config)
                prepared["crf"] = load_crf_config(args.crf_config)
            else:
                _existing(args.grid, *[p for quad in args.fit for p in quad])
                grid = kvdoc.load(args.grid)
                bad = set(grid) - {"w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma"}
                if bad:
                    raise UsageError(f"unknown grid keys: {sorted(bad)}")
                prepared["grid"] = {k: [float(x) for x in (v if isinstance(v, list) else [v])] for k, v in grid.items()}
        elif c == "eval":
            _need(args, "pred", "truth")
            _existing(args.pred, args.truth)
        elif c == "ingest-acd":
            _need(args, "root", "out")
            if not Path(args.root).is_dir():
                raise FileNotFoundError(f"no such directory: {args.root}")
    except (ValueError, TypeError) as exc:
        if isinstance(exc, (RasterFormatError, CheckpointError)):
            raise
        raise UsageError(str(exc)) from exc
    return prepared


# -------------------------------------------------------------------- commands


def _load_pair(args) -> RasterPair:
    return RasterPair(load_raster(args.t1, args.format), load_raster(args.t2, args.format))


def _write_map(out: Path, stem: str, labels: np.ndarray) -> None:
    write_bras(out / f"{stem}.bras", labels[None].astype(np.float32))
    save_map_png(out / f"{stem}.png", labels)


def _report_text(doc: dict, metrics=None) -> str:
    text = kvdoc.dumps(doc)
    if metrics is not None:
        text += metrics.block() + "\n"
    return text


def cmd_synth(args, prep) -> None:
    pair, mask = generate_synthetic(prep["spec"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(out / "t1.bras", pair.t1)
    save_raster(out / "t2.bras", pair.t2)
    save_mask(out / "mask.bras", mask)
    print(f"wrote {out}/t1.bras t2.bras mask.bras ({pair.bands}x{pair.height}x{pair.width})")


def cmd_unsup(args, prep) -> None:
    from .pipelines import run_unsupervised

    pair = _load_pair(args)
    truth = load_mask(args.truth, args.format) if args.truth else None
    res = run_unsupervised(pair, prep["cfg"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_map(out, "change_map", res.change_map)
    write_bras(out / "probability.bras", res.probability[None])
    metrics = evaluate(res.change_map, truth.labels) if truth is not None else None
    (out / "report.txt").write_text(_report_text({"command": "unsup", "seed": args.seed, **res.report}, metrics))
    if metrics is not None:
        print(metrics.block())


def cmd_train(args, prep) -> None:
    dataset = []
    for t1, t2, m in args.scene:
        dataset.append((RasterPair(load_raster(t1, args.format), load_raster(t2, args.format)), load_mask(m, args.format)))
    model = run_supervised_train(dataset, prep["cfg"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model.network)
    save_network_config(out / "model.cfg", "dsmsfcn", model.config)
    (out / "trace.txt").write_text(_report_text({"command": "train", "seed": args.seed, **model.report}))
    print(f"wrote {out}/model.ckpt model.cfg trace.txt")


def load_model(model_dir: str | Path) -> DSMSFCN:
    kind, cfg = load_network_config(Path(model_dir) / "model.cfg")
    if kind != "dsmsfcn":
        raise CheckpointError(f"{model_dir}: expected a dsmsfcn model, found {kind}")
    net = build_network(kind, cfg, seed=0)
    load_checkpoint(Path(model_dir) / "model.ckpt", net)
    net.eval()
    return net


def cmd_infer(args, prep) -> None:
    pair = _load_pair(args)
    net = load_model(args.model)
    if net.cfg.bands != pair.bands:
        raise CheckpointError(f"model expects {net.cfg.bands} bands, images have {pair.bands}")
    prob, change, refined = run_supervised_infer(pair, net, prep.get("crf"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bras(out / "probability.bras", prob[None])
    _write_map(out, "change_map", change)
    if refined is not None:
        _write_map(out, "refined_map", refined)
    print(f"wrote {out}/probability.bras change_map.bras" + (" refined_map.bras" if refined is not None else ""))


def _load_prob(path, shape) -> np.ndarray:
    v = read_bras(path)
    if v.shape[0] != 1 or v.shape[1:] != shape:
        raise RasterFormatError(f"{path}: expected a 1x{shape[0]}x{shape[1]} probability map, got {v.shape}")
    return v[0].astype(np.float64)


def cmd_refine(args, prep) -> None:
    pair = _load_pair(args)
    prob = _load_prob(args.prob, (pair.height, pair.width))
    cfg = prep.get("crf")
    out = Path(args.out)
    if cfg is None:
        scenes = []
        for t1, t2, p, t in args.fit:
            fp = RasterPair(load_raster(t1, args.format), load_raster(t2, args.format))
            scenes.append((fp, _load_prob(p, (fp.height, fp.width)), load_mask(t, args.format).labels))
        fit = grid_search_fit(scenes, prep["grid"])
        cfg = fit.best
        print(f"grid search: best pooled f1={fit.best_f1:.4f}")
    refined, _ = refine(prob, pair, cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_map(out, "refined_map", refined)
    save_crf_config(out / "crf.cfg", cfg)
    print(f"wrote {out}/refined_map.bras crf.cfg")


def cmd_eval(args, prep) -> None:
    truth = load_mask(args.truth, args.format)
    pred = load_mask(args.pred, args.format)
    print(evaluate(pred.labels, truth.labels).block())


def cmd_ingest_acd(args, prep) -> None:
    from .acd import ingest_acd

    datasets = ingest_acd(args.root)
    out = Path(args.out)
    index = {}
    for name, ds in datasets.items():
        for i, scene in enumerate(ds.scenes):
            d = out / name / f"{scene.name.split('/')[1]}_{scene.split}"
            d.mkdir(parents=True, exist_ok=True)
            save_raster(d / "t1.bras", scene.pair.t1)
            save_raster(d / "t2.bras", scene.pair.t2)
            save_mask(d / "mask.bras", scene.mask)
            index[f"{name}.{i}"] = f"{d.relative_to(out)} {scene.split}"
    kvdoc.dump(out / "index.txt", index)
    print(f"wrote {len(index)} scenes under {out}")


COMMANDS = {
    "synth": cmd_synth,
    "unsup": cmd_unsup,
    "train": cmd_train,
    "infer": cmd_infer,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ingest-acd": cmd_ingest_acd,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        prep = validate(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, RasterFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args, prep)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PreclassificationError, FileNotFoundError, RasterFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # shape or band mismatches between the supplied files
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
