"""Command-line entry point: ``edgegan3d <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config, save_config

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shape(text):
    try:
        parts = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like DxHxW, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"shape must be three positive sizes DxHxW, got {text!r}")
    return parts


def cmd_synth(args):
    from .engine import synthesize_dataset, write_dataset

    cases = synthesize_dataset(args.n, args.shape, args.seed, speckle=args.speckle, contrast=args.contrast)
    write_dataset(cases, args.out)
    print(f"wrote {len(cases)} phantoms to {args.out}")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace(epochs=args.epochs)
    return cfg


def cmd_train(args):
    from .engine import Trainer, prepare_sample, read_dataset, split_cases

    cfg = _config(args)
    cases = read_dataset(args.data)
    tr, va = split_cases(cases, cfg.val_fraction)
    train_s = [prepare_sample(v, m, cfg.input_shape, cid) for cid, v, m in tr]
    val_s = [prepare_sample(v, m, cfg.input_shape, cid) for cid, v, m in va]
    if args.resume:
        trainer = Trainer.load(args.resume, epochs=cfg.epochs)
    else:
        trainer = Trainer(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(trainer.config, out / "config.toml")
    trainer.fit(train_s, val_s, out)
    best = trainer.best_row()
    if best:
        print(f"best epoch {best['epoch']}: dice {best['dice']:.4f} hd {best['hd']:.2f}")
    print(f"checkpoints in {out}")


def cmd_eval(args):
    from .engine import Trainer, predict_volume, read_dataset, safe_report
    from .metrics import binarize, summarize, write_report_csv

    trainer = Trainer.load(args.checkpoint)
    reports = []
    for cid, vol, mask in read_dataset(args.data):
        prob = predict_volume(trainer, vol)
        reports.append(safe_report(binarize(prob), mask.values, mask.spacing, cid))
    write_report_csv(args.report, reports)
    s = summarize(reports)
    print(f"{len(reports)} cases: dice {s['dice']:.4f} jaccard {s['jaccard']:.4f} hd {s['hd']:.2f} "
          f"precision {s['precision']:.4f} recall {s['recall']:.4f}")


def cmd_predict(args):
    from .data import SegMask, load_volume, save_mask
    from .engine import Trainer, predict_volume
    from .metrics import binarize

    trainer = Trainer.load(args.checkpoint)
    vol = load_volume(args.input)
    want_edge = args.edge_output is not None
    out = predict_volume(trainer, vol, with_edge=want_edge)
    seg, edge = out if want_edge else (out, None)
    save_mask(args.output, SegMask(binarize(seg), vol.spacing))
    if want_edge:
        if edge is None:
            raise UsageError("model was trained without the edge branch; --edge-output unavailable")
        save_mask(args.edge_output, SegMask(binarize(edge), vol.spacing))
    print(f"wrote {args.output}")


def cmd_edges(args):
    from .data import extract_edge_map, load_mask, save_mask

    edge = extract_edge_map(load_mask(args.mask), mode=args.mode)
    save_mask(args.out, edge)
    print(f"{int(edge.values.sum())} edge voxels written to {args.out}")


def cmd_ablate(args):
    from .engine import read_dataset, run_ablation, synthesize_dataset

    cfg = _config(args)
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    if not toggles:
        raise UsageError("--toggles needs at least one toggle set")
    cases = read_dataset(args.data) if args.data else synthesize_dataset(args.n, cfg.input_shape, cfg.seed)
    rows = run_ablation(cfg, cases, toggles, args.out)
    print(f"{'name':10s} {'dice':>7s} {'jaccard':>7s} {'hd':>7s} {'prec':>7s} {'recall':>7s} {'params':>10s}")
    for r in rows:
        print(f"{r['name']:10s} {r['dice']:7.4f} {r['jaccard']:7.4f} {r['hd']:7.2f} {r['precision']:7.4f} "
              f"{r['recall']:7.4f} {r['params']:10d}")


def cmd_dump_features(args):
    import torch

    from .data import dump_slices, load_volume, normalize, resample
    from .engine import Trainer

    trainer = Trainer.load(args.checkpoint)
    vol = load_volume(args.input)
    shape = trainer.config.input_shape
    if vol.shape != tuple(shape):
        vol = resample(vol, shape)
    x = torch.from_numpy(normalize(vol).values)[None, None]
    trainer.generator.eval()
    with torch.no_grad():
        stages = trainer.generator.stages(x)
    fmap = stages.get(args.stage)
    if fmap is None:
        names = ", ".join(k for k, v in stages.items() if v is not None)
        raise UsageError(f"unknown stage {args.stage!r}; available: {names}")
    if not 0 <= args.channel < fmap.shape[1]:
        raise UsageError(f"stage {args.stage} has {fmap.shape[1]} channels, got --channel {args.channel}")
    paths = dump_slices(np.asarray(fmap[0, args.channel]), args.out, prefix=f"{args.stage}_c{args.channel}")
    print(f"wrote {len(paths)} slices to {args.out}")


def build_parser():
    p = _Parser(prog="edgegan3d", description="Edge-aware adversarial 3D segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic ultrasound phantoms")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--shape", type=_shape, default=(32, 48, 48))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speckle", type=float, default=1.5)
    s.add_argument("--contrast", type=float, default=0.35)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="adversarial training with validation")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--edge-output")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("edges", help="ground-truth edge map of a mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("boundary", "canny"), default="boundary")
    s.set_defaults(func=cmd_edges)

    s = sub.add_parser("ablate", help="component and channel-width ablations")
    s.add_argument("--config")
    s.add_argument("--toggles", required=True, help="comma list of full,no_dcm,no_scam,no_eem,ch8,ch16,ch32")
    s.add_argument("--data")
    s.add_argument("--n", type=int, default=20, help="phantoms to synthesize when --data is absent")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-features", help="write PGM slices of one feature-map channel")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--stage", required=True, help="e.g. e1, sq1, scam1, f0, edge_features, seg")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"edgegan3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"edgegan3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
