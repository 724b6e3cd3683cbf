"""Command line: ``wxrestore {synth|train|eval|restore}``.

Exit codes: 0 success, 1 bad configuration or arguments, 2 missing/unreadable
or unwritable paths, 3 checkpoint problems (corrupt file, config hash mismatch).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from wxrestore import config as cfgmod
from wxrestore.errors import CheckpointError, ConfigError, SpecError

log = logging.getLogger("wxrestore")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CKPT = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path) -> cfgmod.RunConfig:
    try:
        cfg = cfgmod.load(path)
        return cfg.validate()
    except FileNotFoundError:
        raise CommandError(f"config file not found: {path}", EXIT_IO) from None
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"cannot write to {path}: {exc}", EXIT_IO) from None
    return path


def cmd_synth(args) -> int:
    from wxrestore.degrade import specs_from_config, synth_dataset
    from wxrestore.images import write_pairs

    if args.n < 1:
        raise CommandError("n must be ≥ 1", EXIT_CONFIG)
    cfg = _load_config(args.config)
    out = _ensure_dir(Path(args.out))
    seed = args.seed if args.seed is not None else cfg.train.seed
    try:
        specs = specs_from_config(cfg.data)
    except SpecError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    samples = synth_dataset(args.n, specs, cfg.data.size, seed, jitter=cfg.data.jitter)
    try:
        lines = write_pairs(out, samples)
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise CommandError(f"cannot write to {out}: {exc}", EXIT_IO) from None
    print(f"wrote {len(samples)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from wxrestore.images import load_pairs
    from wxrestore.plotting import plot_training_log
    from wxrestore.train import train

    cfg = _load_config(args.config)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    try:
        tcfg.validate()
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    try:
        data = load_pairs(args.data)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_IO) from None
    out = _ensure_dir(Path(args.out))
    log_path = out / "log.txt"
    if args.resume is None and log_path.exists():
        log_path.unlink()
    if args.resume is not None and not Path(args.resume).exists():
        raise CommandError(f"checkpoint not found: {args.resume}", EXIT_IO)
    try:
        _, _ = train(cfg.model, tcfg, data, out_dir=out, resume=args.resume,
                     log_path=log_path, stop_after=args.stop_after)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_CKPT) from None
    if args.plot:
        plot_training_log(log_path.read_text().splitlines(), out / "loss.png")
    print(f"checkpoints and log written to {out}")
    return EXIT_OK


def _open_network(path):
    from wxrestore.train import load_network

    if not Path(path).exists():
        raise CommandError(f"checkpoint not found: {path}", EXIT_IO)
    try:
        net, _ = load_network(path)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_CKPT) from None
    return net.eval()


def cmd_eval(args) -> int:
    from wxrestore.images import load_pairs
    from wxrestore.plotting import plot_eval_report
    from wxrestore.train import evaluate, identity_report

    net = _open_network(args.ckpt)
    try:
        data = load_pairs(args.data)
    except (FileNotFoundError, OSError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_IO) from None
    report = evaluate(net, data)
    print(report.line())
    if args.report:
        out = _ensure_dir(Path(args.report))
        base = identity_report(data)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "psnr", "ssim", "input_psnr", "input_ssim"])
            for i, ((p, s), (bp, bs)) in enumerate(zip(report.per_sample, base.per_sample)):
                w.writerow([i, f"{p:.6f}", f"{s:.6f}", f"{bp:.6f}", f"{bs:.6f}"])
        plot_eval_report(report.per_sample, base.per_sample, out / "psnr_scatter.png")
    return EXIT_OK


def cmd_restore(args) -> int:
    from wxrestore.images import ImageReadError, read_png, to_tensor, write_png
    from wxrestore.model import restore

    net = _open_network(args.ckpt)
    try:
        img = read_png(args.input)
    except (ImageReadError, FileNotFoundError) as exc:
        raise CommandError(str(exc), EXIT_IO) from None
    if min(img.shape[:2]) < 8:
        raise CommandError(f"image must be at least 8x8, got {img.shape[1]}x{img.shape[0]}",
                           EXIT_IO)
    out = restore(net, to_tensor(img))
    try:
        write_png(args.output, out)
    except OSError as exc:
        raise CommandError(f"cannot write {args.output}: {exc}", EXIT_IO) from None
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wxrestore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic degraded/clean PNG pairs")
    p.add_argument("--config", help="run config file ([model]/[train]/[data])")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a directory of pairs")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--stop-after", type=int, metavar="STEP",
                   help="stop early at STEP and write step_<STEP>.ckpt")
    p.add_argument("--no-plot", dest="plot", action="store_false",
                   help="skip the loss.png figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a directory of pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", metavar="DIR", help="write metrics.csv and psnr_scatter.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("restore", help="restore a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_restore)
    return parser


def main(argv=None) -> int:
    from wxrestore.train import configure_threads

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
