"""Command-line entry point: ``ampdehaze <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure, 4 I/O error.
"""

import argparse
import csv
import dataclasses
import io
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import hazedata, metrics, trainer
from .gradsuite import run_suite
from .spectral import swap_amplitude
from .tensorcore import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = range(5)
IMAGE_SUFFIXES = (".png", ".ppm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _header(command, **fields):
    print(f"# ampdehaze {command}")
    for k, v in fields.items():
        print(f"# {k} = {v}")
    sys.stdout.flush()


def _list_images(d):
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    hazedata.write_text_atomic(path, buf.getvalue())


def _fmt(v):
    return "inf" if v == math.inf else f"{v:.6f}"


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    _header("synth", out=args.out, scenes=args.scenes, size=args.size, seed=args.seed)
    if args.scenes < 2 or args.size < 1:
        raise UsageError("--scenes must be >= 2 and --size >= 1")
    hazedata.make_toy_dataset(args.out, args.seed, args.scenes, args.size)
    print((Path(args.out) / "manifest.json").read_text(), end="")


def cmd_swap(args):
    _header("swap", content=args.content, donor=args.donor, out=args.out)
    content = hazedata.load_tensor(args.content)
    donor = hazedata.load_tensor(args.donor)
    if content.shape != donor.shape:
        raise DataError(f"shape mismatch: content {content.shape} vs donor {donor.shape}")
    out = swap_amplitude(content.astype(np.float64), donor.astype(np.float64))
    hazedata.save_image(hazedata.to_rgb8(out), args.out)


def cmd_dcstats(args):
    _header("dcstats", hazy=args.hazy, clear=args.clear, synclear=args.synclear, out=args.out, patch=args.patch)
    hazy = _list_images(args.hazy)
    clear = _list_images(args.clear)
    if not hazy or not clear:
        raise DataError("hazy and clear directories must both contain images")
    if len(hazy) != len(clear):
        raise DataError(f"{len(hazy)} hazy vs {len(clear)} clear images; pairs are matched in name order")
    report = metrics.swap_experiment([hazedata.load_tensor(p) for p in hazy],
                                     [hazedata.load_tensor(p) for p in clear],
                                     patch=args.patch, names=[p.name for p in hazy])
    out = Path(args.out)
    hist = out.with_name(out.stem + "_hist.csv")
    report.write_csv(out, hist, synclear=args.synclear == "on")
    print(f"pairs {len(hazy)}")
    for pop, mass in report.below25.items():
        if pop != "synclear" or args.synclear == "on":
            print(f"below25 {pop} {mass:.4f}")
    if args.synclear == "on":
        print(f"closeness {report.closeness:.4f}")


def cmd_train(args):
    cfg = trainer.load_config(args.config)
    cfg = dataclasses.replace(cfg, stage=args.stage, seed=args.seed)
    if args.data:
        cfg = dataclasses.replace(cfg, data_root=args.data)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    cfg.validate()
    print("# ampdehaze train")
    print("".join(f"# {line}\n" for line in cfg.to_text().splitlines()), end="")
    sys.stdout.flush()
    if cfg.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init with a stage-1 checkpoint")
    init = trainer.load_checkpoint(args.init) if args.init else None
    if cfg.stage == 2 and init.stage != 1:
        raise DataError(f"{args.init}: expected a stage-1 checkpoint, got stage {init.stage}")
    if not cfg.data_root:
        raise UsageError("no dataset: set data_root in the config or pass --data")
    dataset = hazedata.DatasetIndex.from_root(cfg.data_root, cfg.seed)
    if not dataset.hazy_paths or not dataset.clear_paths:
        raise DataError(f"{cfg.data_root}: needs non-empty hazy/ and clear/ directories")
    out = Path(args.out)

    def progress(epoch, means, _models):
        print(f"epoch {epoch} " + " ".join(f"{k} {v:.5f}" for k, v in means.items()))
        sys.stdout.flush()

    try:
        result = trainer.train(cfg, dataset, init, progress)
    except trainer.TrainingDiverged as exc:
        keep = out.with_name(out.name + ".last-good")
        trainer.save_checkpoint(exc.last_good, keep)
        print(f"training diverged: {exc}; last good checkpoint kept at {keep}", file=sys.stderr)
        return EXIT_NUMERIC
    trainer.save_checkpoint(result.checkpoint, out)
    result.write_log(Path(args.log) if args.log else out.with_suffix(".csv"))
    print(f"saved {out}")


def _dehaze_one(models, path, seed, index):
    img = hazedata.load_tensor(path)
    return trainer.infer(img, models, seed, index)


def cmd_dehaze(args):
    _header("dehaze", ckpt=args.ckpt, input=args.input, out=args.out, seed=args.seed, workers=args.workers)
    models = trainer.Models.from_checkpoint(trainer.load_checkpoint(args.ckpt), require_denoiser=True)
    paths = _list_images(args.input)
    if not paths:
        raise DataError(f"{args.input}: no images")
    # every output is computed before anything is written; per-image seeds
    # depend only on (seed, position) so the worker count cannot change results
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        outs = list(pool.map(lambda ip: _dehaze_one(models, ip[1], args.seed, ip[0]), enumerate(paths)))
    out_dir = Path(args.out)
    for p, o in zip(paths, outs):
        hazedata.save_image(hazedata.to_rgb8(o), out_dir / p.name)
    print(f"dehazed {len(paths)} images")


def _eval_pair(pred, ref):
    x = hazedata.load_tensor(pred)
    y = hazedata.load_tensor(ref)
    if x.shape != y.shape:
        raise DataError(f"{pred.name}: shape {x.shape} vs reference {y.shape}")
    return metrics.psnr(x, y), metrics.ssim(x, y)


def cmd_eval(args):
    _header("eval", pred=args.pred, ref=args.ref, out=args.out)
    preds = {p.name: p for p in _list_images(args.pred)}
    refs = {p.name: p for p in _list_images(args.ref)}
    names = sorted(preds)
    if not names:
        raise DataError(f"{args.pred}: no images")
    missing = [n for n in names if n not in refs]
    if missing:
        raise DataError(f"no reference for {', '.join(missing)}")
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        scores = list(pool.map(lambda n: _eval_pair(preds[n], refs[n]), names))
    _write_csv(args.out, ["name", "psnr", "ssim"], [[n, _fmt(p), _fmt(s)] for n, (p, s) in zip(names, scores)])
    ps = np.array([p for p, _ in scores])
    print(f"mean psnr {_fmt(float(np.mean(ps)))} mean ssim {np.mean([s for _, s in scores]):.6f}")


def cmd_gradcheck(args):
    _header("gradcheck", seed=args.seed)

    def report(r, seconds):
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:20s} rel_err {r.error:.3e} tol {r.tol:.0e} ({seconds:.2f}s)")

    results = run_suite(args.seed, log=report)
    bad = [r.name for r in results if not r.ok]
    if bad:
        print(f"{len(bad)} gradient checks failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC


def cmd_sweep(args):
    cfg = dataclasses.replace(trainer.load_config(args.config), seed=args.seed)
    if args.data:
        cfg = dataclasses.replace(cfg, data_root=args.data)
    _header("sweep", config=args.config, seed=cfg.seed, data=cfg.data_root, out=args.out)
    dataset = hazedata.DatasetIndex.from_root(cfg.data_root, cfg.seed)
    if not dataset.hazy_paths or not dataset.clear_paths:
        raise DataError(f"{cfg.data_root}: needs non-empty hazy/ and clear/ directories")
    evaluate = None
    if dataset.gt_paths:
        by_name = {Path(g).name: g for g in dataset.gt_paths}
        pairs = [(dataset.tensor(h), dataset.tensor(by_name[Path(h).name]))
                 for h in dataset.hazy_paths if Path(h).name in by_name][:16]
        evaluate = lambda models: trainer.evaluate_pairs(models, pairs, cfg.seed)
    rows = trainer.lambda_sweep(cfg, dataset, evaluate=evaluate)
    keys = list(rows[0])
    _write_csv(args.out, keys, [[r[k] for k in keys] for r in rows])
    for line in trainer.sweep_orderings(rows):
        print(line)


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="ampdehaze", description="Frequency-domain unpaired dehazing toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch details")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a procedural hazy/clear toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("swap", help="content phase + donor amplitude")
    s.add_argument("--content", required=True)
    s.add_argument("--donor", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swap)

    s = sub.add_parser("dcstats", help="dark-channel statistics of hazy, clear and amplitude-swapped images")
    s.add_argument("--hazy", required=True)
    s.add_argument("--clear", required=True)
    s.add_argument("--synclear", choices=("on", "off"), default="on")
    s.add_argument("--patch", type=int, default=15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dcstats)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss CSV (default: checkpoint path with .csv)")
    s.add_argument("--data", help="dataset root (overrides data_root)")
    s.add_argument("--epochs", type=int, help="override the config's epoch count")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("dehaze", help="dehaze a directory of images with a stage-2 checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_dehaze)

    s = sub.add_parser("eval", help="PSNR/SSIM of predictions against references (matched by name)")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the double-precision gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="lambda sweep over {0.1, 1, 10} for each loss weight")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--data", help="dataset root (overrides data_root)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, hazedata.ImageError, trainer.CheckpointError, ShapeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, trainer.TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
