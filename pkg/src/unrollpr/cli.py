"""Command-line surface: gen-data, train, eval, reconstruct, selfcheck.

Exit codes: 0 success, 1 selfcheck failure, 2 usage error, 3 I/O error,
4 shape/compatibility error.  Every output file is written atomically.
All randomness flows from the --seed flags through named streams, so each
command's outputs are reproducible from its flags alone.
"""

import argparse
import math
import os
import sys

import numpy as np

from . import cdp, datakit, metrics, network, selfcheck, training
from .errors import FormatError
from .field import STREAM_MASKS_TEST, STREAM_NOISE, derive_rng

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SHAPE = 4


def _fmt(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return repr(float(x))


def _parse_size(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError("size must look like 32x32, got %r" % text)
    h, w = int(parts[0]), int(parts[1])
    from .field import is_pow2

    if not (is_pow2(h) and is_pow2(w)):
        raise ValueError("size must be a power of two per side, got %dx%d" % (h, w))
    return h, w


def _parse_alphas(text):
    vals = tuple(float(v) for v in text.split(","))
    if not vals:
        raise ValueError("need at least one noise level")
    return vals


def cmd_gen_data(args):
    h, w = _parse_size(args.size)
    datakit.generate_dataset(
        args.out, args.count, h, w, args.seed,
        alphas=_parse_alphas(args.alphas), test_masks=args.test_masks,
    )
    print("wrote %d samples (%dx%d) to %s" % (args.count, h, w, args.out))
    return EXIT_OK


def _load_dir(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError("no such data directory: %s" % data_dir)
    return datakit.load_dataset(data_dir)


def cmd_train(args):
    if args.epochs < 0 or args.batch < 1 or args.lr <= 0 or args.K < 1 \
            or args.channels < 1 or args.threads < 1:
        print("invalid training flags", file=sys.stderr)
        return EXIT_USAGE
    manifest, dataset = _load_dir(args.data)
    val = None
    if args.val_data:
        _, val = _load_dir(args.val_data)
    config = training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
        num_stages=args.K, channels=args.channels, num_masks=manifest.num_masks,
        mode=args.mode, tie_adjoint=args.tie_adjoint, threads=args.threads,
    )
    log_path = args.log if args.log else args.out + ".csv"
    net, history, state = training.train_full(
        dataset, config, val_dataset=val, log_path=log_path
    )
    training.checkpoint_save(net, state, args.out)
    final = history[-1] if history else float("nan")
    print("trained %d epochs, final loss %s -> %s" % (args.epochs, _fmt(final), args.out))
    return EXIT_OK


def _check_compat(net, manifest):
    want = (net.height, net.width, net.num_masks)
    have = (manifest.height, manifest.width, manifest.num_masks)
    if want != have:
        print(
            "checkpoint expects %dx%d with %d masks, data is %dx%d with %d masks"
            % (want[0], want[1], want[2], have[0], have[1], have[2]),
            file=sys.stderr,
        )
        return False
    return True


def cmd_eval(args):
    net, _ = training.checkpoint_load(args.ckpt)
    manifest, dataset = _load_dir(args.data)
    if len(dataset) == 0:
        print("data directory is empty", file=sys.stderr)
        return EXIT_IO
    if not _check_compat(net, manifest):
        return EXIT_SHAPE
    rows = []
    if args.bypass:
        for i, (img, mv) in enumerate(dataset):
            name = manifest.records[i].image or ("synth-%d" % i)
            rows.append((name, mv.alpha, metrics.psnr(img, img), metrics.ssim(img, img)))
    else:
        images, ys, masks = training._stack_samples(dataset)
        x, _ = network.net_forward(ys, masks, net)
        for i in range(len(dataset)):
            name = manifest.records[i].image or ("synth-%d" % i)
            rows.append((
                name, dataset[i][1].alpha,
                metrics.psnr(x[i], images[i]), metrics.ssim(x[i], images[i]),
            ))
    for name, alpha, p, s in rows:
        print("%s alpha=%g psnr=%s ssim=%s" % (name, alpha, _fmt(p), _fmt(s)))
    mean_p = float(np.mean([r[2] for r in rows]))
    mean_s = float(np.mean([r[3] for r in rows]))
    print("mean psnr=%s ssim=%s" % (_fmt(mean_p), _fmt(mean_s)))
    if args.csv:
        lines = ["name,alpha,psnr,ssim"]
        for name, alpha, p, s in rows:
            lines.append("%s,%s,%s,%s" % (name, ("%g" % alpha), _fmt(p), _fmt(s)))
        datakit._atomic_write(args.csv, ("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_OK


def cmd_reconstruct(args):
    if args.alpha < 0:
        print("alpha must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    net, _ = training.checkpoint_load(args.ckpt)
    img = datakit.load_pgm(args.input)
    if img.shape != (net.height, net.width):
        print(
            "checkpoint expects %dx%d, input image is %dx%d"
            % (net.height, net.width, img.shape[0], img.shape[1]),
            file=sys.stderr,
        )
        return EXIT_SHAPE
    mask_seed = int(derive_rng(args.seed, STREAM_MASKS_TEST, 0).integers(0, 2 ** 62))
    masks = cdp.masks_from_seed(mask_seed, net.num_masks, net.height, net.width)
    y = cdp.measure(img, masks, args.alpha, derive_rng(args.seed, STREAM_NOISE, 0))
    x, _ = network.net_forward(y, masks, net)
    datakit.save_pgm(np.clip(x, 0.0, 1.0), args.out)
    print("reconstructed %s -> %s, psnr=%s" % (
        args.input, args.out, _fmt(metrics.psnr(np.clip(x, 0.0, 1.0), img))
    ))
    return EXIT_OK


def cmd_selfcheck(args):
    rows, ok = selfcheck.run_selfcheck(
        quick=args.quick, inject_fault=args.inject_fault
    )
    for name, measured, threshold, passed in rows:
        print("%s %-18s measured=%.3e threshold=%.3e"
              % ("ok  " if passed else "FAIL", name, measured, threshold))
    print("selfcheck %s" % ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser():
    p = argparse.ArgumentParser(
        prog="unrollpr",
        description="Unrolled phase retrieval from coded diffraction patterns",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", required=True, help="HxW, powers of two")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--alphas", default="9,27,81")
    g.add_argument("--test-masks", action="store_true",
                   help="draw mask seeds from the held-out stream domain")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--K", type=int, default=7, help="number of unrolled stages")
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--batch", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--mode", choices=("structured", "dense", "fixed"),
                   default="structured")
    t.add_argument("--tie-adjoint", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-data", default=None)
    t.add_argument("--log", default=None, help="CSV log path (default OUT.csv)")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", default=None)
    e.add_argument("--bypass", action="store_true",
                   help="score ground truth against itself (plumbing check)")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("reconstruct", help="measure and reconstruct one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--alpha", type=float, required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("selfcheck", help="run the built-in diagnostic suites")
    s.add_argument("--quick", action="store_true")
    s.add_argument("--inject-fault", default=None, choices=("adjoint",),
                   help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
