"""Command-line front end.

Subcommands:
  generate  build a synthetic dataset (phantom k-space, masks, manifest)
  train     train the unrolled network (O-MoDL or image-domain baseline)
  recon     reconstruct a dataset with one method, write metrics CSV
  eval      run several methods over a dataset into one metrics CSV
  export    write a magnitude (or error-map) PGM for one sample

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import phantoms, recon
from .kspace import inverse_dft, load_kspace
from .network import NetworkConfig
from .phantoms import load_manifest, measure
from .recon import (recon_giraf, recon_network, recon_tikhonov,
                    recon_zero_filled, snr_db, tune_tikhonov_alpha)
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train,
                       train_image_domain_baseline, write_loss_log)

CSV_HEADER = "method,acceleration,sigma,snr_db,runtime_ms,seed"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offgrid",
                                     description="Off-the-grid MRI reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="build a synthetic dataset")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--grid", type=int, default=64)
    gen.add_argument("--accel", type=float, default=2.0)
    gen.add_argument("--sigma", type=float, default=0.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--center-lines", type=int, default=8)
    gen.add_argument("--test", action="store_true",
                     help="draw from the disjoint test seed stream")
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train the unrolled network")
    tr.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
    tr.add_argument("--arch", choices=["omodl", "image-domain"], default="omodl")
    tr.add_argument("--epochs", type=int, default=5)
    tr.add_argument("--batch-size", type=int, default=5)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lr-decay", type=float, default=1.0,
                    help="per-epoch learning-rate multiplier")
    tr.add_argument("--pretrain-epochs", type=int, default=0,
                    help="denoiser-only warm-start epochs before unrolling")
    tr.add_argument("--pretrain-lr", type=float, default=None,
                    help="learning rate for the warm-start phase (default: --lr)")
    tr.add_argument("--depth", type=int, default=5)
    tr.add_argument("--channels", type=int, default=16)
    tr.add_argument("--kernel", type=int, default=3)
    tr.add_argument("--unroll", type=int, default=5)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--loss-log", default=None)
    tr.add_argument("--out", required=True, help="checkpoint path")

    rc = sub.add_parser("recon", help="reconstruct a dataset with one method")
    rc.add_argument("--data", required=True)
    rc.add_argument("--method", required=True,
                    choices=["omodl", "giraf", "tikhonov", "zero-filled", "image-domain"])
    rc.add_argument("--checkpoint", default=None)
    rc.add_argument("--alpha", type=float, default=None,
                    help="tikhonov weight (default: tuned by grid search)")
    rc.add_argument("--lam", type=float, default=1e2)
    rc.add_argument("--filter-size", type=int, default=5)
    rc.add_argument("--outer-iters", type=int, default=15)
    rc.add_argument("--out", required=True, help="metrics CSV path")
    rc.add_argument("--save-kspace", default=None,
                    help="directory for reconstructed k-space files")
    rc.add_argument("--no-runtime", action="store_true",
                    help="write runtime_ms as 0 for byte-reproducible CSVs")

    ev = sub.add_parser("eval", help="run several methods into one metrics CSV")
    ev.add_argument("--data", required=True)
    ev.add_argument("--methods", default="zero-filled,tikhonov",
                    help="comma-separated method list")
    ev.add_argument("--checkpoint", default=None, help="O-MoDL checkpoint")
    ev.add_argument("--baseline-checkpoint", default=None,
                    help="image-domain checkpoint")
    ev.add_argument("--alpha", type=float, default=None)
    ev.add_argument("--lam", type=float, default=1e2)
    ev.add_argument("--filter-size", type=int, default=5)
    ev.add_argument("--outer-iters", type=int, default=15)
    ev.add_argument("--no-runtime", action="store_true")
    ev.add_argument("--out", required=True)

    ex = sub.add_parser("export", help="write a magnitude PGM")
    ex.add_argument("--kspace", required=True, help="k-space file to render")
    ex.add_argument("--reference", default=None,
                    help="reference k-space; renders the error map")
    ex.add_argument("--out", required=True)
    return parser


def _accel_of(mask: np.ndarray) -> float:
    kept_cols = mask[0].sum()
    return mask.shape[1] / float(kept_cols)


def _run_methods(args, methods) -> list[str]:
    data_dir = Path(args.data)
    records = load_manifest(data_dir / "manifest.csv")
    loaded = [measure(r, data_dir) for r in records]
    ckpts = {}
    if getattr(args, "checkpoint", None):
        ckpts["omodl"] = load_checkpoint(args.checkpoint)
    if getattr(args, "baseline_checkpoint", None):
        ckpts["image-domain"] = load_checkpoint(args.baseline_checkpoint)
    if "omodl" in methods and "omodl" not in ckpts:
        raise ValueError("method omodl requires --checkpoint")
    if "image-domain" in methods and "image-domain" not in ckpts:
        ckpt_key = "checkpoint" if getattr(args, "command", "") == "recon" else "baseline-checkpoint"
        if getattr(args, "checkpoint", None):
            ckpts["image-domain"] = load_checkpoint(args.checkpoint)
        else:
            raise ValueError(f"method image-domain requires --{ckpt_key}")
    alpha = args.alpha
    if ("tikhonov" in methods) and alpha is None:
        alpha = tune_tikhonov_alpha([(b, mask, kref) for kref, mask, b in loaded])

    rows = []
    for method in methods:
        for record, (kref, mask, b) in zip(records, loaded):
            if method == "zero-filled":
                result = recon_zero_filled(b, mask)
            elif method == "tikhonov":
                result = recon_tikhonov(b, mask, alpha)
            elif method == "giraf":
                result = recon_giraf(b, mask, lam=args.lam,
                                     filter_size=args.filter_size,
                                     outer_iters=args.outer_iters)
            else:
                result = recon_network(b, mask, ckpts[method])
            value = snr_db(result.image, inverse_dft(kref))
            runtime = 0.0 if getattr(args, "no_runtime", False) else result.runtime_ms
            rows.append(f"{method},{_accel_of(mask)!r},{record.sigma!r},"
                        f"{value!r},{runtime!r},{record.seed}")
            if getattr(args, "save_kspace", None):
                out_dir = Path(args.save_kspace)
                out_dir.mkdir(parents=True, exist_ok=True)
                from .kspace import save_kspace
                save_kspace(out_dir / f"{method}_{record.index:04d}.oksp", result.f_hat)
    return rows


def _cmd_generate(args) -> int:
    phantoms.build_dataset(count=args.count, n=args.grid, accel=args.accel,
                           sigma=args.sigma, seed=args.seed, out_dir=args.out,
                           center_lines=args.center_lines, test=args.test)
    return 0


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    records = load_manifest(data_dir / "manifest.csv")
    samples = [measure(r, data_dir) for r in records]
    net_cfg = NetworkConfig(depth=args.depth, channels=args.channels,
                            kernel=args.kernel, unroll_iters=args.unroll)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            lr=args.lr, lr_decay=args.lr_decay,
                            pretrain_epochs=args.pretrain_epochs,
                            pretrain_lr=args.pretrain_lr, seed=args.seed)
    if args.arch == "omodl":
        ckpt, log = train(samples, net_cfg, train_cfg)
    else:
        ckpt, log = train_image_domain_baseline(samples, net_cfg, train_cfg)
    save_checkpoint(args.out, ckpt)
    if args.loss_log:
        write_loss_log(args.loss_log, log)
    for epoch, train_mse, val_mse in log:
        print(f"epoch {epoch}: train_mse={train_mse:.6e} val_mse={val_mse:.6e}")
    return 0


def _cmd_recon(args) -> int:
    rows = _run_methods(args, [args.method])
    with open(args.out, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write("\n".join(rows) + "\n")
    return 0


def _cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = _run_methods(args, methods)
    with open(args.out, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write("\n".join(rows) + "\n")
    return 0


def _cmd_export(args) -> int:
    k = load_kspace(args.kspace)
    image = inverse_dft(k)
    reference = None
    if args.reference:
        reference = inverse_dft(load_kspace(args.reference))
    recon.export_magnitude(image, args.out, reference=reference)
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "recon": _cmd_recon,
    "eval": _cmd_eval,
    "export": _cmd_export,
}


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
