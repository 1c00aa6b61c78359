"""Command-line entry point: ``hdcgan <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails. Flag values come from built-in defaults, then ``--config``
(a JSON object keyed by flag name), then the command line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .curves import emit_curves
from .dataset import ingest, mirror_augment, synthetic_two_class
from .imageops import list_images, load_folder, load_image, resize, save_image, tile
from .layers import MomentPair, iterate_moment_map
from .metrics import (
    FD_RESIZE,
    MSSSIM_PAIRS,
    MSSSIM_RESIZE,
    NN_K,
    frechet_from_features,
    frechet_protocol,
    msssim_protocol,
    nearest_neighbors,
    read_feature_file,
)
from .model import NetworkConfig, apply_glasses
from .rng import RngStream
from .training import TrainConfig, generate, init_state, load_checkpoint, run_training, save_checkpoint, write_loss_log
from .validation import check_telescope

logger = logging.getLogger("hdcgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _telescope(text: str) -> tuple[int, int]:
    try:
        return check_telescope(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_images(path: str | Path, size: int | None = None) -> np.ndarray:
    """Images from a ``.npy`` file or a folder.

    A folder holding ``images.npy`` (dataset-build) or ``samples.npy``
    (generate) is read from that array, which is lossless and skips the
    preview grid; otherwise every image file in it is decoded.
    """
    path = Path(path)
    if path.is_dir():
        for name in ("images.npy", "samples.npy"):
            if (path / name).exists():
                path = path / name
                break
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if size is not None and arr.shape[-2:] != (size, size):
            arr = np.clip(resize(arr, (size, size)), -1.0, 1.0).astype(np.float32)
        return arr
    return load_folder(path, size)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- subcommands -----------------------------------------------------------------


def cmd_dataset_build(args) -> None:
    manifest = ingest(args.input, args.size, args.attributes)
    if args.mirror:
        manifest = mirror_augment(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.csv", out / "stats.json")
    np.save(out / "images.npy", manifest.images)
    print(f"{len(manifest)} records ({manifest.skipped} skipped) -> {out}")


def _grid(gen, seed: int, n: int) -> np.ndarray:
    return tile(generate(gen, n, RngStream(seed, 6)), columns=int(np.ceil(np.sqrt(n))))


def cmd_train(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = logging.FileHandler(out / "run.log", mode="a")
    sidecar.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(sidecar)
    logging.getLogger().setLevel(logging.INFO)
    try:
        if args.checkpoint:
            state = load_checkpoint(args.checkpoint)
            state.train_config = replace(state.train_config, epochs=args.epochs)
            net_cfg, cfg = state.network_config, state.train_config
            logger.info("resuming from %s at step %d; architecture flags come from the checkpoint", args.checkpoint, state.step)
        else:
            net_cfg = NetworkConfig(
                base_size=args.size, telescope=args.telescope, latent_dim=args.latent,
                n_filters=args.filters, channels=3,
            )
            cfg = TrainConfig(
                learning_rate=args.lr, batch_size=args.batch, noise_amplitude=args.noise_amp,
                epochs=args.epochs, seed=args.seed, bs_order=args.bs_order,
            )
            state = init_state(net_cfg, cfg)
        base = net_cfg.base_size[0]
        if args.data:
            images = _load_images(args.data, base)
        else:
            images, _ = synthetic_two_class(args.synthetic, base, cfg.seed)
        if net_cfg.telescope != (1, 1):
            images = np.clip(apply_glasses(images, net_cfg.telescope), -1.0, 1.0).astype(np.float32)
        logger.info("training on %d images at %dx%d, %d layers", len(images), *net_cfg.effective_shape, net_cfg.n_layers)

        def on_epoch_end(st):
            save_image(out / f"samples_epoch{st.epoch:03d}.png", _grid(st.generator, cfg.seed, args.grid))

        run_training(state, images, steps=args.steps, epochs=args.epochs, on_epoch_end=on_epoch_end)
        save_checkpoint(state, out / "checkpoint.hdck")
        write_loss_log(state.history, out / "losses.csv")
        logger.info("finished at step %d", state.step)
        print(f"step {state.step}: checkpoint and losses written to {out}")
    finally:
        logging.getLogger().removeHandler(sidecar)
        sidecar.close()


def cmd_generate(args) -> None:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = generate(state.generator, args.n, RngStream(args.seed, 5))
    np.save(out / "samples.npy", images)
    save_image(out / "grid.png", tile(images, columns=int(np.ceil(np.sqrt(args.n)))))
    if args.individual:
        for i, img in enumerate(images):
            save_image(out / f"sample_{i:04d}.png", img)
    print(f"{args.n} samples -> {out}")


def _report_out(report, out: str | None, stem: str) -> None:
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        report.write(d / f"{stem}.json", d / f"{stem}.csv")
    print(f"{report.metric} {report.value!r}")


def cmd_eval_msssim(args) -> None:
    images = _load_images(args.images)
    report = msssim_protocol(images, pairs=args.pairs, resize_to=args.resize, seed=args.seed)
    _report_out(report, args.out, "msssim")


def cmd_eval_fd(args) -> None:
    if args.features_file:
        real, fake = (read_feature_file(p) for p in args.features_file)
        report = frechet_from_features(real, fake)
    else:
        if not args.real or not args.fake:
            raise UsageError("eval-fd needs --real and --fake, or --features-file REAL FAKE")
        real = _load_images(args.real)
        fakes = [_load_images(p) for p in args.fake]
        report = frechet_protocol(real, fakes, args.extractor, args.resize, args.mode, args.seed)
    _report_out(report, args.out, "fd")


def cmd_nn(args) -> None:
    query = load_image(args.query, args.resize)
    size = query.shape[-1] if args.resize is None else args.resize
    if query.shape[-2] != query.shape[-1]:
        raise ValueError("query image must be square unless --resize is given")
    paths = list_images(args.corpus)
    corpus = load_folder(args.corpus, size)
    rows = [
        (rank, idx, paths[idx].name, repr(dist))
        for rank, (idx, dist) in enumerate(nearest_neighbors(query, corpus, args.k), start=1)
    ]
    header = ("rank", "index", "path", "distance")
    if args.out:
        _write_csv(Path(args.out), header, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_moments_demo(args) -> None:
    path = iterate_moment_map(
        MomentPair(args.mean, args.var), args.omega, args.tau, args.steps, samples=args.samples, seed=args.seed,
    )
    rows = [(i, repr(m.mean), repr(m.variance), repr(m.distance(MomentPair(0.0, 1.0)))) for i, m in enumerate(path)]
    header = ("iteration", "mean", "variance", "distance_to_fixed_point")
    if args.out:
        _write_csv(Path(args.out), header, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_curves(args) -> None:
    fits = emit_curves(args.input, args.out)
    for name, (slope, icpt) in fits.items():
        print(f"{name}: slope={slope!r} intercept={icpt!r}")


# --- parser ----------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="hdcgan", description="Train, sample and evaluate SELU+BatchNorm GANs.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("dataset-build", cmd_dataset_build, "Crop, resize and catalogue a folder of face images.")
    p.add_argument("--input", required=True, help="folder of PNG/PPM/PGM/JPEG images")
    p.add_argument("--size", type=int, default=64, help="output side length")
    p.add_argument("--attributes", default=None, help="attribute CSV with a filename column")
    p.add_argument("--mirror", action="store_true", help="append horizontally flipped copies")
    p.add_argument("--out", default="dataset", help="output folder")

    p = add("train", cmd_train, "Train a generator/discriminator pair.")
    p.add_argument("--data", default=None, help="image folder or .npy; synthetic two-class data if omitted")
    p.add_argument("--synthetic", type=int, default=512, help="synthetic images when --data is omitted")
    p.add_argument("--size", type=int, default=64, help="training image side length")
    p.add_argument("--telescope", type=_telescope, default=(1, 1), help="upscale factors Z1xZ2")
    p.add_argument("--latent", type=int, default=100, help="latent dimension")
    p.add_argument("--filters", type=int, default=64, help="base filter count")
    p.add_argument("--batch", type=int, default=32, help="batch size")
    p.add_argument("--lr", type=float, default=0.0002, help="Adam learning rate")
    p.add_argument("--epochs", type=int, default=1, help="epochs to train")
    p.add_argument("--steps", type=int, default=None, help="stop after this many total steps (overrides --epochs)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--noise-amp", type=float, default=0.1, help="std of the noise added to D input and latent")
    p.add_argument("--bs-order", choices=("selu_bn", "bn_selu"), default="selu_bn", help="order inside BS blocks")
    p.add_argument("--grid", type=int, default=16, help="samples per epoch grid")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--out", default="run", help="output folder")

    p = add("generate", cmd_generate, "Sample images from a checkpoint.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="latent seed")
    p.add_argument("--individual", action="store_true", help="also write one PNG per sample")
    p.add_argument("--out", default="samples", help="output folder")

    p = add("eval-msssim", cmd_eval_msssim, "Mean MS-SSIM over random image pairs.")
    p.add_argument("--images", required=True, help="image folder or .npy")
    p.add_argument("--pairs", type=int, default=MSSSIM_PAIRS, help="pairs to sample")
    p.add_argument("--resize", type=int, default=MSSSIM_RESIZE, help="resize side before scoring")
    p.add_argument("--seed", type=int, default=0, help="pair sampling seed")
    p.add_argument("--out", default=None, help="folder for msssim.json/.csv")

    p = add("eval-fd", cmd_eval_fd, "Frechet distance between real and generated images.")
    p.add_argument("--real", default=None, help="real image folder or .npy")
    p.add_argument("--fake", nargs="+", default=None, help="generated image folder(s) or .npy")
    p.add_argument("--extractor", default="downsample:8", help="downsample:S | random-projection:D:SEED | file:PATH")
    p.add_argument("--features-file", nargs=2, metavar=("REAL", "FAKE"), default=None, help="precomputed feature files")
    p.add_argument("--resize", type=int, default=FD_RESIZE, help="resize side before feature extraction")
    p.add_argument("--mode", choices=("pooled", "per-epoch"), default="pooled", help="how several --fake sets combine")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized extractors")
    p.add_argument("--out", default=None, help="folder for fd.json/.csv")

    p = add("nn", cmd_nn, "Nearest corpus images to a query in pixel space.")
    p.add_argument("--query", required=True, help="query image")
    p.add_argument("--corpus", required=True, help="corpus image folder")
    p.add_argument("--k", type=int, default=NN_K, help="neighbors to report")
    p.add_argument("--resize", type=int, default=None, help="common side length (default: query size)")
    p.add_argument("--out", default=None, help="also write the rows to this CSV")

    p = add("moments-demo", cmd_moments_demo, "Iterate the SELU moment map toward its fixed point.")
    p.add_argument("--mean", type=float, default=0.5, help="starting mean")
    p.add_argument("--var", type=float, default=1.5, help="starting variance")
    p.add_argument("--omega", type=float, default=0.0, help="sum of weights")
    p.add_argument("--tau", type=float, default=1.0, help="sum of squared weights")
    p.add_argument("--steps", type=int, default=20, help="iterations")
    p.add_argument("--samples", type=int, default=100_000, help="Monte-Carlo samples per iteration")
    p.add_argument("--seed", type=int, default=0, help="Monte-Carlo seed")
    p.add_argument("--out", default=None, help="also write the trajectory to this CSV")

    p = add("curves", cmd_curves, "Export loss or metric curves as CSV, SVG and a line fit.")
    p.add_argument("--input", required=True, help="loss log or per-epoch metric CSV")
    p.add_argument("--out", default="curves", help="output folder")
    return parser, subs


def _apply_config(args, subs) -> None:
    sp = subs[args.command]
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest: a for a in sp._actions}
    values = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = known[dest]
        if action.type is not None and value is not None and not isinstance(value, list):
            value = action.type(str(value)) if action.type is _telescope else action.type(value)
        values[dest] = value
    sp.set_defaults(**values)
    for a in sp._actions:
        if a.dest in values:
            a.required = False


def run(argv=None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.config:
        try:
            _apply_config(args, subs)
        except (UsageError, ValueError, argparse.ArgumentTypeError) as exc:
            subs[args.command].print_usage(sys.stderr)
            sys.stderr.write(f"hdcgan {args.command}: error: {exc}\n")
            return 1
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        sys.stderr.write(f"hdcgan {args.command}: error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        sys.stderr.write(f"hdcgan {args.command}: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
