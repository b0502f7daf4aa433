"""Command-line driver: ``pav generate | train | render | eval``.

Settings come from defaults, then an optional JSON config file, then flags.
Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 bad reference, 5 missing data.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REFERENCE = 4
EXIT_MISSING = 5

log = logging.getLogger("pav")


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers ------------------------------------------------------------------------

def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("PAV_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise CliFailure(EXIT_CONFIG, "--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _load_dataset(path):
    from .training.dataset import SceneDataset

    if path is None or not (Path(path) / "scene.json").exists():
        raise CliFailure(EXIT_MISSING, f"no dataset at {path}")
    return SceneDataset.load(path)


def _frame_ref(text: str) -> tuple[int, int]:
    try:
        j, i = text.split(":")
        return int(j), int(i)
    except ValueError as err:
        raise CliFailure(EXIT_CONFIG, f"frame reference must look like J:I, got {text!r}") from err


def _load_model(checkpoint: Path, dataset):
    """Rebuild the model from the run config stored next to ``checkpoint`` and load its weights."""
    from .autodiff import load_checkpoint, restore
    from .config import load_run_config
    from .errors import InvalidInputError
    from .training.loop import build_model

    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CliFailure(EXIT_MISSING, f"checkpoint {checkpoint} not found")
    cfg_path = checkpoint.parent / "run_config.json"
    cfg = load_run_config(cfg_path if cfg_path.exists() else None)
    model = build_model(dataset, cfg.field, seed=cfg.seed)
    try:
        restore(model.params, load_checkpoint(checkpoint))
    except InvalidInputError as err:
        raise CliFailure(EXIT_REFERENCE, f"checkpoint does not fit this dataset: {err}") from err
    return model, cfg


# -- commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .config import load_run_config
    from .training.synthetic import generate_synthetic_scene

    over: dict = {"scene": {}}
    for flag, key in (("appearances", "appearances"), ("frames", "frames"), ("test_frames", "test_frames"),
                      ("image_size", "image_size")):
        if getattr(args, flag) is not None:
            over["scene"][key] = getattr(args, flag)
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = load_run_config(args.config, over)
    out = Path(args.out)
    dataset = generate_synthetic_scene(seed=cfg.seed, config=cfg.scene)
    dataset.save(out)
    log.info("wrote %d frames to %s", len(dataset.frames), out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_run_config, write_run_config
    from .errors import InvalidInputError
    from .plots import plot_loss
    from .training.loop import NumericAbort, build_model, train

    over: dict = {"train": {}, "field": {}}
    for flag in ("iterations", "batch_rays", "samples"):
        if getattr(args, flag) is not None:
            over["train"][flag] = getattr(args, flag)
    if args.embedding is not None:
        over["field"]["embedding"] = args.embedding
    if args.no_density_offset:
        over["field"]["density_offset"] = False
    if args.seed is not None:
        over["seed"] = args.seed
        over["train"]["seed"] = args.seed
    cfg = load_run_config(args.config, over)
    dataset = _load_dataset(args.data)
    out = Path(args.out)
    write_run_config(cfg, out)
    model = build_model(dataset, cfg.field, seed=cfg.seed)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise CliFailure(EXIT_MISSING, f"checkpoint {resume} not found")
    try:
        result = train(model, dataset, cfg.train, out_dir=out, resume=resume)
    except NumericAbort as err:
        log.error("%s", err)
        return EXIT_NUMERIC
    except InvalidInputError as err:
        raise CliFailure(EXIT_REFERENCE, str(err)) from err
    plot_loss(out / "loss.csv")
    log.info("checkpoint %s", result.checkpoint)
    return EXIT_OK


def cmd_render(args) -> int:
    import numpy as np

    from . import imageio
    from .training.loop import frame_set
    from .renderer import render_image

    dataset = _load_dataset(args.data)
    model, cfg = _load_model(Path(args.checkpoint), dataset)
    if args.from_frame is None and args.frame is None:
        raise CliFailure(EXIT_CONFIG, "give --frame J:I or --from-frame J:I")
    j, i = _frame_ref(args.frame or args.from_frame)
    try:
        frame = dataset.find(j, i)
    except KeyError as err:
        raise CliFailure(EXIT_REFERENCE, f"no frame {j}:{i}") from err
    appearance = frame.appearance if args.appearance is None else args.appearance
    if not 0 <= appearance < dataset.n_appearances:
        raise CliFailure(EXIT_REFERENCE, f"unknown appearance {appearance}")
    samples = args.samples or cfg.render.samples
    frames = frame_set(model, [frame])
    rgb, depth, acc = render_image(model, frames, 0, appearance, frame.camera, samples, seed=args.seed,
                                   chunk=cfg.render.chunk)
    out = Path(args.out)
    stem = f"a{appearance}_f{j}_{i}"
    imageio.write_rgb(out / f"{stem}.png", rgb)
    imageio.write_depth(out / f"{stem}_depth.png", np.where(acc > 1e-3, depth, np.inf))
    imageio.write_gray(out / f"{stem}_opacity.png", acc)
    log.info("wrote %s", out / f"{stem}.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv

    from .plots import plot_metrics
    from .training.loop import evaluate

    dataset = _load_dataset(args.data)
    model, cfg = _load_model(Path(args.checkpoint), dataset)
    if args.split != "all" and not dataset.split(args.split):
        raise CliFailure(EXIT_MISSING, f"split {args.split!r} has no frames")
    rows, scores = evaluate(model, dataset, args.split, samples=args.samples or cfg.render.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["appearance", "split", "psnr", "ssim"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "psnr": f"{r['psnr']:.6f}", "ssim": f"{r['ssim']:.6f}"})
    plot_metrics(rows, out / "metrics.png")
    for r in rows:
        log.info("%s/%s  psnr %.3f  ssim %.4f", r["appearance"], r["split"], r["psnr"], r["ssim"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pav", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $PAV_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic deformable-head dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--appearances", type=int)
    g.add_argument("--frames", type=int, help="frames per appearance, train and test together")
    g.add_argument("--test-frames", type=int)
    g.add_argument("--image-size", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--embedding", choices=["lnf", "glo", "none"])
    t.add_argument("--no-density-offset", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a frame, optionally with another appearance")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--frame", help="J:I, render frame I of appearance J as it was trained")
    r.add_argument("--from-frame", help="J:I, take mesh, expression and camera from this frame")
    r.add_argument("--appearance", type=int)
    r.add_argument("--samples", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR and SSIM on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--samples", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except CliFailure as err:
        log.error("%s", err)
        return err.code
    except FileNotFoundError as err:
        log.error("%s", err)
        return EXIT_MISSING
    except ValueError as err:  # ConfigError and bad parameter values
        log.error("%s", err)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
