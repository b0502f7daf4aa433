"""Optimization driver and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..autodiff import Adam, Tape, load_checkpoint, restore, save_checkpoint
from ..errors import InvalidInputError, NonFiniteGradientError, PavError
from ..field import FieldConfig, FrameSet, RadianceField
from ..renderer import WHITE, generate_rays, pixel_grid, render_image, render_rays
from .dataset import SceneDataset, TrainingFrame
from .losses import LossWeights, loss_color, loss_depth, total_loss
from .metrics import psnr, ssim

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 4096
    samples: int = 64
    foreground_fraction: float = 0.8
    jitter: bool = True
    lr_density: float = 2.5e-3
    lr_color: float = 2.5e-3
    lr_grid: float = 2.5e-3
    lr_embedding: float = 2.5e-3
    lr_offset: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.batch_rays < 1 or self.samples < 1:
            raise InvalidInputError("batch_rays and samples must be >= 1")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise InvalidInputError("foreground_fraction must lie in [0, 1]")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise InvalidInputError("log_every and checkpoint_every must be >= 1")
        if min(self.learning_rates().values()) < 0:
            raise InvalidInputError("learning rates must be >= 0")

    def learning_rates(self) -> dict[str, float]:
        return {"density": self.lr_density, "color": self.lr_color, "hashgrid": self.lr_grid,
                "embedding": self.lr_embedding, "offset": self.lr_offset}


class NumericAbort(PavError):
    def __init__(self, iteration: int, reason: str, checkpoint: Path | None):
        super().__init__(f"iteration {iteration}: {reason}; last good state in {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


class RayBank:
    """Per-pixel rays, targets and depth for a list of frames, flattened for sampling."""

    def __init__(self, frames: list[TrainingFrame]):
        self.frames = frames
        h, w = frames[0].camera.height, frames[0].camera.width
        self.n_pixels = h * w
        pixels = pixel_grid(w, h)
        origins, dirs, colors, masks, depths = [], [], [], [], []
        for f in frames:
            o, d = generate_rays(f.camera, pixels)
            origins.append(o)
            dirs.append(d)
            colors.append(f.image.reshape(-1, 3))
            masks.append(f.mask.reshape(-1))
            depths.append(f.ray_depth().reshape(-1))
        self.origins = np.stack(origins)
        self.dirs = np.stack(dirs)
        self.colors = np.stack(colors)
        self.masks = np.stack(masks)
        self.depths = np.where(self.masks, np.stack(depths), 0.0)
        # foreground = covered by the ground-truth image or the face mask
        fg = np.any(self.colors < 1.0, axis=-1) | self.masks
        self.fg_count = fg.sum(axis=1)
        self.fg_offset = np.concatenate([[0], np.cumsum(self.fg_count)[:-1]])
        self.fg_pixels = np.concatenate([np.flatnonzero(row) for row in fg]) if fg.any() else np.zeros(0, int)

    def sample(self, rng: np.random.Generator, n: int, foreground_fraction: float):
        frame = rng.integers(len(self.frames), size=n)
        use_fg = (rng.random(n) < foreground_fraction) & (self.fg_count[frame] > 0)
        pix = rng.integers(self.n_pixels, size=n)
        pick = np.floor(rng.random(n) * np.maximum(self.fg_count[frame], 1)).astype(np.int64)
        fg_pix = self.fg_pixels[np.minimum(self.fg_offset[frame] + pick, max(len(self.fg_pixels) - 1, 0))] \
            if len(self.fg_pixels) else pix
        pix = np.where(use_fg, fg_pix, pix)
        return frame, pix


def frame_set(model: RadianceField, frames: list[TrainingFrame]) -> FrameSet:
    return FrameSet(model.canonical, [f.mesh for f in frames], np.stack([f.expression for f in frames]),
                    [f.appearance for f in frames])


def build_model(dataset: SceneDataset, config: FieldConfig, seed: int = 0) -> RadianceField:
    return RadianceField(config, dataset.canonical, dataset.n_appearances, seed=seed)


@dataclass
class StepResult:
    color: float
    depth: float
    total: float


def training_step(model: RadianceField, frames: FrameSet, bank: RayBank, frame: np.ndarray, pix: np.ndarray,
                  samples: int, weights: LossWeights, rng: np.random.Generator | None) -> StepResult:
    """Forward and backward for one ray batch; gradients land in the parameter buffers."""
    tape = Tape()
    out = render_rays(model, frames, frame, frames.appearances[frame], bank.origins[frame, pix],
                      bank.dirs[frame, pix], samples, rng, tape, WHITE)
    lc = loss_color(out.color, bank.colors[frame, pix])
    ld = loss_depth(out.depth, bank.depths[frame, pix], bank.masks[frame, pix])
    total = total_loss(lc, ld, weights)
    tape.backward(total)
    return StepResult(float(lc.value), float(ld.value), float(total.value))


@dataclass
class TrainResult:
    losses: np.ndarray  # (iterations, 3): color, depth, total
    iterations: int
    checkpoint: Path | None


def make_optimizer(model: RadianceField, config: TrainConfig) -> Adam:
    return Adam(model.params, config.learning_rates(), config.beta1, config.beta2, config.eps)


def train(model: RadianceField, dataset: SceneDataset, config: TrainConfig, out_dir=None,
          resume: Path | None = None, on_log: Callable[[int, StepResult], None] | None = None,
          frames: list[TrainingFrame] | None = None) -> TrainResult:
    """Optimize ``model`` on the training split.

    Every iteration draws its rays from a generator seeded by (seed, iteration),
    so a resumed run replays exactly the batches an uninterrupted run would see.
    """
    frames = frames if frames is not None else dataset.split("train")
    fs = frame_set(model, frames)
    bank = RayBank(frames)
    adam = make_optimizer(model, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "checkpoint.bin" if out_dir is not None else None
    if resume is not None:
        restore(model.params, load_checkpoint(resume), adam)
    start = adam.t
    history = []
    last_good = [p.values.copy() for p in model.params]
    csv = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "loss.csv"
        csv = open(csv_path, "a" if resume is not None and csv_path.exists() else "w")
        if csv.tell() == 0:
            csv.write("iteration,L_color,L_depth,total\n")
    try:
        for it in range(start, config.iterations):
            rng = np.random.default_rng([config.seed, it])
            frame, pix = bank.sample(rng, config.batch_rays, config.foreground_fraction)
            step = training_step(model, fs, bank, frame, pix, config.samples, config.loss,
                                 rng if config.jitter else None)
            if not np.isfinite(step.total):
                raise NumericAbort(it, "non-finite loss", _dump_last_good(model, last_good, ckpt))
            for snap, p in zip(last_good, model.params):
                snap[...] = p.values
            try:
                adam.step()
            except NonFiniteGradientError as err:
                raise NumericAbort(it, str(err), _dump_last_good(model, last_good, ckpt)) from err
            history.append((step.color, step.depth, step.total))
            done = it + 1
            if csv is not None and (it % config.log_every == 0 or done == config.iterations):
                csv.write(f"{it},{step.color!r},{step.depth!r},{step.total!r}\n")
                csv.flush()
            if it % config.log_every == 0:
                log.info("iter %d  color %.5f  depth %.5f  total %.5f", it, step.color, step.depth, step.total)
                if on_log is not None:
                    on_log(it, step)
            if ckpt is not None and done % config.checkpoint_every == 0:
                save_checkpoint(ckpt, model.params, adam)
    finally:
        if csv is not None:
            csv.close()
    if ckpt is not None:
        save_checkpoint(ckpt, model.params, adam)
    return TrainResult(np.array(history).reshape(-1, 3), config.iterations, ckpt)


def _dump_last_good(model: RadianceField, last_good: list[np.ndarray], ckpt: Path | None) -> Path | None:
    if ckpt is None:
        return None
    for snap, p in zip(last_good, model.params):
        p.values[...] = snap
    path = ckpt.with_name("checkpoint.last_good.bin")
    save_checkpoint(path, model.params)
    return path


@dataclass
class FrameScore:
    appearance: int
    index: int
    split: str
    psnr: float
    ssim: float


def evaluate(model: RadianceField, dataset: SceneDataset, split: str = "test", samples: int = 64,
             appearance_override: int | None = None) -> tuple[list[dict], list[FrameScore]]:
    """Render every frame of ``split`` and score it against ground truth.

    Returns metric rows (per appearance and split, then one overall row) and per-frame scores.
    """
    frames = dataset.split(split)
    if not frames:
        raise KeyError(f"split {split!r} has no frames")
    fs = frame_set(model, frames)
    scores = []
    for k, f in enumerate(frames):
        app = f.appearance if appearance_override is None else appearance_override
        rgb, _, _ = render_image(model, fs, k, app, f.camera, samples)
        scores.append(FrameScore(f.appearance, f.index, f.split, psnr(rgb, f.image), ssim(rgb, f.image)))
    rows = []
    for sp in [s for s in ("train", "test") if any(x.split == s for x in scores)]:
        for j in range(dataset.n_appearances):
            sel = [s for s in scores if s.appearance == j and s.split == sp]
            if sel:
                rows.append({"appearance": str(j), "split": sp, "psnr": float(np.mean([s.psnr for s in sel])),
                             "ssim": float(np.mean([s.ssim for s in sel]))})
    rows.append({"appearance": "all", "split": split, "psnr": float(np.mean([s.psnr for s in scores])),
                 "ssim": float(np.mean([s.ssim for s in scores]))})
    return rows, scores
