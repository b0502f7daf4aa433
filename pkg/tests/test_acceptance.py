"""Acceptance criteria 1-8, each reported as one PASS/FAIL line in the terminal summary.

Criteria 5, 6 and the second half of 8 train real models and take most of an hour on one core.
"""
import math
import time

import numpy as np
import pytest

from conftest import central_difference, grad_mismatches, random_soup
from pav import autodiff
from pav.autodiff import Tape
from pav.encoding import HashGridConfig
from pav.field import FieldConfig, FrameSet, RadianceField
from pav.geometry import build_bvh, deformation_gradient, deformation_gradients, nearest_triangles, TriangleRef
from pav.rasterizer import rasterize_depth, ray_cast, ray_distance
from pav.renderer import composite, generate_rays, pixel_grid, render_image, render_rays, transmittance, volume_render
from pav.training import SceneConfig, TrainConfig, build_model, evaluate, frame_set, generate_synthetic_scene, train
from pav.training.loop import RayBank, training_step
from pav.training.losses import LossWeights
from test_field import octahedron
from test_geometry import brute_force_dist2

RESULTS: dict[int, tuple[bool, str]] = {}

OVERFIT_SCENE = SceneConfig(appearances=1, frames=20, test_frames=0, image_size=64)
OVERFIT_TRAIN = TrainConfig(iterations=3000, batch_rays=1024, samples=48)
ABLATION_SCENE = SceneConfig(appearances=3, frames=20, test_frames=4, image_size=64)
ABLATION_TRAIN = TrainConfig(iterations=3000, batch_rays=1024, samples=48)
ABLATIONS = {"full": {}, "none": {"embedding": "none"}, "no_offset": {"density_offset": False},
             "no_lnf": {"embedding": "glo"}}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# -- 1: gradients ------------------------------------------------------------------------

def _random_field(rng, n_app=2) -> RadianceField:
    levels = int(rng.integers(1, 4))
    grid = HashGridConfig(levels=levels, log2_table_size=int(rng.integers(5, 8)), features_per_level=2,
                          base_resolution=int(rng.integers(2, 5)), finest_resolution=int(rng.integers(6, 12)))
    width = lambda: tuple(int(w) for w in rng.integers(3, 8, size=rng.integers(1, 3)))
    cfg = FieldConfig(grid=grid, texture_resolution=int(rng.integers(4, 9)), texture_channels=int(rng.integers(2, 5)),
                      expression_dim=2, direction_frequencies=int(rng.integers(1, 3)), density_hidden=width(),
                      offset_hidden=width(), color_hidden=width(), dtype="float64")
    model = RadianceField(cfg, octahedron(rng), n_app, seed=int(rng.integers(1 << 16)))
    model.grid.table.values[...] = rng.normal(scale=0.5, size=model.grid.table.shape)
    for t in model.textures:
        t.values[...] = rng.normal(scale=0.5, size=t.values.shape)
    # nonzero biases keep pre-activations off the ReLU kink at exactly zero
    for p in model.params:
        if p.name.endswith(".bias"):
            p.values[...] = rng.normal(scale=0.3, size=p.shape)
    return model


class KinkWatch:
    """Records every ReLU mask of a forward pass so FD intervals that cross a kink can be recognized."""

    def __init__(self, monkeypatch):
        self.masks: list[np.ndarray] = []
        relu = autodiff.ACTIVATIONS["relu"]

        def watched(x):
            self.masks.append(x.value > 0)
            return relu(x)

        monkeypatch.setitem(autodiff.ACTIVATIONS, "relu", watched)

    def run(self, f):
        self.masks = []
        value, signs = f()
        return value, [m.copy() for m in self.masks] + [signs]


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _micro_scene_check(model, rng, watch: KinkWatch, step: float = 1e-3) -> tuple[int, int, int, set]:
    canon = model.canonical
    deformed = canon.with_vertices(canon.vertices * rng.uniform(0.95, 1.05) + rng.normal(scale=0.02, size=3))
    frames = FrameSet(canon, [canon, deformed], rng.normal(size=(2, 2)), [0, 1])
    o = np.array([[0, 0, 2.0]] * 4)
    d = np.column_stack([rng.uniform(-0.15, 0.15, size=(4, 2)), -np.ones(4)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    fid = np.array([0, 1, 0, 1])
    target, target_depth = rng.random((4, 3)), rng.uniform(1.4, 1.8, 4)

    def forward(tape):
        out = render_rays(model, frames, fid, frames.appearances[fid], o, d, 6, None, tape)
        value = 50 * ((out.color.value - target) ** 2).sum(1).mean() + 10 * np.abs(out.depth.value - target_depth).mean()
        return out, value, out.depth.value > target_depth

    def loss():
        _, value, signs = forward(Tape())
        return value, signs

    tape = Tape()
    out, _, _ = forward(tape)
    tape.backward([out.color, out.depth], [100 * (out.color.value - target) / 4,
                                           10 * np.sign(out.depth.value - target_depth) / 4])
    _, base = watch.run(loss)
    checked = bad = skipped = 0
    touched = set()
    for p in model.params:
        flat, g = p.values.reshape(-1), p.grad.reshape(-1)
        nz = np.flatnonzero(g)
        if len(nz):
            touched.add(p.name.split(".")[0])
        idx = np.unique(np.concatenate([rng.choice(nz, min(len(nz), 12), replace=False) if len(nz) else [],
                                        rng.integers(len(flat), size=3)]).astype(int))
        for i in idx:
            pattern = []

            def f():
                value, kinks = watch.run(loss)
                pattern.append(kinks)
                return value

            num = central_difference(f, flat, int(i), step)
            if not all(_same(k, base) for k in pattern):
                skipped += 1  # a ReLU or |H - D| kink lies inside the FD interval
                continue
            bad += len(grad_mismatches([g[i]], [num], rel=1e-3, abs_tol=1e-6))
            checked += 1
    return checked, bad, skipped, touched


def test_criterion_1_gradient_suite(monkeypatch):
    t0 = time.perf_counter()
    watch = KinkWatch(monkeypatch)
    rng = np.random.default_rng(2024)
    checked = bad = skipped = 0
    touched = set()
    for _ in range(4):
        c, b, k, t = _micro_scene_check(_random_field(rng), rng, watch)
        checked, bad, skipped, touched = checked + c, bad + b, skipped + k, touched | t
    elapsed = time.perf_counter() - t0
    covers = {"hashgrid", "mlp_density", "mlp_offset", "mlp_color", "texture"} <= touched
    rare = skipped <= 0.1 * (checked + skipped)
    record(1, bad == 0 and covers and rare and elapsed < 60,
           f"{checked} entries over 4 random configs, {bad} mismatches, {skipped} skipped at kinks, "
           f"all parts covered={covers}, {elapsed:.1f}s")


# -- 2: BVH ------------------------------------------------------------------------------

def test_criterion_2_bvh_oracle():
    rng = np.random.default_rng(7)
    warm = random_soup(rng, 8)
    nearest_triangles(build_bvh(warm), warm, rng.normal(size=(4, 3)))  # compile outside the timed region
    mesh = random_soup(rng, 500)
    points = rng.uniform(-1.5, 1.5, size=(1000, 3))
    t0 = time.perf_counter()
    tri, _, d2 = nearest_triangles(build_bvh(mesh), mesh, points)
    elapsed = time.perf_counter() - t0
    wrong = 0
    for p, t, d in zip(points, tri, d2):
        ref = brute_force_dist2(mesh, p)
        best = ref.argmin()
        ok = (t == best or abs(ref[t] - ref[best]) <= 1e-9) and abs(d - ref[best]) <= 1e-9
        wrong += not ok
    record(2, wrong == 0 and elapsed < 5, f"{wrong}/1000 disagree with brute force, build+query {elapsed:.3f}s")


# -- 3: deformation gradient ---------------------------------------------------------------

def test_criterion_3_deformation_gradient():
    rng = np.random.default_rng(11)
    canon = rng.normal(size=(1000, 3, 3))
    deformed = rng.normal(size=(1000, 3, 3))
    f = deformation_gradients(deformed, canon)
    homog = np.concatenate([deformed, np.ones((1000, 3, 1))], axis=2)
    mapped = np.einsum("nij,nkj->nki", f, homog)[..., :3]
    err = np.abs(mapped - canon).max()
    ref = TriangleRef.of(random_soup(rng, 1), 0)
    identity = np.array_equal(deformation_gradient(ref, ref), np.eye(4))
    record(3, err <= 1e-6 and identity, f"max vertex error {err:.2e} over 1000 pairs, identity exact={identity}")


# -- 4: volume rendering ---------------------------------------------------------------------

def test_criterion_4_volume_rendering():
    bg = np.array([0.1, 0.5, 0.9])
    empty = volume_render([(1.0, 0.0, (0.2, 0.3, 0.4)), (2.0, 0.0, (1, 1, 1))], bg)
    zero_ok = np.array_equal(empty.color, bg) and empty.opacity == 0
    two = volume_render([(1.0, 1.0, (1, 0, 0)), (1.5, 2.0, (0, 1, 0))], np.zeros(3), far=2.0)
    a1, a2 = 1 - math.exp(-0.5), 1 - math.exp(-1.0)
    w1, w2 = a1, (1 - a1) * a2
    two_err = max(np.abs(two.color - [w1, w2, 0]).max(), abs(two.opacity - (w1 + w2)),
                  abs(two.depth - (w1 + 1.5 * w2) / (w1 + w2)))
    rng = np.random.default_rng(5)
    n, s = 10_000, 16
    t = np.sort(rng.uniform(0.5, 4.0, size=(n, s)), axis=1) + np.arange(s) * 1e-4
    far = t[:, -1] + rng.uniform(0.01, 0.5, n)
    sigma = rng.exponential(1.0, size=(n, s)) * rng.choice([0.0, 0.1, 1.0, 100.0], size=(n, 1))
    trans, w = transmittance(sigma, t, far)
    total = w.sum(axis=1)
    weights_ok = bool(np.all(w >= 0) and np.all(total >= 0) and np.all(total <= 1 + 1e-12))
    monotone = bool(np.all(np.diff(trans, axis=1) <= 0))
    out = composite(t, far, Tape().constant(sigma), Tape().constant(rng.random((n, s, 3))), bg).value
    acc_ok = bool(np.allclose(out[:, 4], total, atol=1e-12))
    ok = zero_ok and two_err <= 1e-6 and weights_ok and monotone and acc_ok
    record(4, ok, f"zero density ok={zero_ok}, two-sample error {two_err:.1e}, "
                  f"1e4 rays: sum w in [0,1]={weights_ok}, T monotone={monotone}")


# -- 5 and 8b: overfit -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit():
    data = generate_synthetic_scene(seed=0, config=OVERFIT_SCENE)
    model = build_model(data, FieldConfig())
    t0 = time.perf_counter()
    result = train(model, data, OVERFIT_TRAIN)
    elapsed = time.perf_counter() - t0
    return data, model, result, elapsed


def test_criterion_5_overfit(overfit):
    data, model, result, elapsed = overfit
    rows, _ = evaluate(model, data, "train", samples=OVERFIT_TRAIN.samples)
    score = rows[-1]["psnr"]
    record(5, score >= 28.0 and result.iterations <= 3000,
           f"train PSNR {score:.2f} dB after {result.iterations} iterations ({elapsed / 60:.1f} min)")


def test_overfit_loss_trend(overfit):
    """500-iteration window means of the total loss never rise by more than 5%."""
    _, _, result, _ = overfit
    total = result.losses[:, 2]
    blocks = total[: len(total) // 500 * 500].reshape(-1, 500).mean(axis=1)
    assert len(blocks) >= 2
    assert np.all(blocks[1:] <= 1.05 * blocks[:-1]), blocks


# -- 6: ablation -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation():
    data = generate_synthetic_scene(seed=1, config=ABLATION_SCENE)
    scores = {}
    for name, kw in ABLATIONS.items():
        model = build_model(data, FieldConfig(**kw))
        train(model, data, ABLATION_TRAIN)
        rows, _ = evaluate(model, data, "test", samples=ABLATION_TRAIN.samples)
        scores[name] = rows[-1]["psnr"]
    return scores


def test_criterion_6_ablation(ablation):
    s = ablation
    gain = s["full"] - s["none"]
    ok = gain >= 2.0 and s["full"] >= s["no_offset"] - 0.3 and s["full"] >= s["no_lnf"] - 0.3
    record(6, ok, "held-out PSNR " + ", ".join(f"{k} {v:.2f}" for k, v in s.items()) + f"; full - none {gain:+.2f} dB")


# -- 7: gradient isolation ------------------------------------------------------------------

@pytest.mark.parametrize("embedding", ["lnf", "glo"])
def test_criterion_7_gradient_isolation(embedding):
    data = generate_synthetic_scene(seed=3, config=SceneConfig(appearances=3, frames=3, test_frames=0,
                                                               image_size=16, lat_segments=6, lon_segments=8))
    model = build_model(data, FieldConfig(grid=HashGridConfig(levels=2, log2_table_size=8, base_resolution=4,
                                                              finest_resolution=16),
                                          texture_resolution=8, embedding=embedding))
    frames = data.split("train")
    fs, bank = frame_set(model, frames), RayBank(frames)
    rng = np.random.default_rng(0)
    leaks = 0
    for j in range(3):
        for p in model.params:
            p.grad[...] = 0
        frame = rng.choice([k for k, f in enumerate(frames) if f.appearance == j], 128)
        training_step(model, fs, bank, frame, rng.integers(bank.n_pixels, size=128), 8, LossWeights(), rng)
        per_app = model.textures if embedding == "lnf" else model.glo
        grads = [np.abs(e.param.grad).sum() for e in per_app]
        leaks += sum(g != 0 for k, g in enumerate(grads) if k != j)
        assert grads[j] > 0
    prior = RESULTS.get(7, (True, ""))
    ok = prior[0] and leaks == 0
    detail = (prior[1] + "; " if prior[1] else "") + f"{embedding}: {leaks} nonzero foreign gradients"
    record(7, ok, detail)


# -- 8: depth consistency --------------------------------------------------------------------

def test_criterion_8_depth_consistency(overfit):
    data, model, _, _ = overfit
    agree = covered = 0
    for f in data.frames[:5]:
        dm = rasterize_depth(f.mesh, f.camera)
        o, d = generate_rays(f.camera, pixel_grid(f.camera.width, f.camera.height))
        dist, _, _ = ray_cast(f.mesh, o, d)
        dist = dist.reshape(dm.depth.shape)
        either = dm.mask | np.isfinite(dist)
        close = dm.mask & np.isfinite(dist) & (np.abs(ray_distance(dm, f.camera) - dist) <= 1e-3)
        agree += int(close.sum())
        covered += int(either.sum())
    share = agree / covered
    fs = frame_set(model, data.frames)
    errors = []
    for k, f in enumerate(data.frames):
        _, h, _ = render_image(model, fs, k, f.appearance, f.camera, OVERFIT_TRAIN.samples)
        errors.append(np.abs(h[f.mask] - f.ray_depth()[f.mask]))
    depth_err = float(np.concatenate(errors).mean())
    record(8, share >= 0.99 and depth_err <= 0.05,
           f"raster vs ray cast agree at {100 * share:.2f}% of covered pixels; mean |H - D| {depth_err:.4f}")
