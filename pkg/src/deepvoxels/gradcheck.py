"""Finite-difference checks for every differentiable op and for the composed pipeline."""

import time
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .config import NetConfig, TrainConfig
from .data import default_intrinsics, generate_poses
from .lifting import GRU, integrate_observation
from .training import DeepVoxels, loss_total
from .voxel_grid import bilinear_sample, trilinear_sample

TOLERANCE = 1e-3
# The composed loss is O(100), so central differences carry ~1e-10 of roundoff;
# a larger step and an absolute floor keep near-zero entries from reading as noise.
PIPELINE_EPS = 1e-4
PIPELINE_ATOL = 1e-6
# The larger step can straddle a ReLU kink; entries are re-probed at a smaller one.
PIPELINE_RETRY_EPS = 1e-5


def _t(rng, *shape, away_from_zero=False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        # keeps ReLU/abs kinks further than eps from any probe
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x)


def _proj(rng, shape) -> Tensor:
    """Fixed random direction so a tensor output becomes a scalar loss."""
    return Tensor(rng.normal(size=shape))


def _scalar(fn, rng, out_shape):
    r = _proj(rng, out_shape)
    return lambda *xs: (fn(*xs) * r).sum()


def _elementwise_cases(rng) -> dict:
    cases = {}
    for kind in ("add", "sub", "mul"):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        cases[kind] = (_scalar(lambda x, y, k=kind: ad.elementwise(k, x, y), rng, (3, 4)), [a, b])
    a, b = _t(rng, 3, 4), _t(rng, 1, 4)
    cases["mul_broadcast"] = (_scalar(lambda x, y: x * y, rng, (3, 4)), [a, b])
    for kind in ("sigmoid", "tanh", "relu", "exp", "abs", "softplus", "neg"):
        a = _t(rng, 3, 4, away_from_zero=kind in ("relu", "abs"))
        cases[kind] = (_scalar(lambda x, k=kind: ad.elementwise(k, x), rng, (3, 4)), [a])
    return cases


def _structural_cases(rng) -> dict:
    cases = {}
    x = _t(rng, 2, 3, 5)
    cases["softmax"] = (_scalar(lambda v: ad.softmax(v, axis=-1), rng, (2, 3, 5)), [x])
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    cases["concat"] = (_scalar(lambda u, v: ad.concat([u, v], axis=0), rng, (6, 3)), [a, b])
    x = _t(rng, 3, 4)
    cases["reduce_sum"] = (_scalar(lambda v: ad.reduce(v, "sum", axis=1), rng, (3,)), [x])
    cases["reduce_mean"] = (_scalar(lambda v: ad.reduce(v, "mean", axis=0), rng, (4,)), [_t(rng, 3, 4)])
    cases["reshape"] = (_scalar(lambda v: v.reshape((4, 3)), rng, (4, 3)), [_t(rng, 3, 4)])
    cases["instance_norm"] = (_scalar(ad.instance_norm, rng, (2, 4, 5)), [_t(rng, 2, 4, 5)])
    return cases


def _conv_cases(rng) -> dict:
    cases = {}
    for n, conv, convt in ((2, ad.conv2d, ad.conv_transpose2d), (3, ad.conv3d, ad.conv_transpose3d)):
        size = 5 if n == 2 else 4
        for stride, pad, k in ((1, 1, 3), (2, 1, 4)):
            x, w, b = _t(rng, 2, *(size,) * n), _t(rng, 3, 2, *(k,) * n), _t(rng, 3)
            out = conv(x, w, b, stride, pad).shape
            cases[f"conv{n}d_s{stride}"] = (_scalar(lambda u, v, c, f=conv, s=stride, p=pad: f(u, v, c, s, p),
                                                    rng, out), [x, w, b])
            y, wt, bt = _t(rng, 2, *(3,) * n), _t(rng, 2, 3, *(k,) * n), _t(rng, 3)
            out = convt(y, wt, bt, stride, pad).shape
            cases[f"conv_transpose{n}d_s{stride}"] = (
                _scalar(lambda u, v, c, f=convt, s=stride, p=pad: f(u, v, c, s, p), rng, out), [y, wt, bt])
    return cases


def _sampling_cases(rng) -> dict:
    cases = {}
    vol = _t(rng, 2, 4, 4, 4)
    pts = rng.uniform(0.2, 2.8, size=(6, 3))
    cases["trilinear_sample"] = (_scalar(lambda v: trilinear_sample(v, pts), rng, (2, 6)), [vol])
    img = _t(rng, 2, 5, 5)
    pts2 = rng.uniform(0.2, 3.8, size=(6, 2))
    cases["bilinear_sample"] = (_scalar(lambda v: bilinear_sample(v, pts2), rng, (2, 6)), [img])
    return cases


def _gru_case(rng) -> dict:
    gru = GRU(2, rng)
    h, x = _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3)
    params = list(gru.params.values())
    fn = _scalar(lambda hh, xx, *_: gru.step(hh, xx), rng, (2, 3, 3, 3))
    return {"gru_step": (fn, [h, x] + params)}


def pipeline_config() -> TrainConfig:
    """The smallest configuration that exercises every stage: 4x4 images, 4^3 grid, 2 channels, D=4."""
    net = NetConfig(image_size=4, feature_map_size=4, channels=2, grid_res=4, depth_samples=4,
                    extract_width=2, extract_depth=1, render_width=2, render_depth=1, inpaint_depth=1,
                    occlusion_channels=2, occlusion_depth=1, disc_layers=1, disc_width=2)
    return TrainConfig(net=net, seed=3)


def pipeline_case(rng, occlusion: bool = True) -> tuple:
    """One full training-step loss as a function of the source image and every
    generator parameter. The prior grid state is a constant: the recurrent
    state is detached between iterations, so no gradient reaches it."""
    cfg = pipeline_config()
    cfg.net.occlusion = occlusion
    model = DeepVoxels.create(cfg, bbox=((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)))
    poses = generate_poses("hemisphere_uniform", 3, 2.5, K=default_intrinsics(4, fov_deg=45.0))
    src, t0, t1 = poses
    lift_op = model.lift_operator(src)
    ops = [model.view_operator(t0), model.view_operator(t1)]
    targets = [rng.uniform(0, 1, size=(3, 4, 4)) for _ in ops]
    image = Tensor(rng.uniform(0, 1, size=(3, 4, 4)))
    h0 = Tensor(0.5 * rng.normal(size=model.grid.features.shape))
    params = list(model.generator_params().values())
    for p in params:
        if p.ndim == 1:
            # zero biases put ReLUs fed by all-zero windows exactly on the kink
            p.data = 0.1 * rng.normal(size=p.shape)

    def loss(*_):
        model.grid.features = h0
        feats = model.extractor(image)
        h = integrate_observation(model.grid, feats, src, model.gru, lift_op=lift_op)
        fused = model.inpainter(h)
        total = None
        for op, tgt in zip(ops, targets):
            pred, depth = model.render_from_volume(fused, op)
            term = loss_total(pred, tgt) + depth.mean()
            total = term if total is None else total + term
        model.grid.features = h0
        return total

    return loss, [image] + params


def run_suite(seed: int = 0, pipeline_entries: Optional[int] = 4,
              report: Optional[Callable[[str, float], None]] = None) -> dict:
    """Max relative error per op name; ``pipeline`` covers the composed model."""
    rng = np.random.default_rng(seed)
    cases = {}
    for build in (_elementwise_cases, _structural_cases, _conv_cases, _sampling_cases, _gru_case):
        cases.update(build(rng))
    results = {}
    for name, (fn, inputs) in cases.items():
        results[name] = finite_diff_check(fn, inputs)
        if report:
            report(name, results[name])
    for name, occ in (("pipeline", True), ("pipeline_uniform_visibility", False)):
        fn, inputs = pipeline_case(rng, occ)
        results[name] = finite_diff_check(fn, inputs, eps=PIPELINE_EPS, max_entries=pipeline_entries, rng=rng,
                                          atol=PIPELINE_ATOL, retry_eps=PIPELINE_RETRY_EPS)
        if report:
            report(name, results[name])
    return results


if __name__ == "__main__":
    t = time.perf_counter()
    res = run_suite(report=lambda n, e: print(f"{n:32s} {e:.3e} {'ok' if e < TOLERANCE else 'FAIL'}"))
    print(f"{time.perf_counter() - t:.1f}s")
