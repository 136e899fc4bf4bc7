import math

import numpy as np
import pytest

from deepvoxels.autodiff import Tensor
from deepvoxels.config import NetConfig, TrainConfig
from deepvoxels.data import cube_scene, default_intrinsics, generate_poses, render_dataset
from deepvoxels.networks import Discriminator
from deepvoxels.training import (AdamState, Checkpoint, DeepVoxels, Trainer, TrainingDiverged, adam_step,
                                 bce_with_logits, evaluate, infer_view, loss_total, nearest_neighbor_image)


def tiny_config(**kw):
    net = NetConfig(image_size=16, feature_map_size=8, channels=4, grid_res=8, depth_samples=8,
                    extract_width=4, extract_depth=1, render_width=4, render_depth=1,
                    occlusion_channels=2, disc_width=4, disc_layers=2)
    return TrainConfig(net=net, log_every=0, **kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    poses = generate_poses("hemisphere_uniform", 8, 2.2, K=default_intrinsics(16))
    return render_dataset(tmp_path_factory.mktemp("train"), cube_scene(), poses, 16, supersample=1)


# -- losses ----------------------------------------------------------------------

def test_l1_loss_values():
    pred = Tensor(np.full((3, 4, 4), 0.5))
    assert loss_total(pred, pred.data).item() == 0.0
    assert loss_total(pred, pred.data + 0.1).item() == pytest.approx(20.0)
    with pytest.raises(ValueError):
        loss_total(pred, np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        loss_total(pred, pred.data, phase="both")


def test_bce_at_zero_logit():
    z = Tensor(np.zeros((1, 3, 3)))
    assert bce_with_logits(z, 1).item() == pytest.approx(math.log(2))
    assert bce_with_logits(z, 0).item() == pytest.approx(math.log(2))
    # large logits stay finite
    assert bce_with_logits(Tensor(np.full(4, 800.0)), 0).item() == pytest.approx(800.0)


# -- ADAM --------------------------------------------------------------------------

def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7]
    p = {"x": np.array([0.0])}
    state = AdamState()
    for g in grads:
        adam_step(p, {"x": np.array([g])}, state, 4e-4)
    assert p["x"][0] == pytest.approx(scalar_adam(grads, 4e-4), abs=1e-12)


def test_adam_zero_and_constant_gradient():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = AdamState()
    for _ in range(5):
        before = p["b"].copy()
        adam_step(p, {"a": np.array([0.0]), "b": np.array([3.0])}, state, 1e-3)
        assert p["b"][0] - before[0] == pytest.approx(-1e-3, rel=1e-6)
    assert p["a"][0] == 1.0
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.zeros(2)}, state, 1e-3)


# -- training loop -------------------------------------------------------------------

def test_trainer_is_deterministic(dataset):
    runs = []
    for _ in range(2):
        tr = Trainer(dataset, tiny_config(seed=5))
        tr.run(3)
        runs.append((tr.history, tr.checkpoint()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].params.items():
        np.testing.assert_array_equal(v, runs[1][1].params[k])
    np.testing.assert_array_equal(runs[0][1].features, runs[1][1].features)


def test_trainer_rejects_size_mismatch(dataset):
    cfg = tiny_config()
    cfg.net.image_size, cfg.net.feature_map_size = 32, 16
    with pytest.raises(ValueError, match="16px"):
        Trainer(dataset, cfg)


def test_generator_step_leaves_discriminator_untouched(dataset):
    tr = Trainer(dataset, tiny_config(adversarial=True))
    before = {k: p.data.copy() for k, p in tr.model.discriminator_params().items()}
    gen_before = {k: p.data.copy() for k, p in tr.model.generator_params().items()}
    tr.step()
    # both networks move in one iteration, each only from its own phase
    assert any(not np.array_equal(before[k], p.data) for k, p in tr.model.discriminator_params().items())
    assert any(not np.array_equal(gen_before[k], p.data) for k, p in tr.model.generator_params().items())


def test_gradient_isolation_between_phases():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    disc = Discriminator(cfg.net, rng)
    w = Tensor(rng.normal(size=(3, 16, 16)), requires_grad=True)
    loss_total(w * 1.0, np.zeros((3, 16, 16)), disc, "generator").backward()
    assert w.grad is not None and all(p.grad is None for p in disc.params.values())
    w.grad = None
    loss_total(w * 1.0, np.zeros((3, 16, 16)), disc, "discriminator").backward()
    assert w.grad is None and all(p.grad is not None for p in disc.params.values())


def test_nan_loss_raises(dataset):
    tr = Trainer(dataset, tiny_config())
    next(iter(tr.model.renderer.params.values())).data[...] = np.nan
    with pytest.raises(TrainingDiverged):
        tr.step()


def test_adversarial_smoke(dataset):
    tr = Trainer(dataset, tiny_config(adversarial=True, lr=1e-3))
    tr.run(50)
    h = np.array(tr.history)
    assert np.all(np.isfinite(h))
    assert h[-10:].mean() < h[:10].mean()


# -- checkpoints, inference, evaluation ----------------------------------------------

def test_checkpoint_round_trip_renders_identically(dataset, tmp_path):
    tr = Trainer(dataset, tiny_config(seed=2))
    ckpt = tr.run(2)
    ckpt.save(tmp_path / "c.dvc")
    back = Checkpoint.load(tmp_path / "c.dvc")
    assert back.iteration == 2 and back.config == ckpt.config and back.history == ckpt.history
    pose = dataset.poses[3]
    img_a, depth_a = infer_view(ckpt, pose)
    img_b, depth_b = infer_view(back, pose)
    np.testing.assert_array_equal(img_a, img_b)
    np.testing.assert_array_equal(depth_a, depth_b)
    assert img_a.shape == (3, 16, 16) and depth_a.shape == (8, 8)


def test_infer_view_does_not_mutate_grid(dataset):
    model = DeepVoxels.create(tiny_config(), dataset.meta["bbox"])
    model.grid.features = Tensor(np.random.default_rng(0).normal(size=model.grid.features.shape))
    before = model.grid.features.data.copy()
    infer_view(model, dataset.poses[0])
    np.testing.assert_array_equal(model.grid.features.data, before)


def test_checkpoint_missing_param(dataset):
    ckpt = DeepVoxels.create(tiny_config()).to_checkpoint()
    ckpt.params.pop(next(iter(ckpt.params)))
    with pytest.raises(ValueError, match="lacks"):
        ckpt.model()


def test_evaluate_perfect_oracle(dataset, tmp_path):
    ckpt = DeepVoxels.create(tiny_config()).to_checkpoint()
    lookup = {id(p): i for i, p in enumerate(dataset.poses)}
    res = evaluate(ckpt, dataset, train=dataset, render_fn=lambda pose: dataset.image(lookup[id(pose)]),
                   out_csv=tmp_path / "eval.csv")
    assert len(res.rows) == len(dataset)
    for r in res.rows:
        assert r["psnr_db"] == 100.0 and r["ssim"] == pytest.approx(1.0)
        # the nearest training view of a training view is itself
        assert r["baseline_psnr_db"] == 100.0
    assert res.mean["psnr_db"] == 100.0
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "view_id,psnr_db,ssim,baseline_psnr_db,baseline_ssim" and len(lines) == 1 + len(dataset)
    assert (tmp_path / "eval.summary.json").is_file()


def test_evaluate_mean_is_row_average(dataset):
    ckpt = DeepVoxels.create(tiny_config()).to_checkpoint()
    res = evaluate(ckpt, dataset)
    assert all(np.isfinite(r["psnr_db"]) and math.isnan(r["baseline_psnr_db"]) for r in res.rows)
    assert res.mean["psnr_db"] == pytest.approx(np.mean([r["psnr_db"] for r in res.rows]))


def test_nearest_neighbor_image_is_closest_axis(dataset):
    p = dataset.poses[4]
    np.testing.assert_array_equal(nearest_neighbor_image(dataset, p), dataset.image(4))


def test_first_loss_equals_weighted_l1_of_initial_renders(dataset):
    from deepvoxels.data import angle_matrix, sample_tuple
    from deepvoxels.lifting import integrate_observation

    cfg = tiny_config(seed=4)
    tr = Trainer(dataset, cfg)
    ref = DeepVoxels.create(cfg, dataset.meta["bbox"])
    tup = sample_tuple(dataset.poses, np.random.default_rng(cfg.seed + 1), angle_matrix(dataset.poses))
    feats = ref.extractor(Tensor(dataset.image(tup.source)))
    h = integrate_observation(ref.grid, feats, dataset.poses[tup.source], ref.gru, image_size=16)
    fused = ref.inpainter(h)
    want = 0.0
    for t in (tup.target0, tup.target1):
        pred, _ = ref.render_from_volume(fused, ref.view_operator(dataset.poses[t]))
        want += 200.0 * np.abs(pred.data - dataset.image(t)).mean()
    got = tr.step()
    assert np.isfinite(got) and got == pytest.approx(want, rel=1e-12)
