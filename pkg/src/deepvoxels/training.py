"""End-to-end training, checkpointing, novel-view inference and evaluation."""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import Tensor, no_grad
from .camera import CameraPose
from .config import NetConfig, TrainConfig
from .data import Dataset, angle_matrix, sample_tuple
from .lifting import GRU, Inpainter, LiftOperator, integrate_observation
from .metrics import psnr, ssim
from .networks import Discriminator, FeatureExtractor, Renderer
from .projection import (OcclusionNet, ViewVolumeOperator, depth_from_weights, flatten_weighted,
                         uniform_visibility)
from .voxel_grid import VoxelGrid, place_grid

logger = logging.getLogger(__name__)

DEFAULT_BBOX = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


# -- losses -----------------------------------------------------------------------
def bce_with_logits(logits: Tensor, label: float) -> Tensor:
    """Mean binary cross entropy of sigmoid(logits) against a constant label in {0, 1}."""
    if label == 1:
        return ad.softplus(-logits).mean()
    return ad.softplus(logits).mean()


def loss_total(pred: Tensor, target, disc: Optional[Discriminator] = None, phase: str = "generator",
               l1_weight: float = 200.0, adv_weight: float = 1.0) -> Tensor:
    """Weighted pixel-mean L1 plus (optionally) the adversarial cross entropy.

    In the discriminator phase ``pred`` is detached so the generator receives
    no gradient; in the generator phase the discriminator is frozen.
    """
    target = ad.as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if phase == "generator":
        loss = ad.absolute(pred - target).mean() * l1_weight
        if disc is not None:
            loss = loss + bce_with_logits(disc(pred, frozen=True), 1) * adv_weight
        return loss
    if phase == "discriminator":
        if disc is None:
            raise ValueError("discriminator phase needs a discriminator")
        return bce_with_logits(disc(target), 1) + bce_with_logits(disc(pred.detach()), 0)
    raise ValueError(f"unknown phase {phase!r}")


# -- ADAM ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected ADAM update of ``params`` (name -> ndarray)."""
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state, self.lr)


# -- model ----------------------------------------------------------------------------
class DeepVoxels:
    """All learnable pieces plus the persistent grid."""

    def __init__(self, cfg: TrainConfig, grid: VoxelGrid):
        cfg.validate()
        self.cfg = cfg
        net = cfg.net
        dt = cfg.np_dtype
        rng = np.random.default_rng(cfg.seed)
        self.grid = grid
        self.extractor = FeatureExtractor(net, rng, dt)
        self.gru = GRU(net.channels, rng, net.gru_kernel, dt)
        self.inpainter = Inpainter(net.channels, net.inpaint_depth, rng, dt)
        self.occlusion = OcclusionNet(net.channels, net.occlusion_channels, net.occlusion_depth, rng, dt)
        self.renderer = Renderer(net, rng, dt)
        self.discriminator = Discriminator(net, rng, dt)

    @classmethod
    def create(cls, cfg: TrainConfig, bbox=DEFAULT_BBOX) -> "DeepVoxels":
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
        corners = np.array([[lo[0] if i & 1 == 0 else hi[0], lo[1] if i & 2 == 0 else hi[1],
                             lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
        origin, side = place_grid(corners)
        grid = VoxelGrid.empty(origin, side, cfg.net.grid_res, cfg.net.channels, cfg.np_dtype)
        return cls(cfg, grid)

    def generator_params(self) -> dict:
        out = {}
        for prefix, mod in (("extract", self.extractor), ("gru", self.gru), ("inpaint", self.inpainter),
                            ("occlusion", self.occlusion), ("render", self.renderer)):
            for name, p in mod.params.items():
                out[f"{prefix}.{name}"] = p
        return out

    def discriminator_params(self) -> dict:
        return {f"disc.{k}": p for k, p in self.discriminator.params.items()}

    def all_params(self) -> dict:
        return {**self.generator_params(), **self.discriminator_params()}

    def view_operator(self, pose: CameraPose) -> ViewVolumeOperator:
        n = self.cfg.net
        return ViewVolumeOperator(self.grid, pose, n.feature_map_size, n.num_samples, n.image_size,
                                  self.cfg.np_dtype)

    def lift_operator(self, pose: CameraPose) -> LiftOperator:
        n = self.cfg.net
        return LiftOperator(pose, self.grid, n.image_size, n.feature_map_size, self.cfg.np_dtype)

    def render_from_volume(self, volume_features: Tensor, op: ViewVolumeOperator) -> tuple:
        """(image [3, H, W], depth [H', W']) for one camera from fused features."""
        vol = op(volume_features)
        vis = self.occlusion(vol) if self.cfg.net.occlusion else uniform_visibility(vol)
        image = self.renderer(flatten_weighted(vol, vis))
        return image, depth_from_weights(vis, vol)

    # -- checkpoints ----------------------------------------------------------------
    def to_checkpoint(self, iteration: int = 0, history=()) -> "Checkpoint":
        return Checkpoint(
            config=self.cfg,
            iteration=iteration,
            grid_origin=self.grid.origin.copy(),
            grid_side=self.grid.side,
            grid_res=tuple(self.grid.res),
            features=self.grid.features.data.astype(np.float64).copy(),
            params={k: p.data.astype(np.float64).copy() for k, p in self.all_params().items()},
            history=list(history),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "DeepVoxels":
        dt = ckpt.config.np_dtype
        grid = VoxelGrid.empty(ckpt.grid_origin, ckpt.grid_side, ckpt.grid_res, ckpt.config.net.channels, dt)
        grid.features = Tensor(ckpt.features.astype(dt))
        model = cls(ckpt.config, grid)
        params = model.all_params()
        missing = set(params) - set(ckpt.params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in params.items():
            p.data = ckpt.params[k].astype(dt).copy()
        return model


@dataclass
class Checkpoint:
    config: TrainConfig
    iteration: int
    grid_origin: np.ndarray
    grid_side: float
    grid_res: tuple
    features: np.ndarray
    params: dict
    history: list = field(default_factory=list)
    _model: Optional[DeepVoxels] = field(default=None, repr=False, compare=False)

    def model(self) -> DeepVoxels:
        if self._model is None:
            self._model = DeepVoxels.from_checkpoint(self)
        return self._model

    def save(self, path) -> None:
        arrays = {"grid/features": self.features}
        arrays.update({f"param/{k}": v for k, v in self.params.items()})
        meta = {
            "config": self.config.to_flat(),
            "iteration": self.iteration,
            "grid": {"origin": self.grid_origin.tolist(), "side": self.grid_side,
                     "res": list(self.grid_res), "channels": int(self.features.shape[0])},
            "history": self.history,
        }
        serialization.save(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = serialization.load(path)
        if meta is None or "config" not in meta:
            raise serialization.FormatError(f"{path}: checkpoint metadata missing")
        g = meta["grid"]
        return cls(
            config=TrainConfig.from_flat(meta["config"]),
            iteration=int(meta["iteration"]),
            grid_origin=np.asarray(g["origin"], dtype=np.float64),
            grid_side=float(g["side"]),
            grid_res=tuple(g["res"]),
            features=arrays["grid/features"],
            params={k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")},
            history=list(meta.get("history", [])),
        )


# -- training -----------------------------------------------------------------------------
class Trainer:
    """Runs the sample -> lift -> fuse -> project -> render -> ADAM loop on one dataset."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, model: Optional[DeepVoxels] = None):
        cfg.validate()
        if dataset.image_size != cfg.net.image_size:
            raise ValueError(f"dataset images are {dataset.image_size}px, config expects {cfg.net.image_size}px")
        self.dataset = dataset
        self.cfg = cfg
        bbox = dataset.meta.get("bbox", DEFAULT_BBOX)
        self.model = model if model is not None else DeepVoxels.create(cfg, bbox)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.poses = dataset.poses
        self.angles = angle_matrix(self.poses)
        self.gen_opt = Adam(self.model.generator_params(), cfg.lr)
        self.disc_opt = Adam(self.model.discriminator_params(), cfg.lr)
        self.iteration = 0
        self.history: list = []
        self._lift_ops: dict = {}
        self._view_ops: dict = {}
        self._images: dict = {}

    def _lift_op(self, i: int) -> LiftOperator:
        if i not in self._lift_ops:
            self._lift_ops[i] = self.model.lift_operator(self.poses[i])
        return self._lift_ops[i]

    def _view_op(self, i: int) -> ViewVolumeOperator:
        if i not in self._view_ops:
            self._view_ops[i] = self.model.view_operator(self.poses[i])
        return self._view_ops[i]

    def _image(self, i: int) -> Tensor:
        if i not in self._images:
            self._images[i] = Tensor(self.dataset.image(i).astype(self.cfg.np_dtype))
        return self._images[i]

    def step(self) -> float:
        m, cfg = self.model, self.cfg
        tup = sample_tuple(self.poses, self.rng, self.angles)
        feats = m.extractor(self._image(tup.source))
        h = integrate_observation(m.grid, feats, self.poses[tup.source], m.gru, lift_op=self._lift_op(tup.source))
        fused = m.inpainter(h)
        disc = m.discriminator if cfg.adversarial else None
        loss = None
        preds = []
        for t in (tup.target0, tup.target1):
            pred, _ = m.render_from_volume(fused, self._view_op(t))
            preds.append((pred, t))
            term = loss_total(pred, self._image(t), disc, "generator", cfg.l1_weight, cfg.adv_weight)
            loss = term if loss is None else loss + term
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}")
        self.gen_opt.zero_grad()
        loss.backward()
        self.gen_opt.step()
        if cfg.adversarial:
            self.disc_opt.zero_grad()
            d_loss = None
            for pred, t in preds:
                term = loss_total(pred, self._image(t), m.discriminator, "discriminator")
                d_loss = term if d_loss is None else d_loss + term
            d_loss.backward()
            self.disc_opt.step()
        self.iteration += 1
        self.history.append(value)
        return value

    def run(self, iterations: Optional[int] = None, checkpoint_dir=None,
            callback: Optional[Callable[["Trainer"], None]] = None) -> "Checkpoint":
        n = self.cfg.iterations if iterations is None else iterations
        start = time.perf_counter()
        for _ in range(n):
            value = self.step()
            it = self.iteration
            if self.cfg.log_every and it % self.cfg.log_every == 0:
                logger.info("iter %d loss %.4f (%.2fs/it)", it, value, (time.perf_counter() - start) / it)
            if checkpoint_dir and self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
                self.checkpoint().save(Path(checkpoint_dir) / f"ckpt_{it:06d}.dvc")
            if callback is not None:
                callback(self)
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint(self.iteration, self.history)


def train(dataset: Dataset, config: TrainConfig, checkpoint_dir=None) -> Checkpoint:
    return Trainer(dataset, config).run(checkpoint_dir=checkpoint_dir)


# -- inference / evaluation ---------------------------------------------------------------
def infer_view(ckpt, pose: CameraPose) -> tuple:
    """Render a novel view from the stored volume alone: (image [3,H,W], depth [H',W'])."""
    model = ckpt.model() if isinstance(ckpt, Checkpoint) else ckpt
    with no_grad():
        op = model.view_operator(pose)
        fused = model.inpainter(model.grid.features)
        image, depth = model.render_from_volume(fused, op)
    return image.data.astype(np.float64), depth.data.astype(np.float64)


EVAL_COLUMNS = ("view_id", "psnr_db", "ssim", "baseline_psnr_db", "baseline_ssim")


@dataclass
class EvalResult:
    rows: list  # dicts keyed by EVAL_COLUMNS

    @property
    def mean(self) -> dict:
        return {c: float(np.mean([r[c] for r in self.rows])) for c in EVAL_COLUMNS[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def summary(self) -> dict:
        return {"views": len(self.rows), "mean": self.mean}


def nearest_neighbor_image(train: Dataset, pose: CameraPose) -> np.ndarray:
    """The training image whose optical axis is closest to ``pose``'s."""
    axes = np.array([p.optical_axis for p in train.poses])
    best = int(np.argmax(axes @ pose.optical_axis))
    return train.image(best)


def evaluate(ckpt, test: Dataset, train: Optional[Dataset] = None, render_fn: Optional[Callable] = None,
             out_csv=None) -> EvalResult:
    """PSNR/SSIM of rendered test views, alongside the nearest-training-image baseline."""
    if render_fn is None:
        def render_fn(pose):
            return infer_view(ckpt, pose)[0]
    rows = []
    for i, pose in enumerate(test.poses):
        gt = test.image(i)
        pred = np.clip(render_fn(pose), 0.0, 1.0)
        row = {"view_id": i, "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt),
               "baseline_psnr_db": float("nan"), "baseline_ssim": float("nan")}
        if train is not None:
            nn = nearest_neighbor_image(train, pose)
            row["baseline_psnr_db"] = psnr(nn, gt)
            row["baseline_ssim"] = ssim(nn, gt)
        rows.append(row)
    result = EvalResult(rows)
    if out_csv is not None:
        out_csv = Path(out_csv)
        result.write_csv(out_csv)
        out_csv.with_suffix(".summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    return result
