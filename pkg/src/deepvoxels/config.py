"""Network and training configuration.

Both dataclasses are flat so they serialise to a single key/value JSON
object, which is what checkpoints and ``--config`` files contain.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class NetConfig:
    image_size: int = 64
    feature_map_size: int = 32
    channels: int = 8
    grid_res: int = 16
    depth_samples: int = 0  # 0 -> grid_res
    extract_width: int = 16
    extract_depth: int = 2
    render_width: int = 32
    render_depth: int = 2
    inpaint_depth: int = 1
    occlusion_channels: int = 4
    occlusion_depth: int = 1
    occlusion: bool = True  # False -> uniform mean over depth (ablation)
    gru_kernel: int = 3
    disc_width: int = 16
    disc_layers: int = 3
    instance_norm: bool = False  # inside the 2D U-Nets

    @property
    def num_samples(self) -> int:
        return self.depth_samples or self.grid_res

    @property
    def down_stages(self) -> int:
        ratio = self.image_size / self.feature_map_size
        n = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if n < 0 or self.feature_map_size * 2 ** n != self.image_size:
            raise ValueError(f"image_size {self.image_size} is not feature_map_size "
                             f"{self.feature_map_size} times a power of two")
        return n

    def validate(self) -> "NetConfig":
        _ = self.down_stages
        if self.gru_kernel % 2 != 1:
            raise ValueError("gru_kernel must be odd")
        if self.grid_res % 2 ** self.inpaint_depth:
            raise ValueError(f"grid_res {self.grid_res} not divisible by 2**inpaint_depth")
        for n in (self.feature_map_size, self.num_samples):
            if n % 2 ** self.occlusion_depth:
                raise ValueError(f"view volume extent {n} not divisible by 2**occlusion_depth")
        return self


@dataclass
class TrainConfig:
    lr: float = 4e-4
    l1_weight: float = 200.0
    adv_weight: float = 1.0
    adversarial: bool = False
    iterations: int = 2000
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0
    log_every: int = 100
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.l1_weight <= 0 or self.adv_weight <= 0:
            raise ValueError("lr and loss weights must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.net.validate()
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_flat(self) -> dict:
        flat = {k: v for k, v in dataclasses.asdict(self).items() if k != "net"}
        flat.update(dataclasses.asdict(self.net))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        net_keys = {f.name: f.type for f in dataclasses.fields(NetConfig)}
        train_keys = {f.name for f in dataclasses.fields(cls)} - {"net"}
        unknown = set(flat) - set(net_keys) - train_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        net = NetConfig(**{k: v for k, v in flat.items() if k in net_keys})
        return cls(net=net, **{k: v for k, v in flat.items() if k in train_keys})


def load_config_file(path) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ValueError(f"{path}: config must be a flat JSON object")
    return data
