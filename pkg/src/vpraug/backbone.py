"""Pluggable VPR feature extractor and descriptor head.

The rest of the system depends only on the small interface exposed by
``Backbone``: ``extract_feature_map``, ``describe`` and the per-run feature /
descriptor shapes. The bundled desk-scale backbone is a small convolutional
stack trainable on a CPU; adapters around external pretrained networks can
implement the same surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class BackboneError(ValueError):
    pass


@dataclass
class FeatureMap:
    """An (H, W, C) feature grid extracted from one image."""

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise BackboneError(f"feature map must be (H, W, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise BackboneError("feature map contains non-finite values")


@dataclass
class Descriptor:
    """Fixed-length retrieval descriptor."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise BackboneError("descriptor contains non-finite values")


@dataclass
class BackboneConfig:
    input_size: int = 224
    channels: int = 64
    descriptor_dim: int = 512
    normalize: bool = True

    def __post_init__(self):
        if self.input_size % 16 != 0:
            raise BackboneError("input_size must be divisible by 16")

    @property
    def feature_size(self) -> int:
        return self.input_size // 16


class DeskVprNet(nn.Module):
    """4-stage conv feature extractor with a pooling+linear descriptor head.

    The head is spatial mean pooling followed by a linear map, so the
    descriptor is invariant to permutations of feature-map cells; this is the
    documented behavior of this head.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        c = config.channels
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.Sequential(
            nn.Conv2d(3, c, 5, stride=4, padding=2), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=1, padding=1), nn.Tanh(),
        )
        self.head = nn.Linear(c, config.descriptor_dim)
        # reproducible init independent of global RNG state
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    nn.init.kaiming_uniform_(p, a=5 ** 0.5, generator=gen)
                else:
                    p.uniform_(-0.05, 0.05, generator=gen)
        self.to(dtype)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) image batch -> (B, C, H, W) feature grids."""
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise BackboneError(
                f"expected {self.config.input_size}x{self.config.input_size} input, "
                f"got {tuple(x.shape[-2:])}")
        return self.stages(x)

    def descriptor_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        pooled = feats.mean(dim=(-2, -1))
        d = self.head(pooled)
        if self.config.normalize:
            d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return d

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.descriptor_from_features(self.features(x))


def _image_to_tensor(image: np.ndarray, size: int, dtype: torch.dtype) -> torch.Tensor:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BackboneError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[0] != size or image.shape[1] != size:
        raise BackboneError(f"image must be {size}x{size}, got {image.shape[:2]}")
    t = torch.as_tensor(image.transpose(2, 0, 1), dtype=dtype)
    return t.unsqueeze(0)


class Backbone:
    """Numpy-facing wrapper used by the non-training parts of the pipeline."""

    def __init__(self, net: DeskVprNet):
        self.net = net
        self.config = net.config

    def extract_feature_map(self, image: np.ndarray, source_id: str = "") -> FeatureMap:
        dtype = next(self.net.parameters()).dtype
        self.net.eval()
        with torch.no_grad():
            feats = self.net.features(_image_to_tensor(image, self.config.input_size, dtype))
        values = feats[0].permute(1, 2, 0).numpy()
        return FeatureMap(values=values, source_id=source_id)

    def describe(self, feature_map: FeatureMap) -> Descriptor:
        dtype = next(self.net.parameters()).dtype
        self.net.eval()
        t = torch.as_tensor(feature_map.values.transpose(2, 0, 1), dtype=dtype).unsqueeze(0)
        with torch.no_grad():
            d = self.net.descriptor_from_features(t)
        return Descriptor(values=d[0].numpy(), normalized=self.config.normalize)

    def describe_image(self, image: np.ndarray) -> Descriptor:
        return self.describe(self.extract_feature_map(image))


def similarity(a: Descriptor, b: Descriptor) -> float:
    """Cosine similarity of two descriptors."""
    va, vb = a.values, b.values
    if va.shape != vb.shape:
        raise BackboneError(f"descriptor dimensions differ: {va.shape} vs {vb.shape}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def save_checkpoint(net: DeskVprNet, path) -> None:
    """Save weights plus a sidecar metadata json describing shapes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path)
    meta = {
        "descriptor_dim": net.config.descriptor_dim,
        "feature_shape": [net.config.feature_size, net.config.feature_size,
                          net.config.channels],
        "input_size": net.config.input_size,
        "normalize": net.config.normalize,
    }
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> DeskVprNet:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"checkpoint or metadata missing: {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    config = BackboneConfig(input_size=meta["input_size"],
                            channels=meta["feature_shape"][2],
                            descriptor_dim=meta["descriptor_dim"],
                            normalize=meta["normalize"])
    net = DeskVprNet(config, dtype=dtype)
    net.load_state_dict(torch.load(path, weights_only=True))
    return net
