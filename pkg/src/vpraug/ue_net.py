"""Uncertainty-estimation network.

Given a candidate camera pose and a handful of nearby reference images, the
network warps the reference feature grids into the candidate view, fuses
each with an encoding of the relative pose, aggregates across references via
predicted weights into a mean/variation pair, and decodes a per-dimension
descriptor mean and variance. The scalar uncertainty of a candidate is the
mean of the per-dimension variances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, FeatureMap
from .dataset import PlaceRecord
from .geometry import (Pose, PoseFeature, bilinear_sample, pose_feature,
                       pose_feature_length, project_feature_grid, relative_pose)

VAR_FLOOR = 1e-6


class UENetError(ValueError):
    pass


@dataclass
class ReferenceSet:
    """Aligned reference records, feature maps and poses for one candidate."""

    records: list[PlaceRecord]
    feature_maps: list[FeatureMap]
    poses: list[Pose]

    def __post_init__(self):
        n = len(self.records)
        if n < 2:
            raise UENetError("reference set needs at least 2 references")
        if len(self.feature_maps) != n or len(self.poses) != n:
            raise UENetError("reference set lists are misaligned")

    @property
    def size(self) -> int:
        return len(self.records)


@dataclass
class UEPrediction:
    mu: np.ndarray
    var: np.ndarray
    scalar_uncertainty: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu).reshape(-1)
        self.var = np.asarray(self.var).reshape(-1)
        if np.any(self.var <= 0):
            raise UENetError("variance must be strictly positive")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.var))):
            raise UENetError("prediction contains non-finite values")


@dataclass
class FusedFeature:
    per_reference: np.ndarray   # (N, d)
    weights: np.ndarray         # (N, d)
    mean: np.ndarray            # (d,)
    var: np.ndarray             # (d,)


def aggregate(f: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean/variation aggregation across references.

    mean_k = (1/N) sum_i f_ik * w_ik
    var_k  = (1/(N-1)) sum_i (f_ik * w_ik - mean_k)^2
    """
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f.shape != w.shape or f.ndim != 2:
        raise UENetError(f"f and w must be matching (N, d) arrays, got {f.shape}, {w.shape}")
    n = f.shape[0]
    if n < 2:
        raise UENetError("aggregation needs N >= 2 (variance divides by N-1)")
    fw = f * w
    mean = fw.mean(axis=0)
    var = ((fw - mean) ** 2).sum(axis=0) / (n - 1)
    return mean, var


def _aggregate_torch(fw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = fw.shape[0]
    mean = fw.mean(dim=0)
    var = ((fw - mean) ** 2).sum(dim=0) / (n - 1)
    return mean, var


@dataclass
class UEConfig:
    descriptor_dim: int = 512       # D: output mu/var width
    fused_dim: int = 512            # d: per-reference fused feature width
    feature_channels: int = 64      # C of the backbone feature maps
    bands: int = 10                 # positional-encoding bands
    rotation_rep: str = "matrix"
    plane_depth: float = 1.0
    n_references: int = 5
    feat_hidden: int = 256
    out_hidden: int = 512

    @property
    def pose_feature_dim(self) -> int:
        return pose_feature_length(self.bands, self.rotation_rep)


class UENet(nn.Module):
    """Fusion and decoding MLPs over warped reference features."""

    def __init__(self, config: UEConfig, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        d, p = config.fused_dim, config.pose_feature_dim
        h = config.feat_hidden
        self.feat_proj = nn.Linear(config.feature_channels, d)
        self.mlp_feat = nn.Sequential(
            nn.Linear(d + p, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
        )
        self.head_f = nn.Linear(h, d)
        self.head_w = nn.Linear(h, d)
        oh = config.out_hidden
        self.mlp_out = nn.Sequential(
            nn.Linear(2 * d, oh), nn.ReLU(),
            nn.Linear(oh, oh), nn.ReLU(),
        )
        self.head_mu = nn.Linear(oh, config.descriptor_dim)
        self.head_var = nn.Linear(oh, config.descriptor_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p_ in self.parameters():
                if p_.dim() > 1:
                    bound = (6.0 / p_.shape[1]) ** 0.5
                    p_.uniform_(-bound, bound, generator=gen)
                else:
                    p_.uniform_(-0.01, 0.01, generator=gen)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def pool_warped(self, warped: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Masked spatial mean over valid cells: (N, H, W, C) -> (N, C)."""
        m = mask.to(warped.dtype)[..., None]
        denom = m.sum(dim=(1, 2)).clamp_min(1.0)
        return (warped * m).sum(dim=(1, 2)) / denom

    def fuse_tensors(self, warped: torch.Tensor, mask: torch.Tensor,
                     pose_feats: torch.Tensor) -> dict[str, torch.Tensor]:
        """Differentiable fusion: warped (N,H,W,C), mask (N,H,W), pose (N,P)."""
        if warped.shape[0] < 2:
            raise UENetError("fusion needs N >= 2 references")
        f_ref = self.feat_proj(self.pool_warped(warped, mask))       # (N, d)
        h = self.mlp_feat(torch.cat([f_ref, pose_feats], dim=-1))
        f_n = self.head_f(h) + f_ref                                  # residual
        w_n = nn.functional.softplus(self.head_w(h))
        mean, var = _aggregate_torch(f_n * w_n)
        return {"f": f_n, "w": w_n, "mean": mean, "var": var}

    def decode_tensors(self, mean: torch.Tensor, var: torch.Tensor):
        h = self.mlp_out(torch.cat([mean, var], dim=-1))
        mu = self.head_mu(h)
        sigma2 = nn.functional.softplus(self.head_var(h)) + VAR_FLOOR
        return mu, sigma2

    def forward(self, warped: torch.Tensor, mask: torch.Tensor,
                pose_feats: torch.Tensor):
        fused = self.fuse_tensors(warped, mask, pose_feats)
        return self.decode_tensors(fused["mean"], fused["var"])


def build_reference_set(candidate_pose: Pose, pool: list[PlaceRecord], n: int,
                        backbone: Backbone,
                        feature_cache: dict[str, FeatureMap] | None = None,
                        image_loader=None) -> ReferenceSet:
    """Pick the N pool records nearest to the candidate and extract features.

    ``image_loader`` maps a PlaceRecord to an (H, W, 3) float array; by
    default images are read from each record's image_path.
    """
    if n < 2:
        raise UENetError("N must be >= 2")
    if len(pool) < n:
        raise UENetError(f"reference pool too small: need {n}, have {len(pool)}")
    ranked = sorted(pool, key=lambda r: candidate_pose.distance_to(r.pose))
    chosen = ranked[:n]
    maps = []
    for rec in chosen:
        if feature_cache is not None and rec.id in feature_cache:
            maps.append(feature_cache[rec.id])
            continue
        img = image_loader(rec) if image_loader else load_image(rec.image_path)
        fm = backbone.extract_feature_map(img, source_id=rec.id)
        if feature_cache is not None:
            feature_cache[rec.id] = fm
        maps.append(fm)
    return ReferenceSet(records=chosen, feature_maps=maps,
                        poses=[r.pose for r in chosen])


def load_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def warp_references(refs: ReferenceSet, candidate_pose: Pose,
                    config: UEConfig) -> tuple[list[np.ndarray], list[np.ndarray],
                                               list[PoseFeature]]:
    """Warp each reference feature map into the candidate view.

    Returns warped feature arrays, their validity masks, and the pose
    features of the reference-to-candidate relative transforms.
    """
    warped, masks, pose_feats = [], [], []
    for rec, fm, ref_pose in zip(refs.records, refs.feature_maps, refs.poses):
        h, w, _ = fm.values.shape
        grid_intr = rec.intrinsics.scaled(w, h)
        rel = relative_pose(ref_pose, candidate_pose)
        coords, mask = project_feature_grid(rel, grid_intr, h, w,
                                            plane_depth=config.plane_depth)
        warped.append(bilinear_sample(fm.values, coords, mask))
        masks.append(mask)
        pose_feats.append(pose_feature(rel, bands=config.bands,
                                       rotation_rep=config.rotation_rep))
    return warped, masks, pose_feats


def _to_tensors(net: UENet, warped, masks, pose_feats):
    t_warped = torch.as_tensor(np.stack(warped), dtype=net.dtype)
    t_mask = torch.as_tensor(np.stack(masks))
    t_pose = torch.as_tensor(np.stack([p.values for p in pose_feats]),
                             dtype=net.dtype)
    return t_warped, t_mask, t_pose


def fuse(net: UENet, warped, masks, pose_feats) -> FusedFeature:
    """Numpy-facing fusion of warped references (evaluation mode)."""
    net.eval()
    with torch.no_grad():
        out = net.fuse_tensors(*_to_tensors(net, warped, masks, pose_feats))
    return FusedFeature(per_reference=out["f"].numpy(), weights=out["w"].numpy(),
                        mean=out["mean"].numpy(), var=out["var"].numpy())


def decode(net: UENet, fused: FusedFeature) -> UEPrediction:
    """Numpy-facing decoding of a fused feature (evaluation mode)."""
    net.eval()
    with torch.no_grad():
        mu, var = net.decode_tensors(
            torch.as_tensor(fused.mean, dtype=net.dtype),
            torch.as_tensor(fused.var, dtype=net.dtype))
    var_np = var.numpy()
    return UEPrediction(mu=mu.numpy(), var=var_np,
                        scalar_uncertainty=float(var_np.mean()))


def predict(net: UENet, candidate_pose: Pose, refs: ReferenceSet) -> UEPrediction:
    """Full pipeline: warp references, fuse, decode. Pure in eval mode."""
    warped, masks, pose_feats = warp_references(refs, candidate_pose, net.config)
    return decode(net, fuse(net, warped, masks, pose_feats))


def predict_tensors(net: UENet, candidate_pose: Pose, refs: ReferenceSet):
    """Differentiable prediction used by training (gradients w.r.t. net params)."""
    warped, masks, pose_feats = warp_references(refs, candidate_pose, net.config)
    return net(*_to_tensors(net, warped, masks, pose_feats))


def save_checkpoint(net: UENet, path, extra_meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path)
    cfg = net.config
    meta = {
        "descriptor_dim": cfg.descriptor_dim, "fused_dim": cfg.fused_dim,
        "feature_channels": cfg.feature_channels, "bands": cfg.bands,
        "rotation_rep": cfg.rotation_rep, "plane_depth": cfg.plane_depth,
        "n_references": cfg.n_references, "feat_hidden": cfg.feat_hidden,
        "out_hidden": cfg.out_hidden,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[UENet, dict]:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"UE checkpoint or metadata missing: {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    cfg = UEConfig(descriptor_dim=meta["descriptor_dim"], fused_dim=meta["fused_dim"],
                   feature_channels=meta["feature_channels"], bands=meta["bands"],
                   rotation_rep=meta["rotation_rep"], plane_depth=meta["plane_depth"],
                   n_references=meta["n_references"], feat_hidden=meta["feat_hidden"],
                   out_hidden=meta["out_hidden"])
    net = UENet(cfg, dtype=dtype)
    net.load_state_dict(torch.load(path, weights_only=True))
    return net, meta
