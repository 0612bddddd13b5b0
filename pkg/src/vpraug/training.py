"""Losses and training loops.

The uncertainty network is trained self-supervised: each real record plays
the candidate, its N nearest other records are the references, and the
network's (mu, var) prediction is scored with a logistic-normal negative
log-likelihood against the record's own frozen-backbone descriptor,
normalized per-dimension into (0, 1). The retrieval network trains with a
standard triplet loss over mined triplets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, Descriptor, DeskVprNet
from .dataset import DatasetView, PlaceRecord, mine_triplets
from .ue_net import (UEConfig, UENet, ReferenceSet, _to_tensors,
                     build_reference_set, predict_tensors, warp_references)


class TrainingError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-5
    lr_decay: float = 0.99
    weight_decay: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise TrainingError("learning rate and decay must be positive")


@dataclass
class TrainConfig:
    vpr: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=1e-5, lr_decay=0.99, weight_decay=1e-3, batch_size=8))
    ue: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        lr=1e-5, lr_decay=0.999))
    patience: int = 10
    seed: int = 0
    triplet_margin: float = 0.1
    negatives_per_anchor: int = 5
    max_epochs: int = 100
    ue_epochs: int = 30

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")


class NormalizationStats:
    """Per-dimension min-max normalization into [eps, 1 - eps]."""

    def __init__(self, epsilon: float = 1e-3):
        self.epsilon = epsilon
        self.min: np.ndarray | None = None
        self.max: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.min is not None

    def fit(self, descriptors: list[np.ndarray]) -> "NormalizationStats":
        arr = np.stack([np.asarray(d).reshape(-1) for d in descriptors])
        self.min = arr.min(axis=0)
        self.max = arr.max(axis=0)
        degenerate = self.max - self.min < 1e-12
        # collapse-free range for constant dimensions
        self.max = np.where(degenerate, self.min + 1.0, self.max)
        return self

    def normalize(self, d: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("normalization stats not fitted")
        d = np.asarray(d).reshape(-1)
        y = (d - self.min) / (self.max - self.min)
        return np.clip(y, self.epsilon, 1.0 - self.epsilon)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("normalization stats not fitted")
        return np.asarray(y).reshape(-1) * (self.max - self.min) + self.min

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"epsilon": self.epsilon,
                       "min": self.min.tolist(), "max": self.max.tolist()}, f)

    @staticmethod
    def load(path) -> "NormalizationStats":
        with open(path) as f:
            doc = json.load(f)
        stats = NormalizationStats(epsilon=doc["epsilon"])
        stats.min = np.asarray(doc["min"], dtype=np.float64)
        stats.max = np.asarray(doc["max"], dtype=np.float64)
        return stats


def normalize_descriptor(d: Descriptor | np.ndarray,
                         stats: NormalizationStats) -> np.ndarray:
    values = d.values if isinstance(d, Descriptor) else d
    return stats.normalize(values)


def nll_loss(y: np.ndarray, mu: np.ndarray, var: np.ndarray) -> float:
    """Logistic-normal negative log-likelihood, summed over dimensions.

    sum_i [ 0.5 log(var_i) + log(y_i (1 - y_i)) + (logit(y_i) - mu_i)^2 / (2 var_i) ]

    The additive 0.5*log(2*pi) constant is omitted. ``y`` must lie strictly
    in (0, 1) and ``var`` must be positive.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    var = np.asarray(var, dtype=np.float64).reshape(-1)
    if y.shape != mu.shape or y.shape != var.shape:
        raise TrainingError("y, mu, var must have matching shapes")
    if np.any(y <= 0) or np.any(y >= 1):
        raise TrainingError("y must lie strictly in (0, 1)")
    if np.any(var <= 0):
        raise TrainingError("var must be strictly positive")
    logit = np.log(y / (1.0 - y))
    terms = 0.5 * np.log(var) + np.log(y * (1.0 - y)) + (logit - mu) ** 2 / (2.0 * var)
    return float(terms.sum())


def nll_loss_torch(y: torch.Tensor, mu: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    logit = torch.log(y / (1.0 - y))
    terms = 0.5 * torch.log(var) + torch.log(y * (1.0 - y)) + (logit - mu) ** 2 / (2.0 * var)
    return terms.sum()


def nll_grad(y: np.ndarray, mu: np.ndarray, var: np.ndarray):
    """Analytic gradients of nll_loss w.r.t. mu and var (per dimension)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    var = np.asarray(var, dtype=np.float64).reshape(-1)
    logit = np.log(y / (1.0 - y))
    d_mu = -(logit - mu) / var
    d_var = 0.5 / var - (logit - mu) ** 2 / (2.0 * var ** 2)
    return d_mu, d_var


def triplet_loss(anchor: np.ndarray, positive: np.ndarray,
                 negatives: list[np.ndarray], margin: float) -> float:
    """Hinge triplet loss with squared-Euclidean distances, summed over negatives."""
    if margin <= 0:
        raise TrainingError("margin must be positive")
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    p = np.asarray(positive, dtype=np.float64).reshape(-1)
    d_ap = float(np.sum((a - p) ** 2))
    total = 0.0
    for n in negatives:
        n = np.asarray(n, dtype=np.float64).reshape(-1)
        d_an = float(np.sum((a - n) ** 2))
        total += max(0.0, margin + d_ap - d_an)
    return total


def triplet_loss_torch(anchor: torch.Tensor, positive: torch.Tensor,
                       negatives: torch.Tensor, margin: float) -> torch.Tensor:
    d_ap = ((anchor - positive) ** 2).sum()
    d_an = ((anchor[None, :] - negatives) ** 2).sum(dim=1)
    return torch.clamp(margin + d_ap - d_an, min=0.0).sum()


def early_stop(history: list[float], patience: int) -> bool:
    """True iff the best (highest) score occurred more than ``patience``
    entries before the end of the history."""
    if patience < 1:
        raise TrainingError("patience must be >= 1")
    if not history:
        return False
    best_idx = int(np.argmax(history))
    return (len(history) - 1 - best_idx) > patience


class MetricsLogger:
    """Append-only line-delimited metrics stream."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, **row) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")


def compute_descriptors(net: DeskVprNet, records: list[PlaceRecord],
                        image_loader, batch_size: int = 16) -> dict[str, np.ndarray]:
    """Frozen forward pass over records; returns id -> descriptor array."""
    net.eval()
    dtype = next(net.parameters()).dtype
    out = {}
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            imgs = torch.stack([
                torch.as_tensor(np.asarray(image_loader(r)).transpose(2, 0, 1),
                                dtype=dtype)
                for r in chunk])
            descs = net(imgs).numpy()
            for r, d in zip(chunk, descs):
                out[r.id] = d
    return out


def default_image_loader(record: PlaceRecord) -> np.ndarray:
    from .ue_net import load_image
    return load_image(record.image_path)


class AccessLoggingLoader:
    """Image loader wrapper that records which record ids were read."""

    def __init__(self, loader=default_image_loader):
        self.loader = loader
        self.accessed: set[str] = set()

    def __call__(self, record: PlaceRecord) -> np.ndarray:
        self.accessed.add(record.id)
        return self.loader(record)


def train_vpr_epoch(net: DeskVprNet, optimizer: torch.optim.Optimizer,
                    view: DatasetView, config: TrainConfig, epoch: int,
                    image_loader=default_image_loader,
                    tau_neg: float | None = None) -> dict:
    """One pass over mined triplets; returns {loss, triplets, steps, lr, skipped}.

    Applies the per-epoch learning-rate decay at the end of the pass.
    """
    if tau_neg is None:
        tau_neg = 2.0 * view.positive_threshold
    triplets, skipped = mine_triplets(view, config.negatives_per_anchor, tau_neg,
                                      seed=config.seed + epoch)
    if not triplets:
        raise TrainingError(
            "no minable triplets; lower tau_pos or run augmentation first")
    by_id = {r.id: r for r in view.queries + view.database}
    dtype = next(net.parameters()).dtype

    def tensor_image(rid):
        arr = np.asarray(image_loader(by_id[rid])).transpose(2, 0, 1)
        return torch.as_tensor(arr, dtype=dtype)

    net.train()
    total_loss = 0.0
    steps = 0
    bs = config.vpr.batch_size
    for start in range(0, len(triplets), bs):
        batch = triplets[start:start + bs]
        optimizer.zero_grad()
        batch_loss = None
        for trip in batch:
            imgs = [tensor_image(trip.anchor), tensor_image(trip.positive)]
            imgs += [tensor_image(n) for n in trip.negatives]
            descs = net(torch.stack(imgs))
            if len(trip.negatives) == 0:
                continue
            loss = triplet_loss_torch(descs[0], descs[1], descs[2:],
                                      config.triplet_margin)
            batch_loss = loss if batch_loss is None else batch_loss + loss
        if batch_loss is None:
            continue
        batch_loss = batch_loss / len(batch)
        batch_loss.backward()
        optimizer.step()
        total_loss += float(batch_loss.detach())
        steps += 1

    for group in optimizer.param_groups:
        group["lr"] *= config.vpr.lr_decay
    return {
        "loss": total_loss / max(steps, 1),
        "triplets": len(triplets),
        "skipped": skipped,
        "steps": steps,
        "lr": optimizer.param_groups[0]["lr"],
    }


def make_vpr_optimizer(net: DeskVprNet, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=config.vpr.lr,
                            weight_decay=config.vpr.weight_decay)


def _reference_pool_without(records: list[PlaceRecord], rid: str) -> list[PlaceRecord]:
    return [r for r in records if r.id != rid]


def train_ue(backbone: Backbone, ue_net: UENet, train_records: list[PlaceRecord],
             val_records: list[PlaceRecord], config: TrainConfig,
             image_loader=default_image_loader,
             logger: MetricsLogger | None = None):
    """Self-supervised UE training against frozen-backbone descriptors.

    Returns (best state_dict, NormalizationStats, history of validation NLL).
    The backbone stays frozen throughout; normalization stats are fitted on
    the training-split descriptors.
    """
    n_refs = ue_net.config.n_references
    if len(train_records) < n_refs + 1:
        raise TrainingError(
            f"UE training needs at least {n_refs + 1} records, have {len(train_records)}")

    desc = compute_descriptors(backbone.net, train_records + val_records,
                               image_loader)
    stats = NormalizationStats().fit([desc[r.id] for r in train_records])

    feature_cache: dict = {}

    def make_samples(records, pool):
        # poses never change during training, so each sample's warped
        # reference tensors are computed once up front
        samples = []
        for rec in records:
            refs = build_reference_set(
                rec.pose, _reference_pool_without(pool, rec.id), n_refs,
                backbone, feature_cache=feature_cache, image_loader=image_loader)
            y = torch.as_tensor(stats.normalize(desc[rec.id]), dtype=ue_net.dtype)
            tensors = _to_tensors(ue_net,
                                  *warp_references(refs, rec.pose, ue_net.config))
            samples.append((rec, refs, y, tensors))
        return samples

    train_samples = make_samples(train_records, train_records)
    val_samples = make_samples(val_records, train_records) if val_records else []

    optimizer = torch.optim.Adam(ue_net.parameters(), lr=config.ue.lr,
                                 weight_decay=config.ue.weight_decay)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    best_state = {k: v.clone() for k, v in ue_net.state_dict().items()}
    best_score = -math.inf

    for epoch in range(config.ue_epochs):
        order = rng.permutation(len(train_samples))
        ue_net.train()
        epoch_loss = 0.0
        for idx in order:
            _, _, y, tensors = train_samples[int(idx)]
            optimizer.zero_grad()
            mu, var = ue_net(*tensors)
            loss = nll_loss_torch(y, mu, var)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
        for group in optimizer.param_groups:
            group["lr"] *= config.ue.lr_decay

        eval_samples = val_samples or train_samples
        val_nll = evaluate_ue_nll(ue_net, eval_samples)
        history.append(val_nll)
        if logger:
            logger.log(epoch=epoch, split="val", loss=val_nll,
                       train_loss=epoch_loss / len(train_samples),
                       lr=optimizer.param_groups[0]["lr"])
        score = -val_nll
        if score > best_score:
            best_score = score
            best_state = {k: v.clone() for k, v in ue_net.state_dict().items()}
        if early_stop([-h for h in history], config.patience):
            break

    ue_net.load_state_dict(best_state)
    return best_state, stats, history


def evaluate_ue_nll(ue_net: UENet, samples) -> float:
    """Mean NLL over (record, references, normalized target, ...) samples.

    A fourth element, if present, holds precomputed warp tensors.
    """
    ue_net.eval()
    total = 0.0
    with torch.no_grad():
        for rec, refs, y, *rest in samples:
            if rest:
                mu, var = ue_net(*rest[0])
            else:
                mu, var = predict_tensors(ue_net, rec.pose, refs)
            total += float(nll_loss_torch(y, mu, var))
    return total / max(len(samples), 1)
