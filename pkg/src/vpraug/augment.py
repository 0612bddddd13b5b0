"""Uncertainty-guided synthetic-view augmentation loop.

After each training epoch: find queries the retrieval model gets wrong,
sample candidate poses around each failure, score every candidate's
descriptor uncertainty with the UE network (using the failure query's
nearest real images as references), render the top-K most uncertain
candidates, and insert the renders into the dataset as synthetic records.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, DeskVprNet
from .dataset import (ConfigurationError, DatasetView, PlaceRecord, RecordStore,
                      insert_synthetic, pose_distance)
from .evaluation import retrieve
from .geometry import Pose, rotation_about_axis
from .renderer import RenderRequest
from .training import compute_descriptors, default_image_loader
from .ue_net import UENet, build_reference_set, predict


class AugmentError(ValueError):
    pass


@dataclass
class FailureCase:
    query_id: str
    query_pose: Pose
    top1_id: str
    top1_distance: float


@dataclass
class CandidatePose:
    pose: Pose
    parent_query: str
    uncertainty: float = float("nan")
    selected: bool = False


@dataclass
class AugmentConfig:
    m_candidates: int = 20
    k_selected: int = 3
    n_references: int = 5
    translation_radius: float | None = None   # default 0.5 * tau_pos
    rotation_max_deg: float = 15.0
    retention: str = "keep_all"
    use_ue: bool = True

    def __post_init__(self):
        if not (1 <= self.k_selected <= self.m_candidates):
            raise AugmentError("need 1 <= K <= M")
        if self.n_references < 2:
            raise AugmentError("need N >= 2 references")

    def radius(self, tau_pos: float) -> float:
        return self.translation_radius if self.translation_radius is not None \
            else 0.5 * tau_pos


def detect_failures(net: DeskVprNet, view: DatasetView,
                    image_loader=default_image_loader,
                    descriptors: dict[str, np.ndarray] | None = None) -> list[FailureCase]:
    """Queries whose top-1 retrieval lies beyond the positive threshold."""
    if not view.database:
        raise AugmentError("database is empty")
    if descriptors is None:
        descriptors = compute_descriptors(net, view.queries + view.database,
                                          image_loader)
    db = [(r.id, descriptors[r.id]) for r in view.database]
    by_id = {r.id: r for r in view.database}
    failures = []
    for q in view.queries:
        res = retrieve(descriptors[q.id], db, top_n=1, query_id=q.id)
        top1 = by_id[res.ranked_ids[0]]
        dist = pose_distance(q, top1)
        if dist > view.positive_threshold:
            failures.append(FailureCase(query_id=q.id, query_pose=q.pose,
                                        top1_id=top1.id, top1_distance=dist))
    return failures


def sample_candidates(failure: FailureCase, config: AugmentConfig,
                      tau_pos: float, seed: int) -> list[CandidatePose]:
    """Sample M poses near the failure pose, deterministic under ``seed``.

    Translations are uniform in the ball of the configured radius; rotations
    perturb the parent orientation about a uniformly random axis by an angle
    uniform in [0, rotation_max].
    """
    rng = np.random.default_rng(seed)
    r_t = config.radius(tau_pos)
    theta_max = math.radians(config.rotation_max_deg)
    out = []
    for _ in range(config.m_candidates):
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        radius = r_t * rng.random() ** (1.0 / 3.0)
        t = failure.query_pose.translation + radius * direction
        axis = rng.normal(size=3)
        angle = theta_max * rng.random()
        R = failure.query_pose.rotation @ rotation_about_axis(axis, angle)
        out.append(CandidatePose(pose=Pose(R, t), parent_query=failure.query_id))
    return out


def score_candidates(candidates: list[CandidatePose], failure: FailureCase,
                     ue_net: UENet | None, backbone: Backbone,
                     pool: list[PlaceRecord], use_ue: bool = True,
                     feature_cache: dict | None = None,
                     image_loader=default_image_loader,
                     seed: int = 0) -> list[CandidatePose]:
    """Fill each candidate's scalar uncertainty in place and return the list.

    The reference set is the failure query's N nearest real images, shared by
    all of that failure's candidates. With ``use_ue`` false (the ablation
    baseline), scores are uniform random.
    """
    if not use_ue:
        rng = np.random.default_rng(seed)
        for c in candidates:
            c.uncertainty = float(rng.random())
        return candidates
    if ue_net is None:
        raise ConfigurationError("use_ue is enabled but no UE model is loaded")
    refs = build_reference_set(failure.query_pose, pool, ue_net.config.n_references,
                               backbone, feature_cache=feature_cache,
                               image_loader=image_loader)
    for c in candidates:
        c.uncertainty = predict(ue_net, c.pose, refs).scalar_uncertainty
    return candidates


def select_top_k(candidates: list[CandidatePose], k: int) -> list[CandidatePose]:
    """The K highest-uncertainty candidates; ties break by index ascending."""
    if k > len(candidates):
        raise AugmentError(f"K={k} exceeds candidate count {len(candidates)}")
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].uncertainty, i))[:k]
    chosen = []
    for i in sorted(order):
        candidates[i].selected = True
        chosen.append(candidates[i])
    return chosen


def augmentation_epoch(vpr_net: DeskVprNet, ue_net: UENet | None,
                       store: RecordStore, renderer, config: AugmentConfig,
                       epoch: int, view: DatasetView,
                       backbone: Backbone | None = None,
                       image_loader=default_image_loader,
                       seed: int = 0,
                       descriptors: dict[str, np.ndarray] | None = None,
                       feature_cache: dict | None = None,
                       diagnostics_path=None) -> dict:
    """Run detect -> sample -> score -> select -> render -> insert.

    ``renderer`` is a callable RenderRequest -> list[RenderResult]. The
    renders of all failures are inserted in one batch with the configured
    retention; a renderer failure leaves the store unchanged.
    Returns {"failures": L, "rendered": L*K, "inserted": count}.
    """
    failures = detect_failures(vpr_net, view, image_loader=image_loader,
                               descriptors=descriptors)
    if not failures:
        return {"failures": 0, "rendered": 0, "inserted": 0}
    if backbone is None and config.use_ue:
        backbone = Backbone(vpr_net)
    pool = store.real_records()
    selected_all = []
    diag_rows = []
    for fi, failure in enumerate(failures):
        candidates = sample_candidates(failure, config, view.positive_threshold,
                                       seed=seed * 100003 + epoch * 1009 + fi)
        score_candidates(candidates, failure, ue_net, backbone, pool,
                         use_ue=config.use_ue, feature_cache=feature_cache,
                         image_loader=image_loader,
                         seed=seed * 100003 + epoch * 1009 + fi)
        selected = select_top_k(candidates, config.k_selected)
        selected_all.extend(selected)
        if diagnostics_path:
            diag_rows += [{"parent": c.parent_query,
                           "pose": [float(x) for x in c.pose.matrix().reshape(-1)],
                           "uncertainty": c.uncertainty, "selected": c.selected}
                          for c in candidates]

    intrinsics = pool[0].intrinsics if pool else store.records()[0].intrinsics
    request = RenderRequest(poses=[c.pose for c in selected_all],
                            intrinsics=intrinsics, scene_id=store.scene_id,
                            tag=f"epoch{epoch}")
    results = renderer(request)
    if len(results) != len(selected_all):
        raise AugmentError(
            f"renderer returned {len(results)} images for {len(selected_all)} poses")
    inserted = insert_synthetic(store, results, epoch, retention=config.retention)

    if diagnostics_path:
        path = Path(diagnostics_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(diag_rows, f)
    return {"failures": len(failures), "rendered": len(results),
            "inserted": inserted}
