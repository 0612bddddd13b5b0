"""End-to-end orchestration: alternate retrieval training epochs with
uncertainty-guided augmentation, early-stop on validation recall, and
evaluate on the held-out split."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augmentation_epoch
from .backbone import Backbone, BackboneConfig, DeskVprNet
from .dataset import (DatasetView, PlaceRecord, RecordStore, insert_synthetic,
                      organize, positives_for)
from .evaluation import DEFAULT_NS, RecallReport, recall_at_n, retrieve
from .renderer import RenderRequest
from .training import (MetricsLogger, TrainConfig, compute_descriptors,
                       default_image_loader, early_stop, make_vpr_optimizer,
                       train_vpr_epoch)
from .ue_net import UENet, load_image


class CachingImageLoader:
    """Loads record images once and serves them from memory thereafter."""

    def __init__(self, loader=None):
        self.loader = loader or (lambda r: load_image(r.image_path))
        self.cache: dict[str, np.ndarray] = {}

    def __call__(self, record: PlaceRecord) -> np.ndarray:
        if record.id not in self.cache:
            self.cache[record.id] = self.loader(record)
        return self.cache[record.id]

    def invalidate(self, rid: str) -> None:
        self.cache.pop(rid, None)


def split_real(store: RecordStore):
    real = store.real_records()
    return ([r for r in real if r.split == "train"],
            [r for r in real if r.split == "val"],
            [r for r in real if r.split == "test"])


def evaluate_recall(net: DeskVprNet, queries: list[PlaceRecord],
                    database: list[PlaceRecord], tau_pos: float,
                    ns=DEFAULT_NS, image_loader=default_image_loader,
                    descriptors=None) -> RecallReport:
    """Recall@N of pose-distance positives under descriptor retrieval."""
    if descriptors is None:
        descriptors = compute_descriptors(net, queries + database, image_loader)
    db = [(r.id, descriptors[r.id]) for r in database]
    top = min(max(ns), len(db))
    results = [retrieve(descriptors[q.id], db, top_n=top, query_id=q.id)
               for q in queries]
    positives = {q.id: positives_for(q, database, tau_pos) for q in queries}
    return recall_at_n(results, positives, ns=[n for n in ns if n <= top],
                       tau_pos=tau_pos)


@dataclass
class PipelineOutcome:
    net: DeskVprNet
    history: list[float]
    test_report: RecallReport
    epoch_summaries: list[dict]
    best_epoch: int


def _check_view_invariants(view: DatasetView, mode: str) -> None:
    if mode != "real_query_synth_db":
        return
    assert all(not q.is_synthetic for q in view.queries), \
        "organization violated: synthetic record among queries"
    assert all(d.is_synthetic for d in view.database), \
        "organization violated: real record in the synthetic database"


def _check_retention(store: RecordStore, epoch: int, retention: str) -> None:
    if retention != "current_epoch_only":
        return
    stale = [r.id for r in store.synthetic_records() if r.epoch_added < epoch]
    assert not stale, f"stale synthetic records survived retention: {stale[:3]}"


def run_pipeline(store: RecordStore,
                 backbone_config: BackboneConfig,
                 train_config: TrainConfig,
                 augment_config: AugmentConfig | None = None,
                 ue_net: UENet | None = None,
                 renderer=None,
                 organization: str = "regular",
                 tau_pos: float = 1.0,
                 tau_neg: float | None = None,
                 image_loader=None,
                 logger: MetricsLogger | None = None,
                 check_invariants: bool = True) -> PipelineOutcome:
    """Train the retrieval network, optionally with augmentation.

    With ``augment_config`` set, each training epoch is followed by an
    augmentation epoch (failure detection, candidate sampling/scoring,
    rendering, insertion). ``organization`` picks the training view:
    "regular" or "real_query_synth_db"; the latter falls back to regular
    until any synthetic records exist. Validation recall (val queries
    against the real train database) drives early stopping; the best
    checkpoint is evaluated on the test split.
    """
    if tau_neg is None:
        tau_neg = 2.0 * tau_pos
    if image_loader is None:
        image_loader = CachingImageLoader()
    logger = logger or MetricsLogger()
    torch.manual_seed(train_config.seed)

    net = DeskVprNet(backbone_config, seed=train_config.seed)
    optimizer = make_vpr_optimizer(net, train_config)
    train_real, val_real, test_real = split_real(store)
    trainable_real = train_real + val_real
    feature_cache: dict = {}

    if (organization == "real_query_synth_db" and renderer is not None
            and train_real and not store.synthetic_records()):
        # this organization trains real queries against synthetic views only,
        # so the database must cover the scene before any augmentation: seed
        # it with renders at the real train poses
        request = RenderRequest(poses=[r.pose for r in train_real],
                                intrinsics=train_real[0].intrinsics,
                                scene_id=store.scene_id, tag="db-seed")
        insert_synthetic(store, renderer(request), epoch=0)

    history: list[float] = []
    summaries: list[dict] = []
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_score = -np.inf
    best_epoch = -1

    for epoch in range(train_config.max_epochs):
        synthetic = store.synthetic_records()
        mode = organization
        if mode == "real_query_synth_db" and not synthetic:
            mode = "regular"
        view = organize(trainable_real, synthetic, mode, tau_pos)
        if check_invariants:
            _check_view_invariants(view, mode)

        metrics = train_vpr_epoch(net, optimizer, view, train_config, epoch,
                                  image_loader=image_loader, tau_neg=tau_neg)

        val_report = evaluate_recall(net, val_real, train_real, tau_pos,
                                     ns=(1,), image_loader=image_loader)
        val_r1 = val_report.recall_at[1]
        history.append(val_r1)
        logger.log(epoch=epoch, split="val", loss=metrics["loss"],
                   **{"recall@1": val_r1}, lr=metrics["lr"],
                   triplets=metrics["triplets"],
                   synthetic_count=len(store.synthetic_records()))
        if val_r1 > best_score:
            best_score = val_r1
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            best_epoch = epoch

        summary = {"epoch": epoch, "failures": 0, "rendered": 0, "inserted": 0}
        if augment_config is not None and renderer is not None:
            # detection view mirrors the training organization of this epoch
            feature_cache.clear()
            summary.update(augmentation_epoch(
                net, ue_net, store, renderer, augment_config, epoch, view,
                backbone=Backbone(net), image_loader=image_loader,
                seed=train_config.seed, feature_cache=feature_cache))
            summary["epoch"] = epoch
            if check_invariants:
                assert summary["rendered"] == summary["failures"] * augment_config.k_selected
                assert all(r.is_synthetic and r.epoch_added <= epoch
                           for r in store.synthetic_records())
                _check_retention(store, epoch, augment_config.retention)
        summaries.append(summary)

        if early_stop(history, train_config.patience):
            break

    net.load_state_dict(best_state)
    test_report = evaluate_recall(net, test_real, trainable_real, tau_pos,
                                  image_loader=image_loader)
    return PipelineOutcome(net=net, history=history, test_report=test_report,
                           epoch_summaries=summaries, best_epoch=best_epoch)


def renderer_quality_rows(cfg, ue_net=None, logger=None,
                          noise_levels=(0.0, 0.05, 0.15)) -> list[dict]:
    """PSNR-vs-recall sweep over oracle-renderer noise levels.

    For each noise level: measure the renderer's PSNR against the clean
    oracle on a handful of held-out poses, then run the augmentation
    pipeline with that renderer and record the final test Recall@1.
    """
    from .dataset import load_manifest
    from .renderer import RenderRequest, psnr, render_oracle

    records = load_manifest(cfg["manifest"])
    scene = cfg.scene_spec()
    seed = int(cfg["seed"])
    probe = [r for r in records if r.split == "test"][:5] or records[:5]
    probe_request = RenderRequest(poses=[r.pose for r in probe],
                                  intrinsics=probe[0].intrinsics,
                                  scene_id=probe[0].scene_id, tag="psnr-probe")
    clean = render_oracle(probe_request, scene, seed=seed, noise_level=0.0)

    rows = []
    for noise in noise_levels:
        noisy = render_oracle(probe_request, scene, seed=seed, noise_level=noise)
        quality = float(np.mean([psnr(a.image, b.image)
                                 for a, b in zip(noisy, clean)]))

        def renderer(request, _noise=noise):
            return render_oracle(request, scene, seed=seed, noise_level=_noise)

        store = RecordStore(records[0].scene_id, load_manifest(cfg["manifest"]),
                            cfg.output_dir / f"synthetic-noise{noise}")
        outcome = run_pipeline(store, cfg.backbone_config(), cfg.train_config(),
                               augment_config=cfg.augment_config(),
                               ue_net=ue_net, renderer=renderer,
                               organization=cfg["organization"],
                               tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                               logger=logger)
        rows.append({"noise": noise, "psnr": quality,
                     "recall@1": outcome.test_report.recall_at[1]})
    return rows
