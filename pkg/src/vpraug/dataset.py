"""Dataset model: manifests, positive-match geometry, data organization,
synthetic-record insertion, and triplet mining."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GeometryError, Intrinsics, Pose

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class PlaceRecord:
    """One observation: an image with its camera pose."""

    id: str
    image_path: str
    pose: Pose
    intrinsics: Intrinsics
    is_synthetic: bool = False
    scene_id: str = ""
    split: str = "train"
    epoch_added: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"record {self.id!r}: unknown split {self.split!r}")


@dataclass
class DatasetView:
    """A query/database split used for training or evaluation."""

    queries: list[PlaceRecord]
    database: list[PlaceRecord]
    positive_threshold: float

    def __post_init__(self):
        if self.positive_threshold <= 0:
            raise DatasetError("positive_threshold must be positive")
        overlap = {r.id for r in self.queries} & {r.id for r in self.database}
        if overlap:
            raise DatasetError(f"queries and database overlap: {sorted(overlap)[:5]}")


@dataclass
class Triplet:
    anchor: str
    positive: str
    negatives: list[str]


def record_to_dict(r: PlaceRecord) -> dict:
    return {
        "id": r.id,
        "image_path": r.image_path,
        "pose": [float(x) for x in r.pose.matrix().reshape(-1)],
        "intrinsics": r.intrinsics.to_dict(),
        "is_synthetic": r.is_synthetic,
        "split": r.split,
        "epoch_added": r.epoch_added,
    }


def _record_from_dict(entry: dict, scene_id: str) -> PlaceRecord:
    rid = entry.get("id")
    if not rid:
        raise DatasetError("manifest entry missing 'id'")
    missing = [k for k in ("image_path", "pose", "intrinsics") if k not in entry]
    if missing:
        raise DatasetError(f"record {rid!r}: missing fields {missing}")
    pose_values = entry["pose"]
    if len(pose_values) != 16:
        raise DatasetError(f"record {rid!r}: pose must be 16 numbers (row-major 4x4)")
    try:
        pose = Pose.from_matrix(np.array(pose_values, dtype=np.float64).reshape(4, 4))
    except GeometryError as e:
        raise DatasetError(f"record {rid!r}: invalid pose: {e}") from e
    return PlaceRecord(
        id=rid,
        image_path=entry["image_path"],
        pose=pose,
        intrinsics=Intrinsics.from_dict(entry["intrinsics"]),
        is_synthetic=bool(entry.get("is_synthetic", False)),
        scene_id=scene_id,
        split=entry.get("split", "train"),
        epoch_added=int(entry.get("epoch_added", 0)),
    )


def load_manifest(path, check_images: bool = True) -> list[PlaceRecord]:
    """Load and validate a scene manifest.

    Raises ``DatasetError`` naming the offending entry on missing fields,
    malformed poses, or duplicate ids. Real records must have their image
    file present (relative paths resolve against the manifest directory).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    scene_id = doc.get("scene_id", path.stem)
    records = []
    seen = set()
    for entry in doc.get("records", []):
        rec = _record_from_dict(entry, scene_id)
        if rec.id in seen:
            raise DatasetError(f"duplicate record id {rec.id!r} in {path}")
        seen.add(rec.id)
        img = Path(rec.image_path)
        if not img.is_absolute():
            img = path.parent / img
        rec.image_path = str(img)
        if check_images and not rec.is_synthetic and not img.exists():
            raise DatasetError(f"record {rec.id!r}: image file missing: {img}")
        records.append(rec)
    return records


def save_manifest(path, scene_id: str, records: list[PlaceRecord]) -> None:
    doc = {"scene_id": scene_id, "records": [record_to_dict(r) for r in records]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def import_transforms(path, scene_id: str, intrinsics: Intrinsics | None = None,
                      split: str = "train") -> list[PlaceRecord]:
    """Import a nerfstudio-style transforms file into our record model.

    Expects frames with "file_path" and a 4x4 "transform_matrix"; camera
    parameters are read from the top level ("fl_x", "fl_y", "cx", "cy", "w",
    "h") unless ``intrinsics`` is given explicitly.
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    if intrinsics is None:
        try:
            intrinsics = Intrinsics(float(doc["fl_x"]), float(doc["fl_y"]),
                                    float(doc["cx"]), float(doc["cy"]),
                                    int(doc["w"]), int(doc["h"]))
        except KeyError as e:
            raise DatasetError(f"transforms file lacks camera key {e}; "
                               "pass intrinsics explicitly") from e
    records = []
    for i, frame in enumerate(doc.get("frames", [])):
        m = np.array(frame["transform_matrix"], dtype=np.float64)
        if m.shape == (3, 4):
            m = np.vstack([m, [0, 0, 0, 1]])
        records.append(PlaceRecord(
            id=f"{scene_id}/{i:05d}",
            image_path=frame["file_path"],
            pose=Pose.from_matrix(m),
            intrinsics=intrinsics,
            scene_id=scene_id,
            split=split,
        ))
    return records


def pose_distance(a: PlaceRecord | Pose, b: PlaceRecord | Pose) -> float:
    pa = a.pose if isinstance(a, PlaceRecord) else a
    pb = b.pose if isinstance(b, PlaceRecord) else b
    return pa.distance_to(pb)


def positives_for(query: PlaceRecord, database: list[PlaceRecord],
                  tau_pos: float) -> list[str]:
    """Ids of database records within ``tau_pos`` of the query, nearest first."""
    if tau_pos <= 0:
        raise DatasetError("tau_pos must be positive")
    hits = [(pose_distance(query, r), r.id) for r in database
            if pose_distance(query, r) <= tau_pos]
    hits.sort()
    return [rid for _, rid in hits]


def organize(real: list[PlaceRecord], synthetic: list[PlaceRecord], mode: str,
             tau_pos: float) -> DatasetView:
    """Build the training query/database organization.

    "regular": real records split into database/query by their manifest split
    tags (train -> database, val -> query), synthetic appended to the
    database. "real_query_synth_db": every real record becomes a query and
    the database holds only synthetic records.
    """
    if mode == "regular":
        queries = [r for r in real if r.split == "val"]
        database = [r for r in real if r.split == "train"] + list(synthetic)
        return DatasetView(queries, database, tau_pos)
    if mode == "real_query_synth_db":
        if not synthetic:
            raise ConfigurationError(
                "real_query_synth_db organization needs synthetic records; "
                "run augmentation first")
        return DatasetView(list(real), list(synthetic), tau_pos)
    raise ConfigurationError(f"unknown organization mode {mode!r}")


class RecordStore:
    """Single-writer store of the records of one scene."""

    def __init__(self, scene_id: str, records: list[PlaceRecord], image_dir):
        self.scene_id = scene_id
        self.image_dir = Path(image_dir)
        self._records: dict[str, PlaceRecord] = {}
        for r in records:
            if r.id in self._records:
                raise DatasetError(f"duplicate record id {r.id!r}")
            self._records[r.id] = r

    def __len__(self):
        return len(self._records)

    def records(self) -> list[PlaceRecord]:
        return list(self._records.values())

    def real_records(self) -> list[PlaceRecord]:
        return [r for r in self._records.values() if not r.is_synthetic]

    def synthetic_records(self) -> list[PlaceRecord]:
        return [r for r in self._records.values() if r.is_synthetic]

    def get(self, rid: str) -> PlaceRecord:
        return self._records[rid]

    def remove(self, rid: str) -> None:
        del self._records[rid]


def insert_synthetic(store: RecordStore, results, epoch: int,
                     retention: str = "keep_all") -> int:
    """Insert rendered views into the store as synthetic records.

    ``results`` are render results (objects with .pose, .image, .intrinsics).
    Under "current_epoch_only" retention, synthetic records from earlier
    epochs are dropped before insertion. Image writes happen before any
    record mutation; a write failure leaves the store unchanged.
    """
    if retention not in ("keep_all", "current_epoch_only"):
        raise ConfigurationError(f"unknown retention policy {retention!r}")
    results = list(results)
    if not results:
        if retention == "current_epoch_only":
            _drop_stale_synthetic(store, epoch)
        return 0

    existing = sum(1 for r in store.synthetic_records() if r.epoch_added == epoch)
    store.image_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    written = []
    try:
        for i, res in enumerate(results):
            index = existing + i
            rid = f"{store.scene_id}/synth/{epoch}/{index}"
            img_path = store.image_dir / f"synth-{epoch}-{index}.png"
            arr = np.clip(np.asarray(res.image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_path)
            written.append(img_path)
            staged.append(PlaceRecord(
                id=rid, image_path=str(img_path), pose=res.pose,
                intrinsics=res.intrinsics, is_synthetic=True,
                scene_id=store.scene_id, split="train", epoch_added=epoch))
    except OSError:
        for p in written:
            try:
                os.unlink(p)
            except OSError:
                pass
        raise

    if retention == "current_epoch_only":
        _drop_stale_synthetic(store, epoch)
    for rec in staged:
        store._records[rec.id] = rec
    return len(staged)


def _drop_stale_synthetic(store: RecordStore, epoch: int) -> None:
    stale = [r.id for r in store.synthetic_records() if r.epoch_added < epoch]
    for rid in stale:
        store.remove(rid)


def mine_triplets(view: DatasetView, negatives_per_anchor: int, tau_neg: float,
                  seed: int) -> tuple[list[Triplet], int]:
    """Mine one triplet per query that has at least one positive.

    The positive is the nearest database record within the view's positive
    threshold; negatives are sampled uniformly without replacement from
    records beyond ``tau_neg``. Deterministic under ``seed``. Returns the
    triplets and the count of skipped queries (no positive available).
    """
    if tau_neg <= view.positive_threshold:
        raise DatasetError("tau_neg must exceed the positive threshold")
    rng = np.random.default_rng(seed)
    triplets = []
    skipped = 0
    for q in view.queries:
        pos = positives_for(q, view.database, view.positive_threshold)
        if not pos:
            skipped += 1
            continue
        far_ids = [r.id for r in view.database if pose_distance(q, r) > tau_neg]
        n_neg = min(negatives_per_anchor, len(far_ids))
        if n_neg > 0:
            chosen = rng.choice(len(far_ids), size=n_neg, replace=False)
            negatives = [far_ids[int(j)] for j in sorted(chosen)]
        else:
            negatives = []
        triplets.append(Triplet(anchor=q.id, positive=pos[0], negatives=negatives))
    return triplets, skipped
