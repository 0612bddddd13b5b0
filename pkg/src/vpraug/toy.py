"""Desk-scale fixtures: a procedural toy dataset rendered from the oracle
scene, plus small network configurations that train in seconds on a CPU.

The toy layout puts a ring of places inside the textured room. Each place
contributes a few training views with a narrow span of yaw angles and one
held-out test view at a clearly different yaw, so viewpoint diversity is
what the augmentation loop has to supply.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import BackboneConfig
from .dataset import PlaceRecord, RecordStore, save_manifest
from .geometry import Intrinsics, look_at
from .renderer import SceneSpec, render_pose
from .ue_net import UEConfig

TOY_TAU_POS = 1.0


def toy_backbone_config(input_size: int = 64) -> BackboneConfig:
    return BackboneConfig(input_size=input_size, channels=16, descriptor_dim=64)


def toy_ue_config(n_references: int = 5) -> UEConfig:
    # plane_depth sits near the typical wall distance so reference warps
    # shift smoothly instead of projecting off-grid
    return UEConfig(descriptor_dim=64, fused_dim=64, feature_channels=16,
                    bands=4, n_references=n_references, plane_depth=3.0,
                    feat_hidden=64, out_hidden=64)


def toy_intrinsics(size: int = 64) -> Intrinsics:
    f = size / (2.0 * math.tan(math.radians(35.0)))
    return Intrinsics(f, f, size / 2.0, size / 2.0, size, size)


def _place_positions(n_places: int, ring_radius: float, height: float):
    angles = 2 * np.pi * np.arange(n_places) / n_places
    return [np.array([ring_radius * np.cos(a), ring_radius * np.sin(a), height])
            for a in angles], angles


def _view_pose(position, outward_angle, yaw_offset_deg, scene: SceneSpec):
    yaw = outward_angle + math.radians(yaw_offset_deg)
    target = position + 3.0 * np.array([math.cos(yaw), math.sin(yaw), 0.0])
    return look_at(position, target)


def make_toy_dataset(out_dir, seed: int = 0, n_places: int = 10,
                     input_size: int = 64, ring_radius: float = 3.2,
                     camera_height: float = 2.0, jitter: float = 0.4,
                     revisits: int = 1, val_revisits: int = 1,
                     n_solo: int | None = None, solo_val: bool = True,
                     offsets: int = 1, val_offsets: int = 1,
                     offset_radius: float = 0.5,
                     train_yaws=(-20.0, 10.0), val_yaws=(-5.0,),
                     test_yaws=(35.0,)) -> tuple[Path, SceneSpec]:
    """Render a toy scene dataset to ``out_dir`` and write its manifest.

    Returns (manifest path, scene spec). Views of a place share a position
    up to a uniform radial jitter of up to ``jitter`` (varied offsets give
    the uncertainty network a signal relating pose distance to descriptor
    spread); train/val/test views differ in yaw.

    ``revisits`` / ``val_revisits`` duplicate the first train view of each
    place at its exact pose (as train resp. val records), mimicking a
    traversal that passes the same spot twice, so both splits cover the
    zero-distance reference regime. ``n_solo`` (default: one per place)
    adds isolated views between places, whose nearest neighbors are
    genuinely distant — covering the far-reference regime; with
    ``solo_val`` every other solo is a val record.

    ``offsets`` / ``val_offsets`` add views displaced by ``offset_radius``
    in a uniform random 3D direction from each place — the regime of a
    candidate pose just outside a cluster of references.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    scene = SceneSpec(texture_seed=seed)
    intr = toy_intrinsics(input_size)
    rng = np.random.default_rng(seed)
    positions, angles = _place_positions(n_places, ring_radius, camera_height)
    records = []
    for pi, (pos, ang) in enumerate(zip(positions, angles)):
        views = ([("train", y, False) for y in train_yaws]
                 + [("train", train_yaws[0], True)] * revisits
                 + [("val", y, False) for y in val_yaws]
                 + [("val", train_yaws[0], True)] * val_revisits
                 + [("test", y, False) for y in test_yaws])
        first_pose = None
        for vi, (split, yaw, revisit) in enumerate(views):
            direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.3])
            direction /= max(np.linalg.norm(direction), 1e-9)
            offset = jitter * rng.random() * direction
            pose = _view_pose(pos + offset, ang, yaw, scene)
            if vi == 0:
                first_pose = pose
            elif revisit:
                pose = first_pose          # exact-pose revisit
            image, _ = render_pose(scene, pose, intr)
            name = f"p{pi:02d}_v{vi}_{split}.png"
            arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / name)
            records.append(PlaceRecord(
                id=f"toy/p{pi:02d}/v{vi}", image_path=f"images/{name}",
                pose=pose, intrinsics=intr, scene_id="toy", split=split))
        offset_views = (["train"] * offsets + ["val"] * val_offsets)
        for oi, split in enumerate(offset_views):
            direction = rng.normal(size=3)
            direction /= max(np.linalg.norm(direction), 1e-9)
            opos = pos + offset_radius * direction
            opos[2] = np.clip(opos[2], 0.3, 3.7)
            pose = _view_pose(opos, ang, rng.uniform(-25.0, 25.0), scene)
            image, _ = render_pose(scene, pose, intr)
            name = f"p{pi:02d}_o{oi}_{split}.png"
            arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / name)
            records.append(PlaceRecord(
                id=f"toy/p{pi:02d}/o{oi}", image_path=f"images/{name}",
                pose=pose, intrinsics=intr, scene_id="toy", split=split))
    if n_solo is None:
        n_solo = n_places
    for si in range(n_solo):
        ang = 2 * np.pi * (si + 0.5) / max(n_solo, 1)
        radius = ring_radius + (0.9 if si % 2 == 0 else -0.9)
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang),
                        camera_height + rng.normal(0.0, 0.05)])
        yaw = rng.uniform(-25.0, 25.0)
        pose = _view_pose(pos, ang, yaw, scene)
        image, _ = render_pose(scene, pose, intr)
        split = "val" if solo_val and si % 2 == 1 else "train"
        name = f"solo{si:02d}_{split}.png"
        arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / name)
        records.append(PlaceRecord(
            id=f"toy/solo{si:02d}", image_path=f"images/{name}",
            pose=pose, intrinsics=intr, scene_id="toy", split=split))
    manifest = out_dir / "manifest.json"
    save_manifest(manifest, "toy", records)
    return manifest, scene


def make_toy_store(out_dir, seed: int = 0, **kwargs) -> tuple[RecordStore, SceneSpec]:
    """Build the toy dataset and load it into a RecordStore."""
    from .dataset import load_manifest
    manifest, scene = make_toy_dataset(out_dir, seed=seed, **kwargs)
    records = load_manifest(manifest)
    store = RecordStore("toy", records, Path(out_dir) / "synthetic")
    return store, scene
