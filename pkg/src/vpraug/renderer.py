"""View synthesis: a deterministic procedural oracle scene for desk-scale
runs, a file-exchange adapter for external synthesizer processes, and PSNR.

The oracle scene is a closed rectangular room whose six planar faces carry
distinct procedural textures. Images are produced by per-pixel ray casting
through the pinhole model, so rendered pixel positions agree with the
projection in :mod:`vpraug.geometry` by construction.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose

PSNR_CAP = 99.0


class RendererError(ValueError):
    pass


class RenderProtocolError(RuntimeError):
    pass


@dataclass
class RenderRequest:
    poses: list[Pose]
    intrinsics: Intrinsics
    scene_id: str = "scene"
    tag: str = "0"

    def __post_init__(self):
        if not self.poses:
            raise RendererError("render request needs at least one pose")


@dataclass
class RenderResult:
    pose: Pose
    image: np.ndarray
    intrinsics: Intrinsics
    synth_source: str = "oracle"

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise RendererError(f"image must be (H, W, 3), got {img.shape}")
        if img.shape[0] != self.intrinsics.height or img.shape[1] != self.intrinsics.width:
            raise RendererError("image shape does not match request intrinsics")
        if img.min() < -1e-9 or img.max() > 1 + 1e-9:
            raise RendererError("pixel values must lie in [0, 1]")
        self.image = np.clip(img, 0.0, 1.0)


@dataclass
class SceneSpec:
    """A closed room: x in [-sx/2, sx/2], y in [-sy/2, sy/2], z in [0, height].

    Faces (region ids): 0 west (x-), 1 east (x+), 2 south (y-), 3 north (y+),
    4 floor, 5 ceiling. ``beacons`` are world points drawn as solid-colored
    dots, used to verify rendering against analytic projection.
    """

    size_x: float = 10.0
    size_y: float = 10.0
    height: float = 4.0
    texture_seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    beacons: list = field(default_factory=list)   # (point(3,), color(3,), radius)

    def __post_init__(self):
        if self.size_x <= 0 or self.size_y <= 0 or self.height <= 0:
            raise RendererError("scene dimensions must be positive")

    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.height / 2])


def _region_params(scene: SceneSpec, region: int):
    rng = np.random.default_rng([scene.texture_seed, region])
    base = 0.25 + 0.65 * rng.random(3)
    freqs = 0.4 + 1.6 * rng.random(4)
    phases = 2 * np.pi * rng.random(4)
    return base, freqs, phases


def _texture(scene: SceneSpec, region: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Procedural color for face-local coordinates (a, b), per region."""
    base, f, ph = _region_params(scene, region)
    w1 = np.sin(2 * np.pi * f[0] * a + ph[0]) * np.sin(2 * np.pi * f[1] * b + ph[1])
    w2 = np.sin(2 * np.pi * f[2] * (a + b) + ph[2])
    w3 = np.sin(2 * np.pi * f[3] * (a - b) + ph[3])
    mod = np.stack([0.55 + 0.45 * w1, 0.55 + 0.45 * w2, 0.55 + 0.45 * w3], axis=-1)
    return np.clip(base[None, :] * mod.reshape(-1, 3), 0.0, 1.0).reshape(a.shape + (3,))


def _ray_directions(pose: Pose, intrinsics: Intrinsics) -> np.ndarray:
    u, v = np.meshgrid(np.arange(intrinsics.width, dtype=np.float64),
                       np.arange(intrinsics.height, dtype=np.float64))
    d_cam = np.stack([(u - intrinsics.cx) / intrinsics.fx,
                      (v - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(u)], axis=-1)
    return d_cam @ pose.rotation.T


def render_pose(scene: SceneSpec, pose: Pose, intrinsics: Intrinsics):
    """Ray-cast one view. Returns (image (H,W,3) in [0,1], region-id map (H,W)).

    Region id -1 marks background (no geometry hit, camera outside the room).
    """
    dirs = _ray_directions(pose, intrinsics)
    origin = pose.translation
    H, W = dirs.shape[:2]
    hx, hy = scene.size_x / 2, scene.size_y / 2
    # face: (axis, plane position, bounds for the two other axes)
    faces = [
        (0, -hx, (1, -hy, hy), (2, 0.0, scene.height)),
        (0, hx, (1, -hy, hy), (2, 0.0, scene.height)),
        (1, -hy, (0, -hx, hx), (2, 0.0, scene.height)),
        (1, hy, (0, -hx, hx), (2, 0.0, scene.height)),
        (2, 0.0, (0, -hx, hx), (1, -hy, hy)),
        (2, scene.height, (0, -hx, hx), (1, -hy, hy)),
    ]
    best_t = np.full((H, W), np.inf)
    region_map = np.full((H, W), -1, dtype=int)
    hit_a = np.zeros((H, W))
    hit_b = np.zeros((H, W))
    for region, (axis, plane, (a_ax, a_lo, a_hi), (b_ax, b_lo, b_hi)) in enumerate(faces):
        d_axis = dirs[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane - origin[axis]) / d_axis
            pa = origin[a_ax] + t * dirs[..., a_ax]
            pb = origin[b_ax] + t * dirs[..., b_ax]
        ok = (np.isfinite(t) & (t > 1e-9)
              & (pa >= a_lo - 1e-9) & (pa <= a_hi + 1e-9)
              & (pb >= b_lo - 1e-9) & (pb <= b_hi + 1e-9)
              & (t < best_t))
        best_t[ok] = t[ok]
        region_map[ok] = region
        hit_a[ok] = pa[ok]
        hit_b[ok] = pb[ok]

    image = np.tile(np.asarray(scene.background, dtype=np.float64), (H, W, 1))
    for region in range(6):
        sel = region_map == region
        if not np.any(sel):
            continue
        image[sel] = _texture(scene, region, hit_a[sel], hit_b[sel])

    # beacons: painted where the ray passes within the beacon radius, and the
    # beacon is closer along the ray than the wall hit
    dn = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    for point, color, radius in scene.beacons:
        rel = np.asarray(point, dtype=np.float64) - origin
        t_b = dn @ rel
        closest = dn * t_b[..., None] - rel
        dist = np.linalg.norm(closest, axis=-1)
        wall_t = best_t * np.linalg.norm(dirs, axis=-1)
        vis = (t_b > 1e-9) & (dist <= radius) & (t_b <= wall_t + radius)
        image[vis] = np.asarray(color, dtype=np.float64)
    return image, region_map


def render_oracle(request: RenderRequest, scene: SceneSpec, seed: int = 0,
                  noise_level: float = 0.0) -> list[RenderResult]:
    """Deterministically rasterize the procedural scene at each request pose.

    ``noise_level`` adds per-pixel clipped Gaussian noise (std in pixel
    units) to emulate renderer degradation; 0 gives the clean image.
    """
    results = []
    for i, pose in enumerate(request.poses):
        image, _ = render_pose(scene, pose, request.intrinsics)
        if noise_level > 0:
            rng = np.random.default_rng([seed, zlib.crc32(request.tag.encode()), i])
            image = np.clip(image + rng.normal(0.0, noise_level, image.shape), 0.0, 1.0)
        results.append(RenderResult(pose=pose, image=image,
                                    intrinsics=request.intrinsics,
                                    synth_source="oracle"))
    return results


def write_request(request: RenderRequest, exchange_dir) -> Path:
    exchange_dir = Path(exchange_dir)
    exchange_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "scene_id": request.scene_id,
        "intrinsics": request.intrinsics.to_dict(),
        "poses": [[float(x) for x in p.matrix().reshape(-1)] for p in request.poses],
    }
    path = exchange_dir / f"request-{request.tag}.json"
    with open(path, "w") as f:
        json.dump(doc, f)
    return path


def render_external(request: RenderRequest, exchange_dir, timeout: float = 60.0,
                    poll_interval: float = 0.05) -> list[RenderResult]:
    """Hand a request to an external synthesizer via a shared directory.

    The responder writes PNG images and finally ``response-<tag>.json``
    listing them in request pose order; images are only read after the index
    file appears. Missing or malformed responses raise
    ``RenderProtocolError``.
    """
    exchange_dir = Path(exchange_dir)
    write_request(request, exchange_dir)
    index_path = exchange_dir / f"response-{request.tag}.json"
    deadline = time.monotonic() + timeout
    while not index_path.exists():
        if time.monotonic() > deadline:
            raise RenderProtocolError(
                f"timed out after {timeout}s waiting for {index_path}; "
                f"all {len(request.poses)} poses missing")
        time.sleep(poll_interval)
    try:
        with open(index_path) as f:
            index = json.load(f)
        names = index["images"]
    except (json.JSONDecodeError, KeyError) as e:
        raise RenderProtocolError(f"malformed response index {index_path}: {e}") from e
    if len(names) != len(request.poses):
        raise RenderProtocolError(
            f"response lists {len(names)} images for {len(request.poses)} poses")
    missing = [i for i, n in enumerate(names) if not (exchange_dir / n).exists()]
    if missing:
        raise RenderProtocolError(f"response images missing for indices {missing}")
    results = []
    for pose, name in zip(request.poses, names):
        try:
            with Image.open(exchange_dir / name) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as e:
            raise RenderProtocolError(f"cannot decode {name}: {e}") from e
        results.append(RenderResult(pose=pose, image=arr,
                                    intrinsics=request.intrinsics,
                                    synth_source="external"))
    return results


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RendererError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
