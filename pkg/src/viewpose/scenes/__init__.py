"""Procedural scenes, camera sampling, rendering, and dataset generation.

Scenes are 1-5 sphere/box primitives inside the unit cube, shaded
Lambertian with one fixed directional light plus ambient. The raycasting
kernel has two interchangeable backends: a compiled extension
(viewpose.scenes._render_core, built from Cython) and a pure-numpy
fallback, selected at import; both produce bit-identical images.

Rendering a view is a pure function of (spec, pose, intrinsics), so views
may be rendered concurrently in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .. import geometry
from ..errors import ManifestConflict
from . import _render_np

try:
    from . import _render_core
except ImportError:  # pragma: no cover - build without a C toolchain
    _render_core = None

HAVE_COMPILED = _render_core is not None
DEFAULT_BACKEND = "compiled" if HAVE_COMPILED else "numpy"

_LIGHT = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
_AMBIENT = 0.2
_DIFFUSE = 0.8
_TMIN = 1e-6

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Primitive:
    kind: str          # "sphere" or "box"
    center: tuple      # 3 floats in [-1, 1]^3
    size: float        # sphere radius / box half-extent, in [0.15, 0.5]
    albedo: tuple      # RGB in [0, 1]^3


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    background: np.ndarray
    seed: int

    @property
    def centroid(self) -> np.ndarray:
        if not self.primitives:
            return np.zeros(3)
        return np.mean([p.center for p in self.primitives], axis=0)


@dataclass(frozen=True)
class CameraSampler:
    """Pose prior around a scene: spherical position plus look-at jitter.

    Elevation is deliberately skewed toward the top of its range (density
    grows with elevation) so the learned pose prior is distinguishable
    from uniform.
    """

    radius_range: tuple = (1.8, 3.2)
    elevation_range_deg: tuple = (-10.0, 70.0)
    lookat_jitter: float = 0.05

    def elevation_from_uniform(self, u) -> np.ndarray:
        lo, hi = self.elevation_range_deg
        return lo + (hi - lo) * np.sqrt(u)

    def sample_elevations(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draws from the sampler's elevation distribution, in degrees."""
        return self.elevation_from_uniform(rng.uniform(0.0, 1.0, size=n))


def sample_scene(seed) -> SceneSpec:
    """Deterministic scene draw: 1-5 primitives with min center spacing 0.1."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 6))
    centers: list[np.ndarray] = []
    for _ in range(count):
        center = rng.uniform(-1.0, 1.0, size=3)
        for _ in range(100):
            if not centers or min(
                np.linalg.norm(center - c) for c in centers
            ) >= 0.1:
                break
            center = rng.uniform(-1.0, 1.0, size=3)
        centers.append(center)
    primitives = []
    for center in centers:
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        size = float(rng.uniform(0.15, 0.5))
        albedo = rng.uniform(0.0, 1.0, size=3)
        primitives.append(
            Primitive(kind, tuple(center.tolist()), size, tuple(albedo.tolist()))
        )
    background = rng.uniform(0.0, 1.0, size=3)
    seed_int = int(np.random.SeedSequence(seed).generate_state(1)[0])
    return SceneSpec(primitives=primitives, background=background, seed=seed_int)


def look_at_pose(position, target, up=(0.0, 1.0, 0.0)) -> geometry.CameraPose:
    """RUB pose at `position` whose -Z axis points toward `target`."""
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back = back / np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right = right / np.linalg.norm(right)
    upv = np.cross(back, right)
    return geometry.CameraPose(np.stack([right, upv, back], axis=1), position)


def sample_camera(spec: SceneSpec, sampler: CameraSampler, seed) -> geometry.CameraPose:
    """Deterministic pose draw around the scene centroid (RUB convention)."""
    rng = np.random.default_rng(seed)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = math.radians(float(sampler.elevation_from_uniform(rng.uniform())))
    radius = rng.uniform(*sampler.radius_range)
    jitter = sampler.lookat_jitter * rng.standard_normal(3)
    centroid = spec.centroid
    position = centroid + radius * np.array([
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
        math.cos(elevation) * math.cos(azimuth),
    ])
    return look_at_pose(position, centroid + jitter)


def elevation_deg(position: np.ndarray, centroid: np.ndarray) -> float:
    """Elevation angle of a camera position above the centroid plane."""
    offset = np.asarray(position, dtype=np.float64) - centroid
    return math.degrees(math.asin(np.clip(offset[1] / np.linalg.norm(offset), -1, 1)))


def _primitive_arrays(spec: SceneSpec):
    n = len(spec.primitives)
    kinds = np.array(
        [0 if p.kind == "sphere" else 1 for p in spec.primitives], dtype=np.int32
    )
    centers = np.array([p.center for p in spec.primitives], dtype=np.float64).reshape(n, 3)
    sizes = np.array([p.size for p in spec.primitives], dtype=np.float64)
    albedos = np.array([p.albedo for p in spec.primitives], dtype=np.float64).reshape(n, 3)
    return kinds, centers, sizes, albedos


def render(
    spec: SceneSpec,
    pose: geometry.CameraPose,
    intrinsics: geometry.Intrinsics,
    backend: str | None = None,
) -> np.ndarray:
    """Raycast one view; returns (H, W, 3) float64 in [-1, 1]."""
    backend = backend or DEFAULT_BACKEND
    if backend == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled render backend is not available")
    dirs = np.ascontiguousarray(geometry.pose_to_raymap(pose, intrinsics).directions)
    kinds, centers, sizes, albedos = _primitive_arrays(spec)
    kernel = _render_core if backend == "compiled" else _render_np
    shaded = kernel.trace_rays(
        np.ascontiguousarray(pose.center),
        dirs, kinds, centers, sizes, albedos,
        np.ascontiguousarray(spec.background),
        _LIGHT, _AMBIENT, _DIFFUSE, _TMIN,
    )
    return np.asarray(shaded) * 2.0 - 1.0


def quantize_image(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> 8-bit RGB, the on-disk representation."""
    return np.clip(np.round((img + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def image_from_u8(u8: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float32 in [-1, 1] (linear map)."""
    return (u8.astype(np.float32) / 255.0) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# Dataset on disk


def _scene_id(index: int) -> str:
    return f"scene_{index:05d}"


def _generation_params(num_scenes, views_per_scene, sampler, intrinsics, seed,
                       distance_threshold) -> dict:
    return {
        "num_scenes": num_scenes,
        "views_per_scene": views_per_scene,
        "seed": seed,
        "resolution": [intrinsics.height, intrinsics.width],
        "intrinsics": {
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
        },
        "sampler": {
            "radius_range": list(sampler.radius_range),
            "elevation_range_deg": list(sampler.elevation_range_deg),
            "lookat_jitter": sampler.lookat_jitter,
        },
        "distance_threshold": distance_threshold,
    }


def gen_dataset(
    num_scenes: int,
    views_per_scene: int,
    sampler: CameraSampler,
    intrinsics: geometry.Intrinsics,
    seed: int,
    out_dir: str | Path,
    distance_threshold: float = geometry.DEFAULT_DISTANCE_THRESHOLD,
    backend: str | None = None,
) -> dict:
    """Render a dataset to disk and write its manifest.

    Layout: <out>/manifest.json plus per scene <out>/scenes/<id>/view_XXX.png
    and poses.txt. Scenes are split 90/5/5 into train/val/test; the center
    scale factor is computed over training-scene cameras only. Deterministic
    given the seed, byte-for-byte.
    """
    out = Path(out_dir)
    params = _generation_params(
        num_scenes, views_per_scene, sampler, intrinsics, seed, distance_threshold
    )
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if existing.get("params") != json.loads(json.dumps(params)):
            raise ManifestConflict(
                f"{out} already holds a dataset generated with different parameters"
            )
    out.mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng([seed, 0xD15C]).permutation(num_scenes)
    if num_scenes >= 3:
        n_val = max(1, int(round(num_scenes * 0.05)))
        n_test = max(1, int(round(num_scenes * 0.05)))
        n_train = num_scenes - n_val - n_test
    else:
        n_train, n_val = num_scenes, 0
    splits = {
        "train": sorted(_scene_id(i) for i in order[:n_train]),
        "val": sorted(_scene_id(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(_scene_id(i) for i in order[n_train + n_val:]),
    }

    train_ids = set(splits["train"])
    train_centers = []
    for s_idx in range(num_scenes):
        sid = _scene_id(s_idx)
        scene_dir = out / "scenes" / sid
        scene_dir.mkdir(parents=True, exist_ok=True)
        spec = sample_scene([seed, s_idx])
        poses = [
            sample_camera(spec, sampler, [seed, s_idx, v_idx])
            for v_idx in range(views_per_scene)
        ]
        geometry.save_poses(scene_dir / "poses.txt", intrinsics, poses)
        for v_idx, pose in enumerate(poses):
            img = quantize_image(render(spec, pose, intrinsics, backend=backend))
            Image.fromarray(img, "RGB").save(
                scene_dir / f"view_{v_idx:03d}.png", optimize=False
            )
        if sid in train_ids:
            train_centers.extend(p.center for p in poses)

    norm = geometry.standardize_dataset(
        np.array(train_centers), distance_threshold=distance_threshold
    )
    manifest = {
        "version": 1,
        "params": params,
        "scale": norm.scale,
        "distance_threshold": distance_threshold,
        "splits": splits,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    """Read access to a generated dataset directory."""

    root: Path
    manifest: dict
    intrinsics: geometry.Intrinsics
    norm: geometry.SceneNormalization
    splits: dict

    @property
    def views_per_scene(self) -> int:
        return self.manifest["params"]["views_per_scene"]

    def scene_ids(self, split: str) -> list[str]:
        return list(self.splits[split])

    def scene_index(self, scene_id: str) -> int:
        return int(scene_id.split("_")[1])

    def scene_spec(self, scene_id: str) -> SceneSpec:
        return sample_scene([self.manifest["params"]["seed"],
                             self.scene_index(scene_id)])

    def load_poses(self, scene_id: str) -> list[geometry.CameraPose]:
        _, poses = geometry.load_poses(
            self.root / "scenes" / scene_id / "poses.txt"
        )
        return poses

    def load_image(self, scene_id: str, view: int) -> np.ndarray:
        """(H, W, 3) float32 in [-1, 1]."""
        path = self.root / "scenes" / scene_id / f"view_{view:03d}.png"
        return image_from_u8(np.asarray(Image.open(path).convert("RGB")))

    def sampler(self) -> CameraSampler:
        s = self.manifest["params"]["sampler"]
        return CameraSampler(
            radius_range=tuple(s["radius_range"]),
            elevation_range_deg=tuple(s["elevation_range_deg"]),
            lookat_jitter=s["lookat_jitter"],
        )


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    intr = manifest["params"]["intrinsics"]
    return Dataset(
        root=root,
        manifest=manifest,
        intrinsics=geometry.Intrinsics(
            fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
            width=intr["width"], height=intr["height"],
        ),
        norm=geometry.SceneNormalization(
            scale=manifest["scale"],
            distance_threshold=manifest["distance_threshold"],
        ),
        splits=manifest["splits"],
    )
