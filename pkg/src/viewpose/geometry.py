"""Camera conventions, Plücker ray maps, and least-squares pose recovery.

Cameras use the RUB convention: +X right, +Y up, +Z back, so the camera
looks along -Z and the image row index grows downward. Poses are stored
camera-to-world (rotation columns are the camera axes expressed in world
coordinates, center is the camera origin in world units).

All functions here are pure and operate on float64 numpy arrays; they are
safe to call concurrently from any number of threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateDataset,
    DegenerateDirection,
    ShapeMismatch,
    SingularGeometry,
)

ORTHONORMAL_TOL = 1e-9

# Published per-dataset center scale factors (variance of camera positions
# standardized to 1 at full training scale). Kept for reference configs;
# synthetic datasets compute their own factor via standardize_dataset.
KNOWN_DATASET_SCALES = {
    "objaverse": 1.0,
    "co3d": 0.1,
    "mvimgnet": 0.5,
    "realestate10k": 10.0,
}

DEFAULT_DISTANCE_THRESHOLD = 5.0


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera matrix plus the image size it applies to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def default_intrinsics(width: int, height: int) -> Intrinsics:
    """Fixed default camera matrix: fx = fy = width (~53 deg FOV), centered."""
    return Intrinsics(
        fx=float(width), fy=float(width),
        cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )


@dataclass
class CameraPose:
    """Rigid camera-to-world transform: 3x3 rotation and camera center."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.center.shape != (3,):
            raise ValueError("rotation must be 3x3 and center a 3-vector")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (max residual {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must have determinant +1, got {det}")

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (R, t) such that x_cam = R @ x_world + t."""
        r = self.rotation.T
        return r, -r @ self.center


def orthonormalized_pose(rotation: np.ndarray, center: np.ndarray) -> CameraPose:
    """Project an approximate rotation to the nearest proper rotation."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
    r = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    return CameraPose(r, center)


def relative_pose(observation: CameraPose, target: CameraPose) -> CameraPose:
    """Express target's pose in the observation camera's frame.

    The observation camera becomes the canonical frame (identity rotation,
    zero center); this is the quantity the pose-estimation task predicts.
    """
    r_obs_t = observation.rotation.T
    return CameraPose(
        r_obs_t @ target.rotation,
        r_obs_t @ (target.center - observation.center),
    )


def compose_pose(base: CameraPose, rel: CameraPose) -> CameraPose:
    """Inverse of relative_pose: lift a relative pose back into world frame."""
    return CameraPose(
        base.rotation @ rel.rotation,
        base.center + base.rotation @ rel.center,
    )


class Convention(enum.Enum):
    """Source camera-axis conventions convertible to RUB."""

    RUB = "RUB"
    RDF = "RDF"
    LUF = "LUF"


_AXIS_CORRECTIONS = {
    Convention.RUB: np.eye(3),
    Convention.RDF: np.diag([1.0, -1.0, -1.0]),
    Convention.LUF: np.diag([-1.0, 1.0, -1.0]),
}


def to_rub(pose: CameraPose, source: Convention) -> CameraPose:
    """Re-express a pose given in `source` axis convention as a RUB pose.

    The correction right-multiplies the rotation; the camera center and the
    physical viewing direction are unchanged.
    """
    return CameraPose(pose.rotation @ _AXIS_CORRECTIONS[source], pose.center)


def axis_correction(source: Convention) -> np.ndarray:
    return _AXIS_CORRECTIONS[source].copy()


@dataclass
class PluckerRay:
    """A line in 3D as (moment, direction) with m = o x d and |d| = 1."""

    moment: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.moment = np.asarray(self.moment, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("direction must be unit norm")
        if abs(self.moment @ self.direction) > ORTHONORMAL_TOL:
            raise ValueError("moment must be perpendicular to direction")


@dataclass
class RayMap:
    """H x W grid of Plücker rays densely encoding one camera."""

    moments: np.ndarray      # (H, W, 3)
    directions: np.ndarray   # (H, W, 3)

    def __post_init__(self):
        self.moments = np.asarray(self.moments, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        if (
            self.moments.shape != self.directions.shape
            or self.moments.ndim != 3
            or self.moments.shape[2] != 3
        ):
            raise ValueError("moments and directions must both be (H, W, 3)")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.moments.shape[0], self.moments.shape[1]

    def ray(self, row: int, col: int) -> PluckerRay:
        return PluckerRay(self.moments[row, col], self.directions[row, col])

    def as_channels(self) -> np.ndarray:
        """Stack to (H, W, 6) with moment channels first."""
        return np.concatenate([self.moments, self.directions], axis=2)

    @classmethod
    def from_channels(cls, channels: np.ndarray) -> "RayMap":
        channels = np.asarray(channels, dtype=np.float64)
        if channels.ndim != 3 or channels.shape[2] != 6:
            raise ShapeMismatch(f"expected (H, W, 6), got {channels.shape}")
        return cls(channels[..., :3], channels[..., 3:])


def pixel_directions(intrinsics: Intrinsics) -> np.ndarray:
    """Unit view direction of every pixel in the camera frame, shape (H, W, 3).

    Pixel (u, v) maps to normalize(((u - cx)/fx, -(v - cy)/fy, -1)): the
    camera looks along -Z and image rows grow downward, hence the sign flip.
    Integer pixel coordinates are used directly (cx, cy may be fractional).
    """
    h, w = intrinsics.height, intrinsics.width
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    x = (u[None, :] - intrinsics.cx) / intrinsics.fx
    y = -(v[:, None] - intrinsics.cy) / intrinsics.fy
    d = np.empty((h, w, 3), dtype=np.float64)
    d[..., 0] = x
    d[..., 1] = y
    d[..., 2] = -1.0
    d /= np.linalg.norm(d, axis=2, keepdims=True)
    return d


def pose_to_raymap(pose: CameraPose, intrinsics: Intrinsics) -> RayMap:
    """Plücker ray map of a camera: one ray through every pixel."""
    d_cam = pixel_directions(intrinsics)
    d_world = d_cam @ pose.rotation.T
    moments = np.cross(np.broadcast_to(pose.center, d_world.shape), d_world)
    return RayMap(moments, d_world)


def raymap_to_pose(raymap: RayMap, intrinsics: Intrinsics) -> CameraPose:
    """Recover the camera pose that generated a ray map.

    Center: least-squares point closest to all rays, from the normal
    equations A c = b with A = sum(I - d d^T) and b = sum(d x m).
    Rotation: orthogonal Procrustes fit of the canonical camera-frame pixel
    directions onto the observed world directions (SVD with det correction).
    Tolerates small violations of the Plücker constraints, e.g. from
    quantization; raises SingularGeometry when the rays are near-parallel.
    """
    h, w = raymap.resolution
    if (h, w) != (intrinsics.height, intrinsics.width):
        raise ShapeMismatch(
            f"ray map {h}x{w} does not match intrinsics "
            f"{intrinsics.height}x{intrinsics.width}"
        )
    d = raymap.directions.reshape(-1, 3)
    m = raymap.moments.reshape(-1, 3)
    n = d.shape[0]

    a = n * np.eye(3) - np.einsum("ni,nj->ij", d, d)
    b = np.sum(np.cross(d, m), axis=0)
    eigvals = np.linalg.eigvalsh(a)
    if eigvals[0] < 1e-8 * np.trace(a):
        raise SingularGeometry("rays are (near-)parallel; center is unobservable")
    center = np.linalg.solve(a, b)

    d_cam = pixel_directions(intrinsics).reshape(-1, 3)
    cov = np.einsum("ni,nj->ij", d, d_cam)
    u, _, vt = np.linalg.svd(cov)
    rotation = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    return CameraPose(rotation, center)


def normalize_raymap(raw: np.ndarray) -> RayMap:
    """Project a raw (H, W, 6) grid onto the Plücker constraint set.

    Directions are rescaled to unit norm and the component of each moment
    along its direction is removed. Idempotent; needed because decoded
    camera-tokenizer output does not satisfy the constraints exactly.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != 6:
        raise ShapeMismatch(f"expected (H, W, 6), got {raw.shape}")
    m = raw[..., :3]
    d = raw[..., 3:]
    norm = np.linalg.norm(d, axis=2, keepdims=True)
    if np.any(norm < 1e-8):
        raise DegenerateDirection("ray direction with near-zero norm")
    d = d / norm
    m = m - np.sum(m * d, axis=2, keepdims=True) * d
    return RayMap(m, d)


@dataclass(frozen=True)
class SceneNormalization:
    """Dataset-level center scale and the pair distance threshold."""

    scale: float
    distance_threshold: float = DEFAULT_DISTANCE_THRESHOLD

    def __post_init__(self):
        if self.scale <= 0 or self.distance_threshold <= 0:
            raise ValueError("scale and distance_threshold must be positive")


def standardize_dataset(
    centers: np.ndarray,
    distance_threshold: float = DEFAULT_DISTANCE_THRESHOLD,
) -> SceneNormalization:
    """Scale factor that standardizes center variance to 1.

    Variance is the mean squared distance from the centroid (a scalar, so
    the factor is rotation invariant).
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if centers.shape[0] < 2:
        raise DegenerateDataset("need at least two camera centers")
    variance = np.mean(np.sum((centers - centers.mean(axis=0)) ** 2, axis=1))
    if variance < 1e-12:
        raise DegenerateDataset("camera centers are all identical")
    return SceneNormalization(
        scale=1.0 / np.sqrt(variance), distance_threshold=distance_threshold
    )


def filter_pair(a: CameraPose, b: CameraPose, norm: SceneNormalization) -> bool:
    """True iff two (already scaled) cameras are close enough to pair up."""
    return bool(
        np.linalg.norm(a.center - b.center) <= norm.distance_threshold
    )


def rotation_geodesic_error(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of the relative rotation r1^T r2, in degrees, range [0, 180]."""
    cos = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# Pose file format: structured text, one file per scene. All reals are
# written with 17 significant digits so values round-trip exactly.

_FLOAT_FMT = "{:.16e}"


def _fmt(values) -> str:
    return " ".join(_FLOAT_FMT.format(float(v)) for v in np.ravel(values))


def save_poses(
    path: str | Path,
    intrinsics: Intrinsics,
    poses: list[CameraPose],
    convention: str = "RUB",
) -> None:
    """Write a per-scene pose file (convention, intrinsics, per-view R, c)."""
    lines = ["poses v1", f"convention {convention}"]
    lines.append(
        "intrinsics "
        + _fmt([intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy])
        + f" {intrinsics.width} {intrinsics.height}"
    )
    lines.append(f"views {len(poses)}")
    for i, pose in enumerate(poses):
        lines.append(f"view {i}")
        lines.append("rotation " + _fmt(pose.rotation))
        lines.append("center " + _fmt(pose.center))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path: str | Path) -> tuple[Intrinsics, list[CameraPose]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "poses v1":
        raise ValueError(f"{path}: not a pose file")
    if lines[1].split()[1] != "RUB":
        raise ValueError(f"{path}: only RUB pose files are supported")
    tok = lines[2].split()
    intrinsics = Intrinsics(
        fx=float(tok[1]), fy=float(tok[2]), cx=float(tok[3]), cy=float(tok[4]),
        width=int(tok[5]), height=int(tok[6]),
    )
    n_views = int(lines[3].split()[1])
    poses = []
    idx = 4
    for _ in range(n_views):
        assert lines[idx].startswith("view ")
        rot = np.array([float(x) for x in lines[idx + 1].split()[1:]]).reshape(3, 3)
        center = np.array([float(x) for x in lines[idx + 2].split()[1:]])
        poses.append(CameraPose(rot, center))
        idx += 3
    return intrinsics, poses
