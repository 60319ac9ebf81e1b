"""Pinhole cameras, ray generation and stratified sampling.

Camera frame is right-handed: the camera looks along -z with +y up.
Pixel (px, py) is sampled at its center (px + 0.5, py + 0.5), with py
growing downwards in the image.
"""

from __future__ import annotations

import dataclasses

import numpy as np

NEAR_EPS = 1e-3


@dataclasses.dataclass(frozen=True)
class Camera:
    cam_to_world: np.ndarray  # (3, 4)
    focal_px: float
    width: int
    height: int
    target_distance: float

    def __post_init__(self):
        c2w = np.asarray(self.cam_to_world, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "cam_to_world", c2w)
        rot = c2w[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.focal_px <= 0:
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")
        if self.target_distance <= 0:
            raise ValueError(f"target_distance must be positive, got {self.target_distance}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:, :3]


@dataclasses.dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world (3, 4) for a camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    rot = np.stack([right, cam_up, -forward], axis=1)
    return np.concatenate([rot, position[:, None]], axis=1)


def near_far(origin, scene_center, scene_radius: float) -> tuple[float, float]:
    """Clip a ray segment to the scene bounding sphere (per camera center)."""
    d_c = float(np.linalg.norm(np.asarray(origin) - np.asarray(scene_center)))
    return max(NEAR_EPS, d_c - scene_radius), d_c + scene_radius


def pixel_directions(camera: Camera, px, py) -> np.ndarray:
    """Unit world-space directions through pixel centers; ``px``/``py`` broadcast."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    x = (px + 0.5 - camera.width / 2) / camera.focal_px
    y = -(py + 0.5 - camera.height / 2) / camera.focal_px
    d_cam = np.stack(np.broadcast_arrays(x, y, -np.ones_like(x)), axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(
    camera: Camera, px: float, py: float, scene_center=(0.0, 0.0, 0.0), scene_radius: float = np.pi
) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    near, far = near_far(camera.position, scene_center, scene_radius)
    return Ray(camera.position.copy(), pixel_directions(camera, px, py), near, far)


def camera_rays(camera: Camera, scene_center=(0.0, 0.0, 0.0), scene_radius: float = np.pi):
    """All pixel rays of ``camera`` in row-major order.

    Returns ``(origins (HW, 3), directions (HW, 3), near (HW,), far (HW,))``.
    """
    py, px = np.mgrid[0 : camera.height, 0 : camera.width]
    dirs = pixel_directions(camera, px.ravel(), py.ravel())
    n = dirs.shape[0]
    near, far = near_far(camera.position, scene_center, scene_radius)
    origins = np.broadcast_to(camera.position, (n, 3)).copy()
    return origins, dirs, np.full(n, near), np.full(n, far)


def stratified_samples(ray: Ray, n: int, rng: np.random.Generator | None = None, jitter: bool = False):
    """Sorted sample distances, one per equal-width bin of [t_near, t_far]."""
    return stratified_samples_batch(np.array([ray.t_near]), np.array([ray.t_far]), n, rng, jitter)[0]


def stratified_samples_batch(near, far, n: int, rng=None, jitter: bool = False) -> np.ndarray:
    """Vectorised :func:`stratified_samples`; returns shape (len(near), n)."""
    if n < 1:
        raise ValueError(f"need at least one sample per ray, got {n}")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs a random generator")
        u = rng.random((near.shape[0], n))
    else:
        u = np.full((near.shape[0], n), 0.5)
    return near + (far - near) * (np.arange(n) + u) / n
