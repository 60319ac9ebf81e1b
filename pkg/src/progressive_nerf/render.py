"""Quadrature volume rendering and image rendering at a chosen head."""

from __future__ import annotations

import dataclasses

import numpy as np
from PIL import Image

from .autodiff import Node, Tape
from .encoding import encode, normalize_position
from .field import FieldParams, forward
from .geometry import Camera, Ray, camera_rays, stratified_samples_batch

WHITE = (1.0, 1.0, 1.0)
NEGATIVE_TOLERANCE = 1e-12


@dataclasses.dataclass
class RenderOutput:
    color: np.ndarray
    weights: np.ndarray
    depth_proxy: np.ndarray
    accumulated_opacity: np.ndarray
    transmittance: np.ndarray  # T_1..T_N followed by the residual T_{N+1}


@dataclasses.dataclass
class CompositeNodes:
    color: Node  # (R, 3)
    weights: Node  # (R, N)
    transmittance: Node  # (R, N + 1)


def sample_deltas(t_values, t_far) -> np.ndarray:
    """Interval lengths ``t_{k+1} - t_k`` with the last interval clipped at ``t_far``."""
    t = np.asarray(t_values, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    nxt = np.concatenate([t[..., 1:], np.broadcast_to(t_far, t.shape[:-1])[..., None]], axis=-1)
    return nxt - t


def composite_nodes(tape: Tape, sigma: Node, rgb: Node, deltas, background=None) -> CompositeNodes:
    """Differentiable compositing of (R, N) densities and (R, N, 3) colours."""
    deltas = np.asarray(deltas, dtype=sigma.value.dtype)
    tau = tape.mul(sigma, deltas)
    alpha = 1.0 - tape.exp(-tau)
    # T_k for k = 1..N+1 from one running sum, so T never increases by rounding
    pad = tape.constant(np.zeros(tau.shape[:-1] + (1,), dtype=tau.value.dtype))
    depth = tape.cumsum_exclusive(tape.concat([tau, pad], axis=-1))
    trans = tape.exp(-depth)
    weights = tape.mul(tape.take(trans, slice(0, -1)), alpha)
    color = tape.sum(tape.mul(tape.reshape(weights, weights.shape + (1,)), rgb), axis=-2)
    if background is not None:
        residual = tape.take(trans, slice(-1, None))
        bg = np.asarray(background, dtype=sigma.value.dtype)
        color = color + tape.mul(residual, bg)
    return CompositeNodes(color, weights, trans)


def _check_densities(sigma: np.ndarray) -> np.ndarray:
    if np.any(sigma < -NEGATIVE_TOLERANCE):
        raise ValueError(f"negative density {sigma.min()}")
    return np.maximum(sigma, 0.0)


def composite(densities, colors, t_values, t_far: float, background=None) -> RenderOutput:
    """Composite one ray; ``background`` is optional (``None`` means black)."""
    sigma = np.asarray(densities, dtype=np.float64)
    rgb = np.asarray(colors, dtype=np.float64)
    t = np.asarray(t_values, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] < 1 or rgb.shape != (sigma.shape[0], 3) or t.shape != sigma.shape:
        raise ValueError(
            f"length mismatch: densities {sigma.shape}, colors {rgb.shape}, t_values {t.shape}"
        )
    if np.any(np.diff(t) <= 0) or t_far < t[-1]:
        raise ValueError("t_values must be ascending and end before t_far")
    sigma = _check_densities(sigma)
    tape = Tape(record=False)
    out = composite_nodes(
        tape, tape.constant(sigma[None]), tape.constant(rgb[None]), sample_deltas(t, t_far)[None], background
    )
    w = out.weights.value[0]
    acc = w.sum()
    depth = (w * t).sum() / acc if acc > 0 else t_far
    return RenderOutput(out.color.value[0], w, np.float64(depth), acc, out.transmittance.value[0])


@dataclasses.dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> RayBatch:
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


@dataclasses.dataclass
class HeadRender:
    color: Node  # (R, 3)
    weights: Node  # (R, N)
    t_values: np.ndarray  # (R, N)


def render_rays(
    tape: Tape,
    field: FieldParams,
    rays: RayBatch,
    head: int | None = None,
    n_samples: int = 128,
    rng: np.random.Generator | None = None,
    jitter: bool = False,
    background=WHITE,
) -> list[HeadRender]:
    """Render a batch of rays at every head 1..head (last entry = ``head``)."""
    R = len(rays)
    dtype = field.params.dtype
    t = stratified_samples_batch(rays.near, rays.far, n_samples, rng, jitter)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    enc = field.config.encoding
    gx = encode(normalize_position(pts.reshape(-1, 3).astype(dtype), enc), enc.M_pos)
    gd_ray = encode(rays.directions.astype(dtype), enc.M_dir)
    gd = np.broadcast_to(gd_ray[:, None, :], (R, n_samples, gd_ray.shape[-1])).reshape(R * n_samples, -1)
    deltas = sample_deltas(t, rays.far)
    outs = []
    for head_out in forward(tape, field, gx, gd, head):
        sigma = tape.reshape(head_out.density, (R, n_samples))
        rgb = tape.reshape(head_out.color, (R, n_samples, 3))
        comp = composite_nodes(tape, sigma, rgb, deltas, background)
        outs.append(HeadRender(comp.color, comp.weights, t))
    return outs


def _to_output(h: HeadRender, far) -> RenderOutput:
    w = h.weights.value.astype(np.float64)
    acc = w.sum(axis=-1)
    depth = np.where(acc > 0, (w * h.t_values).sum(axis=-1) / np.maximum(acc, 1e-300), far)
    return RenderOutput(h.color.value.astype(np.float64), w, depth, acc, None)


def render_ray(
    field: FieldParams,
    ray: Ray,
    head: int | None = None,
    n_samples: int = 128,
    rng=None,
    jitter: bool = False,
    background=WHITE,
) -> RenderOutput:
    batch = RayBatch(ray.origin[None], ray.direction[None], np.array([ray.t_near]), np.array([ray.t_far]))
    tape = Tape(field.params, record=False)
    h = render_rays(tape, field, batch, head, n_samples, rng, jitter, background)[-1]
    out = _to_output(h, batch.far)
    return RenderOutput(out.color[0], out.weights[0], out.depth_proxy[0], out.accumulated_opacity[0], None)


def render_image(
    field: FieldParams,
    camera: Camera,
    head: int | None = None,
    n_samples: int = 128,
    background=WHITE,
    chunk: int = 4096,
    accessed: set | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (midpoint-sampled) image and depth map at ``head``.

    If ``accessed`` is given it collects the parameter segments read.
    """
    enc = field.config.encoding
    origins, dirs, near, far = camera_rays(camera, enc.scene_center, enc.scene_radius)
    rays = RayBatch(origins, dirs, near, far)
    colors, depths = [], []
    for start in range(0, len(rays), chunk):
        sub = rays.subset(slice(start, start + chunk))
        tape = Tape(field.params, record=False)
        h = render_rays(tape, field, sub, head, n_samples, None, False, background)[-1]
        out = _to_output(h, sub.far)
        colors.append(out.color)
        depths.append(out.depth_proxy)
        if accessed is not None:
            accessed |= tape.accessed
    image = np.concatenate(colors).reshape(camera.height, camera.width, 3)
    depth = np.concatenate(depths).reshape(camera.height, camera.width)
    return np.clip(image, 0.0, 1.0), depth


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth_png(depth: np.ndarray, near: float, far: float, path) -> None:
    """16-bit grayscale with ``near -> 0`` and ``far -> 65535``."""
    scaled = np.clip((depth - near) / (far - near), 0.0, 1.0)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)
