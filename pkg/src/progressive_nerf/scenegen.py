"""Analytic multi-scale scenes, an exact ray-cast renderer, and staged datasets.

A scene is a square ground patch at z=0 plus axis-aligned boxes. Every
surface carries a band-limited albedo

    A_c(u, v) = 0.5 + 0.5 * sum_b a_b sin(2^b u + phi_cb) sin(2^b v + psi_cb) / sum_b a_b

in its own in-plane coordinates (u, v), so band ``b`` has spatial
frequency exactly ``2^b`` rad per scene unit. With ``prefilter > 0`` each
band is attenuated by ``exp(-(2^b s)^2)``, the exact response of an
isotropic Gaussian pixel filter of std ``s = prefilter * t_hit / focal_px``;
distant cameras therefore see smooth surfaces and close cameras see detail.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .curriculum import assign_stage
from .geometry import Camera, camera_rays, look_at
from .render import load_png, save_png, to_uint8

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


@dataclasses.dataclass(frozen=True)
class Texture:
    amplitudes: np.ndarray  # (B,)
    phase_u: np.ndarray  # (3, B)
    phase_v: np.ndarray  # (3, B)
    tint: np.ndarray  # (3,) multiplies the albedo

    def albedo(self, u, v, blur=None) -> np.ndarray:
        """Albedo at in-plane coordinates; ``blur`` is the per-point filter std."""
        u = np.asarray(u, dtype=np.float64)[..., None, None]
        v = np.asarray(v, dtype=np.float64)[..., None, None]
        k = 2.0 ** np.arange(len(self.amplitudes))
        amp = self.amplitudes / self.amplitudes.sum()
        if blur is not None:
            amp = amp * np.exp(-((k * np.asarray(blur, dtype=np.float64)[..., None, None]) ** 2))
        waves = np.sin(k * u + self.phase_u) * np.sin(k * v + self.phase_v)  # (..., 3, B)
        return self.tint * (0.5 + 0.5 * np.sum(amp * waves, axis=-1))


@dataclasses.dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture


@dataclasses.dataclass(frozen=True)
class SyntheticScene:
    ground_half: float
    ground: Texture
    boxes: tuple[Box, ...]
    scene_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_radius: float = math.pi
    prefilter: float = 0.5
    seed: int = 0
    bands: int = 9

    def ground_albedo(self, x, y, blur=None) -> np.ndarray:
        return self.ground.albedo(x, y, blur)


def _texture(rng: np.random.Generator, bands: int, decay: float, tint=None) -> Texture:
    return Texture(
        amplitudes=decay ** np.arange(bands),
        phase_u=rng.uniform(0, 2 * np.pi, (3, bands)),
        phase_v=rng.uniform(0, 2 * np.pi, (3, bands)),
        tint=np.ones(3) if tint is None else np.asarray(tint),
    )


def build_synthetic_scene(
    seed: int = 0,
    bands: int = 9,
    box_count: int = 6,
    ground_half: float = 2.0,
    decay: float = 0.8,
    prefilter: float = 0.5,
) -> SyntheticScene:
    """Deterministic scene from ``seed``; boxes cluster near the centre."""
    if bands < 1:
        raise ValueError(f"need at least one band, got {bands}")
    rng = np.random.default_rng(seed)
    ground = _texture(rng, bands, decay)
    boxes = []
    for _ in range(box_count):
        size = rng.uniform(0.15, 0.4, 2)
        center = rng.uniform(-0.9, 0.9, 2)
        height = rng.uniform(0.1, 0.5)
        lo = np.array([center[0] - size[0] / 2, center[1] - size[1] / 2, 0.0])
        hi = np.array([center[0] + size[0] / 2, center[1] + size[1] / 2, height])
        tint = rng.uniform(0.35, 1.0, 3)
        boxes.append(Box(lo, hi, _texture(rng, bands, decay, tint)))
    scene = SyntheticScene(ground_half, ground, tuple(boxes), prefilter=prefilter, seed=seed, bands=bands)
    corner = math.hypot(ground_half, ground_half)
    if corner > scene.scene_radius:
        raise ValueError("ground patch does not fit in the scene sphere")
    return scene


def _intersect_box(o, d, box: Box):
    """Slab test; returns (t_hit, axis of the entered face) with inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.lo - o) * inv
        t1 = (box.hi - o) * inv
    t_lo = np.minimum(t0, t1)
    t_hi = np.maximum(t0, t1)
    t_lo = np.where(np.isnan(t_lo), -np.inf, t_lo)
    t_hi = np.where(np.isnan(t_hi), np.inf, t_hi)
    enter = t_lo.max(axis=-1)
    leave = t_hi.min(axis=-1)
    axis = t_lo.argmax(axis=-1)
    hit = (enter <= leave) & (enter > 0)
    return np.where(hit, enter, np.inf), axis


def trace(scene: SyntheticScene, origins, dirs, focal_px: float | None = None):
    """Nearest-hit colours (N, 3) and distances (N,) for unit-direction rays."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = o.shape[0]
    color = np.ones((n, 3))
    best = np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    p = o + np.where(np.isfinite(t_g), t_g, 0.0)[:, None] * d
    on_ground = np.isfinite(t_g) & (t_g > 0) & (np.abs(p[:, 0]) <= scene.ground_half) & (np.abs(p[:, 1]) <= scene.ground_half)
    best = np.where(on_ground, t_g, best)
    kind = np.where(on_ground, 0, -1)
    face_axis = np.zeros(n, dtype=int)
    for i, box in enumerate(scene.boxes):
        t_b, axis = _intersect_box(o, d, box)
        closer = t_b < best
        best = np.where(closer, t_b, best)
        kind = np.where(closer, i + 1, kind)
        face_axis = np.where(closer, axis, face_axis)

    blur = None
    if focal_px is not None and scene.prefilter > 0:
        blur = scene.prefilter * np.where(np.isfinite(best), best, 0.0) / focal_px
    hit_p = o + np.where(np.isfinite(best), best, 0.0)[:, None] * d

    sel = kind == 0
    if sel.any():
        color[sel] = scene.ground_albedo(hit_p[sel, 0], hit_p[sel, 1], None if blur is None else blur[sel])
    for i, box in enumerate(scene.boxes):
        sel = kind == i + 1
        if not sel.any():
            continue
        hp = hit_p[sel]
        ax = face_axis[sel]
        # in-plane coordinates: the two axes other than the face normal
        u = np.where(ax == 0, hp[:, 1], hp[:, 0])
        v = np.where(ax == 2, hp[:, 1], hp[:, 2])
        # offset per face axis so adjacent faces do not share a pattern
        u = u + 1.7 * ax
        color[sel] = box.texture.albedo(u, v, None if blur is None else blur[sel])
    return color, best


def oracle_render(scene: SyntheticScene, camera: Camera) -> np.ndarray:
    """Exact (H, W, 3) image of ``scene``; misses are white."""
    origins, dirs, _, _ = camera_rays(camera, scene.scene_center, scene.scene_radius)
    color, _ = trace(scene, origins, dirs, camera.focal_px)
    return np.clip(color, 0.0, 1.0).reshape(camera.height, camera.width, 3)


@dataclasses.dataclass
class View:
    camera: Camera
    stage: int
    split: str
    image: np.ndarray  # (H, W, 3) float64, quantised to 8-bit levels
    file: str


@dataclasses.dataclass
class StagedDataset:
    views: list[View]
    d_min: float
    L_max: int
    scene_center: tuple[float, float, float]
    scene_radius: float
    meta: dict = dataclasses.field(default_factory=dict)

    def split(self, name: str) -> list[View]:
        return [v for v in self.views if v.split == name]

    def validate(self) -> None:
        for i, v in enumerate(self.views):
            if not 1 <= v.stage <= self.L_max:
                raise DatasetError(f"view {i} ({v.file}): stage {v.stage} outside [1, {self.L_max}]")
            expected = assign_stage(v.camera.target_distance, self.d_min, self.L_max)
            if expected != v.stage:
                raise DatasetError(
                    f"view {i} ({v.file}): stage {v.stage} inconsistent with distance "
                    f"{v.camera.target_distance} (expected {expected})"
                )
        for stage in range(1, self.L_max + 1):
            for split in ("train", "test"):
                if not any(v.stage == stage and v.split == split for v in self.views):
                    raise DatasetError(f"stage {stage} has no {split} views")


def orbit_cameras(
    L_max: int,
    views_per_scale: int,
    d_min: float = 1.5,
    width: int = 96,
    height: int = 96,
    fov_deg: float = 45.0,
    seed: int = 0,
    scene_center=(0.0, 0.0, 0.0),
) -> list[tuple[int, Camera]]:
    """(stage, camera) pairs on circular orbits whose radius grows with altitude."""
    rng = np.random.default_rng(seed)
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    center = np.asarray(scene_center, dtype=np.float64)
    out = []
    for stage in range(1, L_max + 1):
        dist = d_min * 2.0 ** (L_max - stage)
        frac = (L_max - stage) / max(L_max - 1, 1)
        elevation = math.radians(50.0 + 10.0 * frac)
        offset = rng.uniform(0, 2 * np.pi)
        for k in range(views_per_scale):
            az = offset + 2 * np.pi * k / views_per_scale
            pos = center + dist * np.array(
                [math.cos(elevation) * math.cos(az), math.cos(elevation) * math.sin(az), math.sin(elevation)]
            )
            c2w = look_at(pos, center)
            out.append((stage, Camera(c2w, focal, width, height, dist)))
    return out


def generate_orbit_dataset(
    scene: SyntheticScene,
    L_max: int,
    views_per_scale: int,
    seed: int = 0,
    d_min: float = 1.5,
    width: int = 96,
    height: int = 96,
    fov_deg: float = 45.0,
    test_views: int = 1,
) -> StagedDataset:
    """Oracle-rendered orbit views; ``test_views`` per scale are held out.

    The held-out views are evenly spaced around each orbit and include the
    last view, so a single test view is always the last one.
    """
    if views_per_scale < 2:
        raise ValueError("need at least two views per scale (one is held out)")
    if not 1 <= test_views < views_per_scale:
        raise ValueError(f"test_views must lie in [1, {views_per_scale - 1}]")
    if L_max < 1:
        raise ValueError("L_max must be >= 1")
    # held-out views are spread around the orbit, always including the last one
    held_out = {views_per_scale - 1 - j * (views_per_scale // test_views) for j in range(test_views)}
    views = []
    counts: dict[int, int] = {}
    for stage, cam in orbit_cameras(L_max, views_per_scale, d_min, width, height, fov_deg, seed, scene.scene_center):
        k = counts.get(stage, 0)
        counts[stage] = k + 1
        split = "test" if k in held_out else "train"
        image = to_uint8(oracle_render(scene, cam)).astype(np.float64) / 255.0
        views.append(View(cam, stage, split, image, f"images/s{stage}_{k:03d}.png"))
    meta = {"seed": seed, "scene_seed": scene.seed, "bands": scene.bands, "boxes": len(scene.boxes)}
    ds = StagedDataset(views, d_min, L_max, tuple(scene.scene_center), scene.scene_radius, meta)
    ds.validate()
    return ds


def save_dataset(ds: StagedDataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for v in ds.views:
        save_png(v.image, root / v.file)
        records.append(
            {
                "file": v.file,
                "cam_to_world": [float(x) for x in v.camera.cam_to_world.ravel()],
                "focal_px": float(v.camera.focal_px),
                "width": v.camera.width,
                "height": v.camera.height,
                "target_distance": float(v.camera.target_distance),
                "stage": v.stage,
                "split": v.split,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "L_max": ds.L_max,
        "d_min": float(ds.d_min),
        "scene_center": [float(x) for x in ds.scene_center],
        "scene_radius": float(ds.scene_radius),
        "meta": ds.meta,
        "images": records,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(path) -> StagedDataset:
    root = Path(path)
    mpath = root / MANIFEST
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory not found")
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{mpath}: missing manifest") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}:{exc.lineno}: malformed manifest: {exc.msg}") from exc
    try:
        if manifest.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{mpath}: unsupported manifest version {manifest.get('version')}")
        views = []
        for i, rec in enumerate(manifest["images"]):
            where = f"{mpath}: images[{i}]"
            img_path = root / rec["file"]
            if not img_path.is_file():
                raise DatasetError(f"{where}: missing image {img_path}")
            stage = int(rec["stage"])
            if not 1 <= stage <= int(manifest["L_max"]):
                raise DatasetError(f"{where}: stage {stage} outside [1, {manifest['L_max']}]")
            if rec["split"] not in ("train", "test"):
                raise DatasetError(f"{where}: unknown split {rec['split']!r}")
            try:
                cam = Camera(
                    np.array(rec["cam_to_world"], dtype=np.float64).reshape(3, 4),
                    float(rec["focal_px"]),
                    int(rec["width"]),
                    int(rec["height"]),
                    float(rec["target_distance"]),
                )
            except ValueError as exc:
                raise DatasetError(f"{where}: bad camera: {exc}") from exc
            image = load_png(img_path)
            if image.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"{where}: image {img_path} has shape {image.shape}")
            views.append(View(cam, stage, rec["split"], image, rec["file"]))
        ds = StagedDataset(
            views,
            float(manifest["d_min"]),
            int(manifest["L_max"]),
            tuple(float(x) for x in manifest["scene_center"]),
            float(manifest["scene_radius"]),
            dict(manifest.get("meta", {})),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{mpath}: malformed manifest: {exc!r}") from exc
    ds.validate()
    return ds
