"""Image quality metrics and the per-frequency weight diagnostic."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .encoding import band_of_entry
from .field import FieldParams

PSNR_INF = math.inf
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5
SSIM_SIZE = 11


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` if identical."""
    err = mse(a, b)
    if err == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1) if x.ndim == 3 else x


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every full 11x11 window (no padding)."""
    a, b = _pair(a, b)
    a, b = _gray(a), _gray(b)
    if a.shape[0] < SSIM_SIZE or a.shape[1] < SSIM_SIZE:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_SIZE}x{SSIM_SIZE} window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    return float(np.clip(ssim_map(a, b).mean(), -1.0, 1.0))


def pe_blocks(field: FieldParams) -> list[int]:
    """Blocks whose first layer reads the position encoding."""
    return [b for b in range(1, field.depth + 1) if b == 1 or field.config.skip]


def freq_channel_weights(field: FieldParams, block: int) -> np.ndarray:
    """RMS of first-layer weights per encoding band, normalised to sum to 1."""
    if block not in pe_blocks(field):
        raise ValueError(f"block {block} has no position-encoding input")
    cfg = field.config
    w = field.params.get(f"b{block}/layer0/w").astype(np.float64)
    if block > 1:
        w = w[cfg.width :]
    bands = band_of_entry(cfg.encoding.M_pos)
    rms = np.array([np.sqrt(np.mean(w[bands == j] ** 2)) for j in range(cfg.encoding.M_pos)])
    total = rms.sum()
    if total == 0:
        return np.zeros_like(rms)
    return rms / total


def high_band_mass(weights: np.ndarray, fraction: float = 1 / 3) -> float:
    """Total mass in the top ``fraction`` of bands (rounded up)."""
    k = max(1, math.ceil(len(weights) * fraction))
    return float(np.sum(weights[-k:]))


ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X")


def stage_name(stage: int) -> str:
    return f"Stage {ROMAN[stage - 1]}" if stage <= len(ROMAN) else f"Stage {stage}"


def summarize(per_view: list[tuple[int, float, float]], L_max: int) -> dict:
    """Per-scale mean PSNR/SSIM and the mean over all views.

    ``per_view`` holds (stage, psnr, ssim) triples.
    """
    out = {"psnr": {}, "ssim": {}}
    for stage in range(1, L_max + 1):
        rows = [r for r in per_view if r[0] == stage]
        out["psnr"][stage] = float(np.mean([r[1] for r in rows])) if rows else math.nan
        out["ssim"][stage] = float(np.mean([r[2] for r in rows])) if rows else math.nan
    out["psnr"]["avg"] = float(np.mean([r[1] for r in per_view]))
    out["ssim"]["avg"] = float(np.mean([r[2] for r in per_view]))
    return out


def evaluate_views(field, dataset, split: str = "test", head: int | None = None, n_samples: int = 128, background=(1.0, 1.0, 1.0)) -> dict:
    """Render every view of ``split`` at ``head`` and summarise per scale."""
    from .render import render_image, to_uint8

    rows = []
    for v in dataset.split(split):
        pred, _ = render_image(field, v.camera, head, n_samples, background)
        pred = to_uint8(pred) / 255.0
        rows.append((v.stage, psnr(pred, v.image), ssim(pred, v.image)))
    return summarize(rows, dataset.L_max)


def _fmt(x: float, digits: int) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.{digits}f}"


def format_table(summary: dict, L_max: int, header: str = "") -> str:
    """Plain-text table: one column per stage (remote to close) then the average."""
    cols = [stage_name(s) for s in range(1, L_max + 1)] + ["Avg"]
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("\t".join(["metric"] + cols))
    for key, label, digits in (("psnr", "PSNR", 3), ("ssim", "SSIM", 4)):
        vals = [summary[key][s] for s in range(1, L_max + 1)] + [summary[key]["avg"]]
        lines.append("\t".join([label] + [_fmt(v, digits) for v in vals]))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict:
    """Inverse of :func:`format_table` (values as floats)."""
    rows = [ln.split("\t") for ln in text.splitlines() if ln and not ln.startswith("#")]
    cols = rows[0][1:]
    return {r[0]: dict(zip(cols, (float(x) for x in r[1:]))) for r in rows[1:]}
