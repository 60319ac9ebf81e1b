"""A staged synthetic dataset, and why remote views need fewer frequencies.

Run: python demos/02_dataset.py [out_dir]
"""

import sys
from collections import Counter

import numpy as np

from progressive_nerf.geometry import Camera, look_at
from progressive_nerf.scenegen import build_synthetic_scene, generate_orbit_dataset, oracle_render, save_dataset

scene = build_synthetic_scene(seed=0, bands=9, box_count=6)
ds = generate_orbit_dataset(scene, L_max=3, views_per_scale=5, width=64, height=64)

print("views per (stage, split):", dict(sorted(Counter((v.stage, v.split) for v in ds.views).items())))
for stage in range(1, ds.L_max + 1):
    v = next(v for v in ds.views if v.stage == stage)
    print(f"stage {stage}: camera distance {v.camera.target_distance:5.2f}, image mean {v.image.mean():.3f}, std {v.image.std():.3f}")

# The ground texture is a sum of bands at frequency 2^b. Seen from far away a
# pixel covers many periods of the high bands, so the oracle filters them out
# just as a real pixel would average them.
line = np.linspace(-1, 1, 2048)
for dist in (1.5, 6.0):
    blur = scene.prefilter * dist / 77.0  # footprint of one pixel at this distance (64 px, 45 deg fov)
    sharp = scene.ground_albedo(line, 0.3 * np.ones_like(line))[:, 0]
    seen = scene.ground_albedo(line, 0.3 * np.ones_like(line), blur * np.ones_like(line))[:, 0]
    spectrum = np.abs(np.fft.rfft(seen - seen.mean()))
    freqs = np.fft.rfftfreq(line.size, d=line[1] - line[0]) * 2 * np.pi
    top = freqs[spectrum > 0.05 * spectrum.max()].max()
    print(f"distance {dist}: texture std {sharp.std():.3f} -> {seen.std():.3f} after the pixel filter, "
          f"highest strong frequency ~{top:.0f} rad/unit")

# Straight down from overhead: with the filter off, each pixel shows the
# albedo exactly at the point its centre ray hits.
top_down = Camera(look_at([0, 0, 3.0], [0, 0, 0], up=(0, 1, 0)), 60.0, 16, 16, 3.0)
img = oracle_render(scene, top_down)
print("overhead 16x16 render, value range:", img.min().round(3), img.max().round(3))

if len(sys.argv) > 1:
    save_dataset(ds, sys.argv[1])
    print("saved to", sys.argv[1])
