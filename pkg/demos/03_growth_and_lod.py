"""Grow-and-train on two scales, then render from each head.

Run: python demos/03_growth_and_lod.py   (about two minutes on one core)
"""

import numpy as np

from progressive_nerf.curriculum import TrainConfig, run_curriculum
from progressive_nerf.field import FieldConfig
from progressive_nerf.metrics import freq_channel_weights, high_band_mass, psnr
from progressive_nerf.render import render_image
from progressive_nerf.scenegen import build_synthetic_scene, generate_orbit_dataset

scene = build_synthetic_scene(seed=0)
ds = generate_orbit_dataset(scene, L_max=2, views_per_scale=6, width=48, height=48)
train = TrainConfig(iters_per_stage=800, batch_size=256, n_samples=48, base_lr=2e-3, lr_final=2e-4, precision="float32")


def report(field, stage, log):
    # right after a grow the new head is an exact copy of the old one,
    # so the first stage-2 losses continue the stage-1 curve
    print(f"stage {stage} done: depth {field.depth}, {field.size} parameters, {log.stage_seconds[-1]:.0f}s")


field, log = run_curriculum(ds, FieldConfig(width=64), train, on_stage_end=report)
h1 = [r["loss"] for r in log.records if r["stage"] == 2 and r["head"] == 1]
h2 = [r["loss"] for r in log.records if r["stage"] == 2 and r["head"] == 2]
print(f"first stage-2 batch: head-1 loss {h1[0]:.3f}, head-2 loss {h2[0]:.3f} (head 2 also sees close rays)")
print(f"last stage-2 batch:  head-1 loss {h1[-1]:.3f}, head-2 loss {h2[-1]:.3f}")

print("\ntest PSNR by head (rows) and view scale (columns)")
for head in (1, 2):
    row = []
    for v in ds.split("test"):
        pred, _ = render_image(field, v.camera, head, 64)
        row.append(f"scale {v.stage}: {psnr(np.round(pred * 255) / 255, v.image):5.2f}")
    print(f"  head {head}   " + "   ".join(row))

for block in (1, 2):
    w = freq_channel_weights(field, block)
    print(f"block {block}: share of weight in the top third of frequency bands {high_band_mass(w):.3f}")
