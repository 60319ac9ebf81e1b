"""Full curriculum against a joint baseline and the ablations, at reduced length.

Run: python demos/04_ablations.py [iters_per_stage]   (about 30 minutes at the default 1000)
"""

import sys

from progressive_nerf import metrics as M
from progressive_nerf.curriculum import TrainConfig, run_curriculum
from progressive_nerf.field import FieldConfig
from progressive_nerf.scenegen import build_synthetic_scene, generate_orbit_dataset

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
ds = generate_orbit_dataset(build_synthetic_scene(0), L_max=2, views_per_scale=10, test_views=2)

variants = {
    "full": (),
    "joint (all data, fixed depth, last head)": ("no_data_schedule", "no_growing"),
    "w/o multi-level supervision": ("no_multilevel_sup",),
    "w/o data schedule": ("no_data_schedule",),
    "w/o growing": ("no_growing",),
    "w/o skip": ("no_skip",),
    "w/o residual": ("no_residual",),
}
print(f"{'variant':42s} {'Stage I':>8s} {'Stage II':>8s} {'Avg':>8s}   params")
for name, flags in variants.items():
    train = TrainConfig(
        iters_per_stage=iters, batch_size=256, n_samples=48, base_lr=2e-3, lr_final=2e-4,
        precision="float32", ablations=flags,
    )
    field, _ = run_curriculum(ds, FieldConfig(width=64), train)
    s = M.evaluate_views(field, ds, "test", field.depth, 128)["psnr"]
    print(f"{name:42s} {s[1]:8.2f} {s[2]:8.2f} {s['avg']:8.2f}   {field.size}", flush=True)
