"""Compositing by hand, then through the library.

Run: python demos/01_compositing.py
"""

import math

import numpy as np

from progressive_nerf.autodiff import ParamVector, grad_check
from progressive_nerf.render import composite, composite_nodes

# Two samples with unit density, half a unit apart, ending at t=1.
# Sample 1 absorbs 1 - e^-0.5 of the light; sample 2 gets the remaining e^-0.5.
a = 1 - math.exp(-0.5)
print("by hand       weights", [round(a, 5), round(math.exp(-0.5) * a, 5)])

out = composite([1.0, 1.0], [[1, 0, 0], [0, 1, 0]], [0.0, 0.5], t_far=1.0)
print("composite     weights", np.round(out.weights, 5), "color", np.round(out.color, 5))
print("left over (transmittance past the last sample):", round(out.transmittance[-1], 5), "= e^-1")

# A white background picks up whatever is left over.
out = composite([1.0, 1.0], [[1, 0, 0], [0, 1, 0]], [0.0, 0.5], t_far=1.0, background=(1, 1, 1))
print("with white background:", np.round(out.color, 5))

# A uniform fog of density s over length D lets e^(-s D) through, however it is sliced.
s, D = 0.7, 3.0
for n in (2, 8, 64):
    t = np.linspace(0, D, n, endpoint=False)
    fog = composite(np.full(n, s), np.zeros((n, 3)), t, D, background=(1, 1, 1))
    print(f"fog sliced into {n:2d} samples -> background share {fog.color[0]:.6f}  (closed form {math.exp(-s * D):.6f})")

# Gradients of a colour loss through the compositor, checked against central differences.
rng = np.random.default_rng(0)
p = ParamVector()
p.add("sigma", rng.uniform(0.1, 3, (4, 8)))
p.add("rgb", rng.uniform(size=(4, 8, 3)))
deltas = rng.uniform(0.05, 0.4, (4, 8))
target = rng.uniform(size=(4, 3))


def loss(tape):
    c = composite_nodes(tape, tape.param("sigma"), tape.param("rgb"), deltas, (1.0, 1.0, 1.0)).color
    return tape.sum(tape.square(c - target))


report = grad_check(loss, p)
print(f"gradient check over {report.checked} parameters: worst relative error {report.max_rel_error:.1e}")
