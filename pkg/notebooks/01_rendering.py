"""
Rendering a handful of Gaussians
================================

Build a tiny model, render color, depth and coverage, and check one
gradient against a finite difference.
"""

# %%
import numpy as np

from fleetsplat import Camera, GaussianModel, look_at, render, render_backward
from fleetsplat.loss import total_loss

rng = np.random.default_rng(0)
n = 6
model = GaussianModel.from_colors(rng.uniform(-0.8, 0.8, (n, 3)), rng.uniform(0, 1, (n, 3)), 0.3, 0.6,
                                  sh_degree=1)
cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, look_at([0.3, -0.2, 5.0], [0, 0, 0], up=(0, 1, 0)))
out = render(model, cam)
print("color range", out.color.min().round(3), out.color.max().round(3))
print("mean coverage", out.alpha.mean().round(3))

# %%
# Depth is the coverage-weighted sum of splat depths; divide by alpha for a
# per-pixel expected depth.
expected = np.where(out.alpha > 1e-6, out.depth / np.maximum(out.alpha, 1e-12), np.nan)
print("expected depth in covered pixels", np.nanmin(expected).round(3), np.nanmax(expected).round(3))

# %%
# Backpropagate a photometric + depth loss and compare one coordinate with
# a central difference.
target = rng.uniform(0, 1, out.color.shape)
est = 3.0 * out.depth + 1.0 + rng.normal(0, 0.1, out.depth.shape)
value, g_img, g_depth, terms = total_loss(target, out.color, out.depth, est)
grads = render_backward(model, cam, g_img, g_depth, out.aux)


def loss_at(x):
    old = model.positions[0, 0]
    model.positions[0, 0] = x
    o = render(model, cam)
    model.positions[0, 0] = old
    return total_loss(target, o.color, o.depth, est)[0]


x0, h = model.positions[0, 0], 1e-4
fd = (loss_at(x0 + h) - loss_at(x0 - h)) / (2 * h)
print(f"loss {value:.5f}  terms {terms}")
print(f"d loss / d x0: analytic {grads.positions[0, 0]:.6e}  finite difference {fd:.6e}")
