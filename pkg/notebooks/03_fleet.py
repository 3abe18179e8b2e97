"""
A small fleet over loopback
===========================

Four devices train on their own region of a 16-view scene and upload; the
server filters, merges and distills the result.  Takes a few minutes.
"""

# %%
import tempfile
from pathlib import Path

from fleetsplat import pipeline as PL
from fleetsplat.aggregate import DistillConfig
from fleetsplat.data import layout
from fleetsplat.data.formats import load_model
from fleetsplat.data.synthetic import SceneParams, synth_scene

root = Path(tempfile.mkdtemp()) / "scene"
scene = synth_scene(0, SceneParams(n_cameras=16, n_gaussians=2400))
layout.write_scene(root, scene)
print("views per device", PL.partition(root, 4))

# %%
result = PL.run_fleet(root, PL.train_config(root, steps=600), DistillConfig(epochs=5, background=PL.background(root)))
print("device exit codes", {d: r.exit_code for d, r in result.devices.items()})
print("distillation loss per epoch", [round(v, 5) for v in result.server.epoch_losses])

# %%
# Held-out PSNR: each device alone against the aggregated model.
for d in range(4):
    m = load_model(layout.device_dir(root, d) / "trained.dgs")
    print(f"device {d}: {PL.mean_psnr(PL.evaluate(m, root)):.2f} dB")
print(f"global:   {PL.mean_psnr(PL.evaluate(result.server.model, root)):.2f} dB")
