"""Siamese masked-image pretraining of the image-frequency fusion encoder.

One branch sees the complete stack, the other a patch-masked copy; the loss is
the negative cosine similarity between their representations, with gradients
stopped through the complete branch.

Run:  python demos/04_pretrain_iffn.py [steps]
"""

import sys
import tempfile

import numpy as np
import torch

from ammdiff.dataset import PatchMaskSpec, PhantomSpec, generate_phantom_dataset, load_stack
from ammdiff.iffn import IFFNConfig, build_iffn
from ammdiff.training import moving_average, pretrain_iffn

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150

handle = generate_phantom_dataset(PhantomSpec(tempfile.mkdtemp(), n_subjects=24, height=32, width=32, seed=0))
images = load_stack(handle)

model = build_iffn(IFFNConfig(base_channels=16, rep_channels=32, n_res_blocks=2), seed=0)
_, losses = pretrain_iffn(model, images, steps, seed=0, mask_spec=PatchMaskSpec(patch_size=8, mask_ratio=0.5),
                          batch_size=8, lr=1e-3)
smooth = moving_average(losses, 20)
print(f"loss {losses[0]:.4f} -> {smooth[-1]:.4f} over {steps} steps "
      f"({100 * (1 - smooth[-1] / losses[0]):.0f}% drop)")

with torch.no_grad():
    from ammdiff.spectral import spectral_features
    rep = model(torch.as_tensor(images[:2]), torch.as_tensor(spectral_features(images[:2])))
print("representation shape (half resolution):", tuple(rep.shape))
