"""Train a small conditional diffusion model on phantoms and synthesise a missing channel.

This is deliberately tiny (32x32 images, a few hundred steps) so it finishes in
a couple of minutes on a laptop CPU; expect blurry but recognisable output.

Run:  python demos/05_train_and_impute.py [steps]
"""

import sys
import tempfile

import numpy as np
import torch

from ammdiff.dataset import PhantomSpec, generate_phantom_dataset, load_stack, split_dataset
from ammdiff.diffusion import make_schedule
from ammdiff.evaluation import psnr
from ammdiff.iffn import IFFNConfig
from ammdiff.model import ModelConfig, build_model, impute
from ammdiff.training import train_amm

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

handle = generate_phantom_dataset(PhantomSpec(tempfile.mkdtemp(), n_subjects=30, height=32, width=32, seed=0))
train, _, test = split_dataset(handle, (0.6, 0.2, 0.2), seed=0)
images, held_out = load_stack(train), load_stack(test)

schedule = make_schedule(T=100, beta_start=1e-3, beta_end=0.2)
model = build_model(ModelConfig(base_channels=16, parameterization="v"), IFFNConfig(base_channels=16, rep_channels=32, n_res_blocks=2), seed=0)
_, losses = train_amm(model, images, schedule, steps, seed=0, batch_size=8, lr=1e-3)
print(f"diffusion loss {losses[0]:.3f} -> {np.mean(losses[-20:]):.3f}")

mask = np.array([True, True, True, False])  # T2 missing
generated, composite = impute(model, held_out[0], mask, schedule, np.random.default_rng(0))
print("generated channels:", generated.shape[0])
print("present channels kept verbatim:", bool(np.array_equal(composite[:3], held_out[0][:3])))
print(f"T2 synthesis PSNR {psnr(generated[3], held_out[0][3]):.2f} dB")
