"""Check the sampler end to end with a closed-form denoiser, no network involved.

For unit-Gaussian scalar data the optimal noise prediction is
eps_hat(x_t, t) = sqrt(1 - alpha_bar_t) * x_t, so ancestral sampling driven by
it should return samples with zero mean and unit variance.

Run:  python demos/03_diffusion_oracle.py
"""

import numpy as np
import torch

from ammdiff.diffusion import make_schedule, q_sample, sample_loop

schedule = make_schedule(T=200)
print(f"T={schedule.T}, alpha_bar[T-1]={schedule.alpha_bar[-1]:.4f}")

root = torch.as_tensor(np.sqrt(1.0 - schedule.alpha_bar))


def oracle(x_t, t, condition):
    return root[t].to(x_t.dtype) * x_t


x0 = sample_loop(oracle, None, schedule, np.random.default_rng(0), (10_000,), dtype=torch.float64)
print(f"oracle samples: mean {x0.mean():+.4f}, variance {x0.var():.4f}")

# The forward marginal in closed form: x_t = sqrt(ab) x0 + sqrt(1 - ab) eps.
t = schedule.T // 2
eps = torch.randn(100_000, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
xt = q_sample(torch.full_like(eps, 2.0), torch.full((eps.numel(),), t), eps, schedule)
ab = schedule.alpha_bar[t]
print(f"q_sample at t={t}: mean {xt.mean():.4f} (expect {2 * np.sqrt(ab):.4f}), "
      f"std {xt.std():.4f} (expect {np.sqrt(1 - ab):.4f})")
