"""How group-normalised advantages and the clipped objective behave on a toy group."""
import math

import numpy as np
import torch

from refavs.grpo import compute_advantages, grpo_objective

rewards = np.array([3.0, 2.1, 1.0, 2.1])
adv = compute_advantages(rewards)
print("rewards   :", rewards)
print("advantages:", adv.round(4), " mean", round(float(adv.mean()), 12), " std", round(float(adv.std()), 12))
print("all-equal group ->", compute_advantages([2.0, 2.0, 2.0]))
print()

old = torch.zeros(1, 1, dtype=torch.float64)
for ratio in (0.5, 0.9, 1.0, 1.1, 2.0):
    new = torch.full((1, 1), math.log(ratio), dtype=torch.float64)
    pos = grpo_objective(new, old, torch.tensor([1.0], dtype=torch.float64), 0.2).item()
    neg = grpo_objective(new, old, torch.tensor([-1.0], dtype=torch.float64), 0.2).item()
    print(f"ratio {ratio:3.1f}: loss(A=+1) {pos:+.3f}  loss(A=-1) {neg:+.3f}")
