"""
How big are the benchmarked models?
===================================

Full-size models are built on PyTorch's ``meta`` device, so parameters and
FLOPs can be counted without allocating memory. The toy versions used for
desk-scale runs are profiled for real, including batch inference time.
"""

import torch

from gbmbench.harness.profile import profile
from gbmbench.zoo import PAPER_COMPLEXITY, build, paper_catalog, toy_scale

print(f"{'model':16s} {'params (M)':>11s} {'ref (M)':>9s} {'GFLOPs':>9s} {'ref':>9s}")
for spec in paper_catalog():
    with torch.device("meta"):
        model = build(spec, allow_random_init=True)
        rec = profile(model, spec.input_shape, timing=False)
    ref_g, ref_m = PAPER_COMPLEXITY[spec.key]
    print(f"{spec.key:16s} {rec.params / 1e6:11.4f} {ref_m:9.4f} {rec.flops_per_sample / 1e9:9.3f} {ref_g:9.3f}")

# %%
# Toy scale: same architectures with narrower layers and 32^3 inputs.

for spec in paper_catalog():
    toy = toy_scale(spec)
    rec = profile(build(toy, seed=0), toy.input_shape, batch_size=8, n_timed=20)
    print(f"{toy.key:16s} {rec.params:8d} params  {rec.batch_time_mean_s * 1e3:7.2f} ms per batch of 8")
