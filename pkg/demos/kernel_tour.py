"""Quasi-linear attention on small inputs: outputs, oracles, tiling and gradients.

Run: python3 demos/kernel_tour.py
"""
import numpy as np

from vista.attention import SourceTargetSplit, mixed_masked_attn, qla_backward, qla_forward, qla_forward_blockwise
from vista.gradcheck import kernel_suite
from vista.numerics import ActivationKind

rng = np.random.default_rng(0)
n, m, d = 12, 3, 4
split = SourceTargetSplit(*(rng.normal(size=(n if i % 2 == 0 else m, d)) for i in range(6)))

# Sources attend to each other; each target sees every source plus itself.
o_s, o_t, saved = qla_forward(split)
print("source outputs", o_s.shape, "target outputs", o_t.shape)

# With identity feature maps the linear form equals the dense masked product.
lin_s, lin_t, _ = qla_forward(split, ActivationKind.IDENTITY)
dense = mixed_masked_attn(split)
print("max |linear - dense|:", np.abs(np.vstack([lin_s, lin_t]) - dense).max())

# Tiling over source rows gives the same answer for any block size.
for block in (1, 5, 64):
    b_s, b_t, _ = qla_forward_blockwise(split, block=block)
    print(f"block {block:3d}: max diff {max(np.abs(b_s - o_s).max(), np.abs(b_t - o_t).max()):.1e}")

# Analytic gradients for an arbitrary upstream signal.
grads = qla_backward(saved, split, np.ones_like(o_s), np.ones_like(o_t))
print("d_qs norm", np.linalg.norm(grads.d_qs), "d_vt norm", np.linalg.norm(grads.d_vt))

# Finite-difference check over three shapes and all feature maps.
results = kernel_suite(seeds=2)
print(f"{sum(r.passed for r in results)}/{len(results)} gradient checks pass, "
      f"worst relative error {max(r.worst for r in results):.1e}")
