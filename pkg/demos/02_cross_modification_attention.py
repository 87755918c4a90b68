"""
Cross modification attention
============================

A query attends over visual regions and draft tokens with two multi-head
blocks.  Each context is filtered by a gated linear unit, and then each
modality is gated by a sigmoid computed from the query plus *both*
filtered contexts.  The gate biases make the behaviour easy to see: a
closed visual gate leaves only the residual path.
"""

import numpy as np

from cmadm.attention import CmaParams, cma_forward, glu_filter, multi_head
from cmadm.captioner import cma_weights_ok
from cmadm.tensor import Tensor

rng = np.random.default_rng(1)
d = 8
params = CmaParams.init(rng, d, d, d, d, heads=2, d_c=4, d_c2=4, mode="cma_d",
                        residual_visual=True, residual_textual=False)
query = Tensor(rng.normal(size=(1, d)))
regions = Tensor(rng.normal(size=(5, d)))
draft = Tensor(rng.normal(size=(7, d)))

out = cma_forward(query, regions, draft, params)
np.set_printoptions(precision=3, suppress=True)
for h, w in enumerate(out.visual_weights):
    print(f"head {h} over regions:", w[0])
for h, w in enumerate(out.textual_weights):
    print(f"head {h} over draft :", w[0])
print("all rows are distributions:", cma_weights_ok(out))

# %%
# Saturating the visual gate.  With the bias at -50 the gated term vanishes
# and the output is the plain multi-head context; at +50 the filtered
# context is added on top of it.
plain, _ = multi_head(query, regions, regions, params.mh_a)
filtered = glu_filter(query, plain, params.glu_a)
for bias in (-50.0, 50.0):
    params.bc_a.value[:] = bias
    got = cma_forward(query, regions, draft, params).visual_context.value
    print(f"bias {bias:+.0f}: |out - plain| = {np.abs(got - plain.value).max():.2e}, "
          f"|out - (plain + glu)| = {np.abs(got - plain.value - filtered.value).max():.2e}")
