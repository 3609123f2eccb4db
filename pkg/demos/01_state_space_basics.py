"""
State space basics
==================

A continuous diagonal system h' = A h + B x, y = C h, discretized with a
zero-order hold, run two ways: as a recurrence and as a causal convolution.
Then the input-selective version used inside the encoder blocks.

Run with ``python3 demos/01_state_space_basics.py``.
"""

import numpy as np

from ssamba import numerics as nx
from ssamba import ssm

rng = np.random.default_rng(0)

# A four-state system with stable (negative) eigenvalues
A = -np.array([0.5, 1.0, 2.0, 4.0])
B = rng.standard_normal(4)
C = rng.standard_normal(4)

d = ssm.discretize_zoh(A, B, delta=0.1)
print("Ad =", np.round(d.Ad, 4))
print("Bd =", np.round(d.Bd, 4))

# Recurrence and convolution give the same output
x = rng.standard_normal(32)
y_scan = ssm.lti_scan(d, C, x)
K = ssm.ssm_kernel(d, C, len(x))
y_conv = ssm.kernel_apply(x, K)
print("scan vs kernel, max abs diff:", np.abs(y_scan - y_conv).max())

# The kernel decays at the rate of the slowest mode
print("first kernel taps:", np.round(K[:6], 4))

# %%
# Selective scan: step size, B and C now vary per token.
M, channels, N = 12, 3, 4
u = rng.standard_normal((M, channels))
delta = rng.uniform(0.01, 0.5, (M, channels))
A_sel = -rng.uniform(0.1, 2.0, (channels, N))
B_t = rng.standard_normal((M, N))
C_t = rng.standard_normal((M, N))
D_skip = np.ones(channels)

y = ssm.selective_scan(u, delta, A_sel, B_t, C_t, D_skip).data
ref = ssm.selective_scan_reference(u, delta, A_sel, B_t, C_t, D_skip)
print("selective scan vs triple loop:", np.abs(y - ref).max())

# Gradients of the scan, checked against finite differences
w = rng.standard_normal((M, channels))
err = nx.gradient_check(lambda *a: nx.tsum(nx.mul(ssm.selective_scan(*a), w)),
                        [u, delta, A_sel, B_t, C_t, D_skip])
print("gradient relative error:", err)

# %%
# One bidirectional block on random embeddings
dims = ssm.BlockDims(64)
weights = ssm.init_block(dims, nx.make_rng(0, "demo-block"))
E = nx.as_tensor(rng.standard_normal((20, 64)).astype(np.float32))
H = ssm.mamba_block(E, weights)
print("block output shape:", H.shape)
print("mean |H - E| (what the block adds):", float(np.abs(H.data - E.data).mean()))
