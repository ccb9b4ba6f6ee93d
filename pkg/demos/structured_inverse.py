"""Apply M_theta and its closed-form inverse without forming either matrix.

A random small instance is built, the structured operator is probed
column by column and the result is compared to a dense assembly.
"""

import numpy as np

from hdsa.oracle import appendix_identities, dense_mtheta, probe, random_instance

rng = np.random.default_rng(3)
inst = random_instance(rng, m=5, n=4)
op = inst.operator()

M = dense_mtheta(inst)
Minv = probe(op.inv_apply, inst.m, inst.n)
print(f"p = m (n + 1) = {M.shape[0]}")
print(f"cond(M_theta)         = {np.linalg.cond(M):.3e}")
print(f"max |M_theta Minv - I| = {np.abs(M @ Minv - np.eye(M.shape[0])).max():.2e}")

for name, value in appendix_identities(inst, x=op.x).items():
    print(f"{name}: residual {value:.2e}")
