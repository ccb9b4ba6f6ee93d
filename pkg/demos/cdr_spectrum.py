"""Leading discrepancy sensitivities of the 2D convection-diffusion-reaction problem.

The randomized GSVD ranks discrepancy directions by how strongly they move
the optimal control. A fast spectral decay means a few directions explain
most of the sensitivity. The default 16x16 mesh runs in seconds; pass 32
for the full size (about a minute and a half on one core).
"""

import sys
import time

import numpy as np

from hdsa import cli
from hdsa.gsvd import table2_expected

mesh = int(sys.argv[1]) if len(sys.argv) > 1 else 16
k = int(sys.argv[2]) if len(sys.argv) > 2 else 20
cfg = cli.RunConfig.from_dict({"problem": "cdr2d", "mesh": mesh, "k": k})

t0 = time.perf_counter()
setup, opt, ctx, res = cli.run_hdsa(cfg)
print(f"mesh {mesh}x{mesh}, m = {ctx.m}, n = {ctx.n}, d = {res.d}, q = {res.q}  ({time.perf_counter() - t0:.1f}s)")
print(f"optimal control: {len(opt.history)} Newton steps, |grad| = {opt.gradient_norm:.2e}")

s = res.sigma[:k]
print("\nsingular values")
for i in range(0, s.size, 5):
    print("  " + " ".join(f"{v:9.3e}" for v in s[i:i + 5]))
print(f"sigma_1 / sigma_{s.size} = {s[0] / s[-1]:.2f}")

print(f"\northonormality: W {res.left_orthonormality:.1e}, Theta {res.right_orthonormality:.1e}")
expected = table2_expected(res.q, res.d, int(np.sum(res.cg_iterations)))
for key, val in expected.items():
    print(f"{key:>11}: {res.counters[key]:6d} (expected {val})")
