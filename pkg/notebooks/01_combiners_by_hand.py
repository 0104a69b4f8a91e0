"""
Combining a forget and a retain gradient
========================================

Three ways to merge the two task gradients, on vectors small enough to check
by hand, then on many random pairs.
"""

import numpy as np

from retainsynth import CombinerConfig, ModuleGradients, Scope, combine, cosine, flatten

# one conflicting coordinate, one agreeing coordinate
g_r = ModuleGradients({"w": np.array([1.0, 1.0])})
g_f = ModuleGradients({"w": np.array([2.0, -3.0])})

for kind in ("naive", "pcgrad-global", "sago"):
    out = combine(kind, g_r, g_f, CombinerConfig())
    fin = flatten(out.g_final)
    print(f"{kind:14s} g_final={fin}  cos(g_final, g_r)={cosine(fin, flatten(g_r)):+.4f}")

# naive adds the conflict straight in: (3, -2) points partly against g_r.
# pcgrad removes the component of g_f along -g_r before adding.
# sago keeps g_f only where its sign agrees with g_r, and g_r elsewhere: (2, 1).

# module-wise projection treats each parameter block on its own
g_r = ModuleGradients({"a": np.array([1.0, 0.0]), "b": np.array([1.0])})
g_f = ModuleGradients({"a": np.array([-2.0, 0.0]), "b": np.array([1.0])})
for scope in Scope:
    out = combine("pcgrad-module" if scope is Scope.MODULE_WISE else "pcgrad-global", g_r, g_f, CombinerConfig())
    print(scope.value, flatten(out.g_final), "conflict fraction", out.conflict_fraction)

# averages over random Gaussian pairs: sago hugs g_r most closely
rng = np.random.default_rng(0)
cos = {k: [] for k in ("naive", "pcgrad-global", "sago")}
for _ in range(2000):
    r = ModuleGradients({"w": rng.normal(size=64)})
    f = ModuleGradients({"w": rng.normal(size=64)})
    for k in cos:
        cos[k].append(cosine(flatten(combine(k, r, f, CombinerConfig()).g_final), flatten(r)))
for k, v in cos.items():
    print(f"mean cos with g_r, {k:14s} {np.mean(v):.3f}")
