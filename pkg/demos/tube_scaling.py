"""Lp norms of one concentrated tube as its width shrinks.

A tube of width 1/mu in d dimensions, normalized to unit L2, has
|psi|_p ~ mu^((d-1)/2 - (d-1)/p).  The axial cross-section carries the same
norms on a (d-1)-dimensional grid, which keeps the fit cheap.

Run: python demos/tube_scaling.py
"""

import numpy as np

from citorus.estimate_harness import fit_slope
from citorus.mikado import axial_tube_section, build_profile, default_offset
from citorus.spectral_torus import lp_norm, make_grid

D = 4
MUS = (8, 16, 32)

if __name__ == "__main__":
    prof = build_profile(D)
    grid = make_grid(D - 1, 256)
    norms = {p: [] for p in (1.0, 2.0, np.inf)}
    for mu in MUS:
        psi = axial_tube_section(prof, mu, grid, default_offset(D)[1:])
        for p in norms:
            norms[p].append(lp_norm(psi, p))
        print(f"mu={mu:3d} " + " ".join(f"|psi|_{p:g}={norms[p][-1]:.4f}" for p in norms))
    for p, vals in norms.items():
        target = (D - 1) / 2 - (0 if p == np.inf else (D - 1) / p)
        print(f"p={p:g}: fitted slope {fit_slope(MUS, vals):+.3f}, expected {target:+.3f}")
