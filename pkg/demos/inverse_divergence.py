"""The symmetric trace-free right inverse of the divergence on a random field.

Run: python demos/inverse_divergence.py
"""

import numpy as np

from citorus.inverse_divergence import inverse_div
from citorus.spectral_torus import divergence_values, lp_norm, make_grid, random_field, vector_field

if __name__ == "__main__":
    grid = make_grid(3, 32)
    f = random_field(grid, 1, 4, np.random.default_rng(0))
    R = inverse_div(f)
    div = divergence_values(R.values, 2, grid)
    scale = np.abs(f.values).max()
    print(f"|div R - f|_inf / |f|_inf = {np.abs(div - f.values).max() / scale:.2e}")
    print(f"|tr R|_inf               = {np.abs(R.trace()).max():.2e}")
    # one derivative of smoothing: doubling the frequency halves the norm ratio
    x = grid.coordinate(0)
    for k in (2, 4, 8):
        g = np.zeros((3,) + grid.shape)
        g[1] = np.sin(2 * np.pi * k * x)
        v = vector_field(grid, g)
        print(f"k={k}: |R f|_2 / |f|_2 = {lp_norm(inverse_div(v), 2) / lp_norm(v, 2):.4f}")
