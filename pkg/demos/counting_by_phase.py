"""
Counting eigenvalues by winding
===============================

One tridiagonal beta-ensemble matrix, counted three ways: dense
eigenvalues, a Sturm sequence, and the winding of the lifted phase.
"""

import numpy as np

from sinebeta.ensemble import (EnsembleParams, conjugate, phase_count_below,
                               sample_ensemble, sturm_count_below,
                               wild_phase_forward)
from sinebeta.rng import RngStream

params = EnsembleParams(n=12, beta=2.0, seed=5)
matrix = sample_ensemble(params, RngStream(5, 0))
model = conjugate(matrix)
eig = np.linalg.eigvalsh(matrix.dense())
print("eigenvalues:", np.round(eig, 3))

# the last phase passes a multiple of 2 pi exactly at each eigenvalue
for Lam in np.linspace(eig[0] - 1, eig[-1] + 1, 9):
    phi = wild_phase_forward(model, Lam).phases[-1]
    print(f"Lambda={Lam:7.3f}  phi_n/2pi={phi / (2 * np.pi):7.3f}  "
          f"dense={np.count_nonzero(eig < Lam):2d}  "
          f"sturm={sturm_count_below(matrix, Lam):2d}  "
          f"phase={phase_count_below(model, Lam):2d}")
