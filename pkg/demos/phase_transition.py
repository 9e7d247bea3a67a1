"""
From which side does the phase settle?
======================================

For a single lambda the phase alpha(t) converges to a multiple of 2 pi.
For beta <= 2 it eventually stays above its limit; for beta > 2 it can
settle from below.  The classifier looks at the final stretch of each
path, so short runs show a finite-horizon residue at beta = 1 and 2.
"""

import numpy as np

from sinebeta.carousel import SolverConfig, classify_approach, simulate_single_path
from sinebeta.mcharness import JobSpec, run_job
from sinebeta.rng import RngStream

# one recorded path and its label
t, alpha = simulate_single_path(4.0, 4.0, stream=RngStream(0, 3), t_end=20.0)
print("final alpha / 2pi:", round(alpha[-1] / (2 * np.pi), 4), "->", classify_approach(alpha, SolverConfig()))

for beta in (1.0, 2.0, 4.0):
    s = run_job(JobSpec("phase-transition",
                        {"beta": beta, "lambda": 4.0, "dt_list": [2e-3], "tail_tol": 1e-6}, 2000, 1))
    below = s.extra["approach"]["0.002"]["below"]
    print(f"beta={beta:g}: below {below['fraction']:.4f} [{below['ci_low']:.4f}, {below['ci_high']:.4f}]")
