"""
Three routes to the same counting function
==========================================

N(lambda) for the Sine_beta process, from large random matrices, from
the stochastic sine equation and from the Brownian carousel.  The three
samples use different seeds, so they are independent.
"""

import math

from sinebeta.mcharness import JobSpec, run_job
from sinebeta.pointstats import ks_two_sample

beta, paths = 2.0, 1500
lams = [math.pi, 2 * math.pi]
key = f"N({2 * math.pi:.17g})"

bulk = run_job(JobSpec("bulk-counts", {"n": 2000, "beta": beta, "lambdas": lams}, paths, 1))
sse = run_job(JobSpec("sine-counts", {"beta": beta, "lambdas": lams}, paths, 2))
car = run_job(JobSpec("carousel-counts", {"beta": beta, "lambdas": lams}, paths, 3))

for name, s in (("matrices", bulk), ("sine equation", sse), ("carousel", car)):
    c = s.cell(key)
    print(f"{name:14s} E N(2pi) = {c.mean:.3f} +- {c.stderr:.3f}   histogram {c.histogram}")

# the expected count is lambda / 2 pi, so all three should sit near 1
print("KS matrices vs sine equation:", round(ks_two_sample(bulk.samples(key), sse.samples(key)).ks_stat, 4))
print("KS carousel vs sine equation:", round(ks_two_sample(car.samples(key), sse.samples(key)).ks_stat, 4))
