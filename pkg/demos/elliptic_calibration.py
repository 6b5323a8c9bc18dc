"""Calibrate the coarse elliptic model against the fine one.

The fine model plays the role of reality: its parameters are unknown, the
prior over them is lognormal, and the data misfit is the goal-oriented
error estimate itself. Sampling the resulting posterior concentrates the
fine parameters where the coarse model's QoI needs no correction, which is
the whole point: we tune the adequacy of the cheap model, not its fit to a
field observation.

This demo runs a short sampler (4 chains x 800) on a 25x25 mesh so it
finishes in seconds. The calibrate experiment in the CLI scales the same
code path to full chain lengths and writes every artifact to disk.
"""

import numpy as np

from goalcalib import (
    CalibrationProblem,
    EllipticModelPair,
    LognormalPrior,
    NoiseModel,
    QoIErrorEvaluator,
    build_mesh,
    run_chains,
)

pair = EllipticModelPair(build_mesh(25, 25))
prior = LognormalPrior(ln_mean=(-0.6535, 2.5475), ln_std=(0.1997, 0.5003))
problem = CalibrationProblem(prior, NoiseModel(sigma=0.01), QoIErrorEvaluator(pair))

summary, records = run_chains(problem, n_chains=4, max_samples=800, seed=3)

qoi_coarse = pair.qoi(pair.solve_coarse_forward())
np.set_printoptions(precision=4)
print(f"prior mean (kappa, alpha)     {prior.mean()}")
print(f"posterior mean                {summary.mean}")
print(f"posterior std                 {summary.std}")
print(f"pooled samples after burn-in  {summary.sample_count}")
print(f"acceptance rates              {np.array(summary.acceptance_rates)}")
print(f"QoI error at posterior mean   {summary.qoi_error_at_mean:+.5f}")
print(f"as a fraction of the QoI      {abs(summary.qoi_error_at_mean) / qoi_coarse:.2%}")
