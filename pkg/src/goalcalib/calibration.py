"""Random-walk Metropolis calibration of fine-model parameters.

The chain walks in log-parameter space, so proposals stay positive by
construction and the lognormal prior turns into a plain Gaussian on the walk
coordinates. Stored log-posterior values are densities of ln(theta); the
1/theta factors of the parameter-space prior cancel against the volume
element of the multiplicative proposal, which keeps the acceptance rule the
bare ratio with no extra correction term.

The likelihood scores a parameter vector by the model pair's estimated QoI
discrepancy: one linearized error solve per proposal in estimate mode, or a
full fine solve per proposal in exact mode. Solver failures reject the
proposal with a warning instead of aborting the chain.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .fem import NumericError, SolverError

# Everything the linear algebra and Newton layers raise on a bad proposal.
_MODEL_FAILURES = (NumericError, SolverError, np.linalg.LinAlgError)

__all__ = [
    "CalibrationError",
    "CalibrationProblem",
    "ChainRecord",
    "ChainState",
    "LognormalPrior",
    "NoiseModel",
    "PosteriorSummary",
    "QoIErrorEvaluator",
    "diagnostics",
    "log_likelihood",
    "log_prior",
    "mh_step",
    "run_chain",
    "run_chains",
]

_LOG_TWO_PI = math.log(2.0 * math.pi)


class CalibrationError(RuntimeError):
    """Raised when a calibration run cannot produce a valid summary."""


@dataclass(frozen=True)
class LognormalPrior:
    """Independent lognormal components: ln(theta_i) ~ N(ln_mean_i, ln_std_i^2)."""

    ln_mean: np.ndarray
    ln_std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ln_mean", np.atleast_1d(np.asarray(self.ln_mean, float)))
        object.__setattr__(self, "ln_std", np.atleast_1d(np.asarray(self.ln_std, float)))
        if self.ln_mean.shape != self.ln_std.shape or self.ln_mean.ndim != 1:
            raise ValueError(
                f"ln_mean {self.ln_mean.shape} and ln_std {self.ln_std.shape} must be "
                "matching vectors"
            )
        if not np.all(self.ln_std > 0.0):
            raise ValueError("ln_std entries must be positive")

    @property
    def dimension(self):
        return self.ln_mean.size

    def log_density(self, theta) -> float:
        """Normalized log-density in parameter space (includes 1/theta factors).

        Nonpositive or non-finite components return ``-inf`` rather than
        raising, so pathological proposals are rejected in normal flow.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dimension,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dimension},)")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0.0):
            return -np.inf
        x = np.log(theta)
        z = (x - self.ln_mean) / self.ln_std
        return float(
            -0.5 * (z @ z)
            - np.log(self.ln_std).sum()
            - 0.5 * self.dimension * _LOG_TWO_PI
            - x.sum()
        )

    def sample(self, rng, size=None):
        """Draw ``size`` vectors (or one, shape (m,)) from the prior."""
        shape = (self.dimension,) if size is None else (size, self.dimension)
        return np.exp(self.ln_mean + self.ln_std * rng.standard_normal(shape))

    def mean(self):
        return np.exp(self.ln_mean + 0.5 * self.ln_std**2)

    def std(self):
        return self.mean() * np.sqrt(np.expm1(self.ln_std**2))

    def central_interval(self, mass=0.99):
        """Componentwise central probability interval, as (lower, upper) arrays."""
        if not 0.0 < mass < 1.0:
            raise ValueError(f"interval mass must lie in (0, 1), got {mass}")
        z = stats.norm.ppf(0.5 + 0.5 * mass)
        return np.exp(self.ln_mean - z * self.ln_std), np.exp(self.ln_mean + z * self.ln_std)


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian density for the total QoI discrepancy."""

    sigma: float = 0.01

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def cost(self, qoi_error) -> float:
        return float(qoi_error) ** 2 / (2.0 * self.sigma**2)

    def log_likelihood(self, qoi_error) -> float:
        return -self.cost(qoi_error) - math.log(self.sigma) - 0.5 * _LOG_TWO_PI


def log_prior(theta, prior: LognormalPrior) -> float:
    return prior.log_density(theta)


class QoIErrorEvaluator:
    """Callable theta -> signed QoI discrepancy estimate for a model pair.

    ``source`` is either a model pair or a zero-argument picklable factory
    returning one; factories let process pools build a private pair per
    worker (pairs share internal buffers and are not thread-safe). Estimate
    mode costs one linearized error solve per call; exact mode solves the
    fine model and differences the QoI against the cached coarse value.
    """

    def __init__(self, source, exact: bool = False):
        self.source = source
        self.exact = bool(exact)
        self._pair = source if not callable(source) else None
        self._coarse_qoi = None

    def _resolve(self):
        if self._pair is None:
            self._pair = self.source()
        return self._pair

    def __call__(self, theta) -> float:
        pair = self._resolve()
        theta = np.asarray(theta, dtype=float)
        if not self.exact:
            return float(pair.qoi_error_estimate(theta))
        if self._coarse_qoi is None:
            self._coarse_qoi = float(pair.qoi(pair.solve_coarse_forward()))
        return float(pair.qoi(pair.solve_fine_forward(theta))) - self._coarse_qoi

    def __getstate__(self):
        if callable(self.source):
            # Each process rebuilds its own pair from the factory.
            return {"source": self.source, "exact": self.exact}
        return self.__dict__

    def __setstate__(self, state):
        self.__dict__ = {"_pair": None, "_coarse_qoi": None, **state}


@dataclass(frozen=True)
class CalibrationProblem:
    """Prior, noise model, and QoI-error evaluator bundled for the sampler."""

    prior: LognormalPrior
    noise: NoiseModel
    evaluator: object

    def log_likelihood(self, theta) -> float:
        return self.noise.log_likelihood(self.evaluator(np.asarray(theta, float)))

    def log_posterior(self, theta):
        """Walk-space log-target plus the (qoi_error, cost) pair behind it.

        Returns ``(-inf, nan, nan)`` for out-of-support parameters and for
        proposals whose model evaluation fails.
        """
        theta = np.asarray(theta, dtype=float)
        lp = self.prior.log_density(theta)
        if not np.isfinite(lp):
            return -np.inf, np.nan, np.nan
        try:
            qoi_error = float(self.evaluator(theta))
        except _MODEL_FAILURES as exc:
            warnings.warn(
                f"model evaluation failed at theta={theta}: {exc}; proposal rejected",
                RuntimeWarning,
                stacklevel=2,
            )
            return -np.inf, np.nan, np.nan
        target = lp + float(np.log(theta).sum()) + self.noise.log_likelihood(qoi_error)
        return target, qoi_error, self.noise.cost(qoi_error)


def log_likelihood(theta, problem: CalibrationProblem) -> float:
    return problem.log_likelihood(theta)


@dataclass
class ChainState:
    """Live Metropolis state: current point and its cached evaluations."""

    theta: np.ndarray
    log_posterior: float
    qoi_error: float
    cost: float
    n_proposals: int = 0
    n_accepted: int = 0


def mh_step(state: ChainState, proposal_scale, rng, problem: CalibrationProblem) -> ChainState:
    """One random-walk proposal in ln(theta); returns the next state.

    ``proposal_scale`` is the per-component standard deviation of the log
    step (scalar or vector). Zero scale proposes the current point, which is
    always accepted.
    """
    step = np.asarray(proposal_scale, float) * rng.standard_normal(state.theta.size)
    proposal = state.theta * np.exp(step)
    log_post, qoi_error, cost = problem.log_posterior(proposal)
    if np.log(rng.random()) < log_post - state.log_posterior:
        return ChainState(
            proposal, log_post, qoi_error, cost, state.n_proposals + 1, state.n_accepted + 1
        )
    return ChainState(
        state.theta,
        state.log_posterior,
        state.qoi_error,
        state.cost,
        state.n_proposals + 1,
        state.n_accepted,
    )


@dataclass
class ChainRecord:
    """Per-proposal chain history (current state repeated on rejection)."""

    thetas: np.ndarray
    qoi_errors: np.ndarray
    costs: np.ndarray
    accepted: np.ndarray
    final_scale: np.ndarray
    adapt_until: int

    @property
    def n_proposals(self):
        return self.accepted.size

    @property
    def n_accepted(self):
        return int(self.accepted.sum())

    @property
    def acceptance_rate(self):
        return self.n_accepted / max(self.n_proposals, 1)

    @property
    def post_adaptation_rate(self):
        """Acceptance rate over the proposals after the adaptation window."""
        tail = self.accepted[self.adapt_until :]
        return float(tail.sum() / tail.size) if tail.size else self.acceptance_rate

    def accepted_samples(self, burn_in_fraction=0.0):
        """Accepted parameter vectors, discarding the leading fraction."""
        if not 0.0 <= burn_in_fraction < 1.0:
            raise ValueError(f"burn_in_fraction must lie in [0, 1), got {burn_in_fraction}")
        samples = self.thetas[self.accepted]
        return samples[int(samples.shape[0] * burn_in_fraction) :]

    def rows(self):
        """Dump rows: (sample_index, theta..., cost, qoi_error, accepted_count)."""
        running = np.cumsum(self.accepted)
        for i in range(self.n_proposals):
            yield (i + 1, *self.thetas[i], self.costs[i], self.qoi_errors[i], int(running[i]))


def diagnostics(record: ChainRecord):
    """Series behind the usual chain plots, as arrays.

    ``accepted_cost`` and ``accepted_qoi_error`` are indexed by accepted
    sample; ``running_acceptance`` is indexed by proposal and ends at the
    chain's overall acceptance rate.
    """
    mask = record.accepted
    running = np.cumsum(mask) / np.arange(1, mask.size + 1)
    return {
        "accepted_cost": record.costs[mask],
        "accepted_qoi_error": record.qoi_errors[mask],
        "running_acceptance": running,
    }


def _initial_state(problem, rng, initial_theta, max_tries=50) -> ChainState:
    for attempt in range(max_tries):
        theta = (
            np.asarray(initial_theta, dtype=float)
            if initial_theta is not None and attempt == 0
            else problem.prior.sample(rng)
        )
        log_post, qoi_error, cost = problem.log_posterior(theta)
        if np.isfinite(log_post):
            return ChainState(theta, log_post, qoi_error, cost)
    raise CalibrationError(
        f"no finite starting point found in {max_tries} prior draws; "
        "the model rejects the whole prior support"
    )


def run_chain(
    problem: CalibrationProblem,
    n_proposals: int,
    seed,
    proposal_scale=0.5,
    adapt_until=None,
    adapt_block=50,
    acceptance_band=(0.2, 0.4),
    initial_theta=None,
) -> ChainRecord:
    """Drive one chain for ``n_proposals`` steps and record every proposal.

    The log-step scale starts at ``proposal_scale`` times the prior ln-std
    and adapts in blocks of ``adapt_block`` proposals toward the acceptance
    band while the proposal index is below ``adapt_until`` (default: half
    the run); afterwards it is frozen so the recorded tail is a fixed
    Metropolis kernel.
    """
    rng = np.random.default_rng(seed)
    prior = problem.prior
    state = _initial_state(problem, rng, initial_theta)
    if adapt_until is None:
        adapt_until = n_proposals // 2
    scale = float(proposal_scale) * prior.ln_std.copy()

    thetas = np.empty((n_proposals, prior.dimension))
    qoi_errors = np.empty(n_proposals)
    costs = np.empty(n_proposals)
    accepted = np.zeros(n_proposals, dtype=bool)
    block_accepted = 0
    for i in range(n_proposals):
        previous = state.n_accepted
        state = mh_step(state, scale, rng, problem)
        accepted[i] = state.n_accepted > previous
        block_accepted += accepted[i]
        thetas[i] = state.theta
        qoi_errors[i] = state.qoi_error
        costs[i] = state.cost
        if i < adapt_until and (i + 1) % adapt_block == 0:
            rate = block_accepted / adapt_block
            if rate < acceptance_band[0]:
                scale *= 0.8
            elif rate > acceptance_band[1]:
                scale *= 1.25
            block_accepted = 0
    return ChainRecord(thetas, qoi_errors, costs, accepted, scale, int(adapt_until))


def _chain_job(args):
    problem, n_proposals, seed, proposal_scale, adapt_until, adapt_block = args
    return run_chain(
        problem,
        n_proposals,
        seed,
        proposal_scale=proposal_scale,
        adapt_until=adapt_until,
        adapt_block=adapt_block,
    )


@dataclass
class PosteriorSummary:
    """Pooled posterior moments plus per-chain bookkeeping."""

    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    acceptance_rates: list
    accepted_counts: list
    qoi_error_at_mean: float
    cost_at_mean: float
    low_acceptance_chains: list = field(default_factory=list)
    burn_in_fraction: float = 0.5
    seed: int = None

    def as_dict(self):
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "sample_count": int(self.sample_count),
            "acceptance_rates": [float(v) for v in self.acceptance_rates],
            "accepted_counts": [int(v) for v in self.accepted_counts],
            "qoi_error_at_mean": float(self.qoi_error_at_mean),
            "cost_at_mean": float(self.cost_at_mean),
            "low_acceptance_chains": list(self.low_acceptance_chains),
            "burn_in_fraction": float(self.burn_in_fraction),
            "seed": self.seed,
        }


def run_chains(
    problem: CalibrationProblem,
    n_chains=4,
    max_samples=5000,
    burn_in_fraction=0.5,
    seed=0,
    proposal_scale=0.5,
    adapt_block=50,
    workers=None,
) -> tuple:
    """Run independent chains, pool post-burn-in accepted samples, summarize.

    ``max_samples`` counts proposals per chain; the burn-in discard applies
    to each chain's accepted samples. Results are deterministic in ``seed``
    and independent of ``workers`` (each chain owns a spawned RNG stream).
    Chains with post-adaptation acceptance below 1% are flagged in the
    summary rather than failing the run.

    Returns ``(PosteriorSummary, [ChainRecord, ...])``.
    """
    if n_chains < 1:
        raise ValueError(f"n_chains must be at least 1, got {n_chains}")
    if not 0.0 <= burn_in_fraction < 1.0:
        raise ValueError(f"burn_in_fraction must lie in [0, 1), got {burn_in_fraction}")
    seeds = np.random.SeedSequence(seed).spawn(n_chains)
    adapt_until = int(max_samples * burn_in_fraction)
    jobs = [
        (problem, max_samples, s, proposal_scale, adapt_until, adapt_block) for s in seeds
    ]
    if workers is not None and workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_chains)) as pool:
            records = list(pool.map(_chain_job, jobs))
    else:
        records = [_chain_job(job) for job in jobs]

    pooled = [r.accepted_samples(burn_in_fraction) for r in records]
    pooled = [block for block in pooled if block.shape[0]]
    if not pooled:
        raise CalibrationError("no accepted samples survived burn-in")
    samples = np.vstack(pooled)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros_like(mean)

    try:
        qoi_error_at_mean = float(problem.evaluator(mean))
        cost_at_mean = problem.noise.cost(qoi_error_at_mean)
    except _MODEL_FAILURES as exc:
        warnings.warn(f"evaluation at the posterior mean failed: {exc}", RuntimeWarning)
        qoi_error_at_mean = cost_at_mean = float("nan")

    summary = PosteriorSummary(
        mean=mean,
        std=std,
        sample_count=samples.shape[0],
        acceptance_rates=[r.acceptance_rate for r in records],
        accepted_counts=[r.n_accepted for r in records],
        qoi_error_at_mean=qoi_error_at_mean,
        cost_at_mean=cost_at_mean,
        low_acceptance_chains=[
            i for i, r in enumerate(records) if r.post_adaptation_rate < 0.01
        ],
        burn_in_fraction=burn_in_fraction,
        seed=seed,
    )
    return summary, records
