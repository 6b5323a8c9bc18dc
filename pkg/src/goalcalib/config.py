"""Run configuration: a small YAML tree validated into a RunConfig.

One file describes one experiment setup: which application (elliptic or
tumor), the mesh, the model parameter blocks, the estimator flavor, and the
MCMC controls. Unset keys fall back to the canonical defaults of each
application, so a minimal elliptic config is just ``application: elliptic``.
Validation errors always name the offending key.
"""

import math
from dataclasses import dataclass, field

import yaml

APPLICATIONS = ("elliptic", "tumor")
ESTIMATORS = ("first-order", "second-order", "exact-fine-oracle")

_TUMOR_THETA_BAR = (0.5, 0.1, 0.01, 1.0)

DEFAULTS = {
    "elliptic": {
        "mesh": {"nx": 50, "ny": 50},
        "coarse": {"kappa0": 0.25},
        "fine": {"kappa": 0.25, "alpha": 10.0},
        "prior": {
            "ln_mean": [-0.6535, 2.5475],
            "ln_std": [0.1997, 0.5003],
        },
    },
    "tumor": {
        "mesh": {"nx": 50, "ny": 50},
        "coarse": {"lambda_p0": 0.2, "lambda_d0": 0.1, "D": 0.05},
        "fine": {"lambda_p": 0.5, "lambda_d": 0.1, "epsilon": 0.01, "C": 1.0},
        "prior": {
            "ln_mean": [math.log(v) + 0.16 for v in _TUMOR_THETA_BAR],
            "ln_std": [0.4, 0.4, 0.4, 0.4],
        },
    },
}


class ConfigError(ValueError):
    """Configuration problem; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment setup, application defaults already applied."""

    application: str
    mesh: tuple
    coarse: dict
    fine: dict
    prior_ln_mean: tuple
    prior_ln_std: tuple
    sigma: float = 0.01
    estimator: str = "first-order"
    time: dict = None
    chains: int = 4
    max_samples: int = 5000
    burn_in: float = 0.5
    seed: int = 0
    proposal_scale: float = 0.5
    order_levels: tuple = (1.0, 0.5, 0.25, 0.125)
    output: str = None

    def as_dict(self):
        data = {
            "application": self.application,
            "mesh": {"nx": self.mesh[0], "ny": self.mesh[1]},
            "coarse": dict(self.coarse),
            "fine": dict(self.fine),
            "prior": {
                "ln_mean": list(self.prior_ln_mean),
                "ln_std": list(self.prior_ln_std),
            },
            "noise": {"sigma": self.sigma},
            "estimator": self.estimator,
            "mcmc": {
                "chains": self.chains,
                "max_samples": self.max_samples,
                "burn_in": self.burn_in,
                "seed": self.seed,
                "proposal_scale": self.proposal_scale,
            },
            "order_study": {"levels": list(self.order_levels)},
            "output": self.output,
        }
        if self.application == "tumor":
            data["time"] = dict(self.time)
        return data


def _require_mapping(value, key):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return value


def _number(block, key, default, *, kind=float, minimum=None, maximum=None,
            inclusive=True):
    value = block.get(key.split(".")[-1], default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(key, f"expected an integer, got {value!r}")
    value = kind(value)
    if minimum is not None and (value < minimum or (not inclusive and value == minimum)):
        raise ConfigError(key, f"must be {'>=' if inclusive else '>'} {minimum}, got {value}")
    if maximum is not None and value >= maximum:
        raise ConfigError(key, f"must be < {maximum}, got {value}")
    return value


def _reject_unknown(block, allowed, prefix):
    for name in block:
        if name not in allowed:
            raise ConfigError(f"{prefix}{name}", "unknown key")


def load_config(source) -> RunConfig:
    """Parse and validate a YAML config file path or an already-loaded dict."""
    if isinstance(source, dict):
        raw = dict(source)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a key-value mapping")

    _reject_unknown(
        raw,
        {"application", "mesh", "time", "coarse", "fine", "prior", "noise",
         "estimator", "mcmc", "order_study", "output"},
        "",
    )

    application = raw.get("application")
    if application not in APPLICATIONS:
        raise ConfigError(
            "application", f"expected one of {APPLICATIONS}, got {application!r}"
        )
    defaults = DEFAULTS[application]

    mesh_block = _require_mapping(raw.get("mesh"), "mesh")
    _reject_unknown(mesh_block, {"nx", "ny"}, "mesh.")
    nx = _number({**defaults["mesh"], **mesh_block}, "mesh.nx", None, kind=int, minimum=2)
    ny = _number({**defaults["mesh"], **mesh_block}, "mesh.ny", None, kind=int, minimum=2)

    time_block = None
    if application == "tumor":
        time_block = _require_mapping(raw.get("time"), "time")
        _reject_unknown(time_block, {"dt", "t_final"}, "time.")
        if "dt" not in time_block:
            raise ConfigError("time.dt", "required for the tumor application")
        dt = _number(time_block, "time.dt", None, minimum=0.0, inclusive=False)
        t_final = _number(time_block, "time.t_final", 1.0, minimum=0.0, inclusive=False)
        time_block = {"dt": dt, "t_final": t_final}
    elif raw.get("time") is not None:
        raise ConfigError("time", "only the tumor application takes a time block")

    coarse = dict(defaults["coarse"])
    coarse_block = _require_mapping(raw.get("coarse"), "coarse")
    _reject_unknown(coarse_block, set(coarse), "coarse.")
    for name in coarse:
        coarse[name] = _number(
            {**coarse, **coarse_block}, f"coarse.{name}", None,
            minimum=0.0, inclusive=False,
        )

    fine = dict(defaults["fine"])
    fine_block = _require_mapping(raw.get("fine"), "fine")
    _reject_unknown(fine_block, set(fine), "fine.")
    for name in fine:
        lower_open = not (application == "elliptic" and name == "alpha")
        fine[name] = _number(
            {**fine, **fine_block}, f"fine.{name}", None,
            minimum=0.0, inclusive=not lower_open,
        )

    prior_block = _require_mapping(raw.get("prior"), "prior")
    _reject_unknown(prior_block, {"ln_mean", "ln_std"}, "prior.")
    dimension = len(defaults["prior"]["ln_mean"])
    prior = {}
    for name in ("ln_mean", "ln_std"):
        values = prior_block.get(name, defaults["prior"][name])
        if not isinstance(values, (list, tuple)) or len(values) != dimension:
            raise ConfigError(
                f"prior.{name}", f"expected {dimension} numbers for {application}"
            )
        try:
            prior[name] = tuple(float(v) for v in values)
        except (TypeError, ValueError):
            raise ConfigError(f"prior.{name}", f"expected numbers, got {values!r}")
    if any(v <= 0.0 for v in prior["ln_std"]):
        raise ConfigError("prior.ln_std", "entries must be positive")

    noise_block = _require_mapping(raw.get("noise"), "noise")
    _reject_unknown(noise_block, {"sigma"}, "noise.")
    sigma = _number(noise_block, "noise.sigma", 0.01, minimum=0.0, inclusive=False)

    estimator = raw.get("estimator", "first-order")
    if estimator not in ESTIMATORS:
        raise ConfigError("estimator", f"expected one of {ESTIMATORS}, got {estimator!r}")

    mcmc = _require_mapping(raw.get("mcmc"), "mcmc")
    _reject_unknown(
        mcmc, {"chains", "max_samples", "burn_in", "seed", "proposal_scale"}, "mcmc."
    )
    chains = _number(mcmc, "mcmc.chains", 4, kind=int, minimum=1)
    max_samples = _number(mcmc, "mcmc.max_samples", 5000, kind=int, minimum=1)
    burn_in = _number(mcmc, "burn_in", 0.5, minimum=0.0, maximum=1.0)
    seed = _number(mcmc, "mcmc.seed", 0, kind=int, minimum=0)
    proposal_scale = _number(mcmc, "mcmc.proposal_scale", 0.5, minimum=0.0, inclusive=False)

    study_block = _require_mapping(raw.get("order_study"), "order_study")
    _reject_unknown(study_block, {"levels"}, "order_study.")
    levels = study_block.get("levels", [1.0, 0.5, 0.25, 0.125])
    if not isinstance(levels, (list, tuple)) or not levels:
        raise ConfigError("order_study.levels", "expected a non-empty list of numbers")
    try:
        levels = tuple(float(v) for v in levels)
    except (TypeError, ValueError):
        raise ConfigError("order_study.levels", f"expected numbers, got {levels!r}")
    if any(not 0.0 < v <= 1.0 for v in levels):
        raise ConfigError("order_study.levels", "levels must lie in (0, 1]")

    output = raw.get("output", f"runs/{application}")
    if not isinstance(output, str) or not output:
        raise ConfigError("output", f"expected a directory path, got {output!r}")

    return RunConfig(
        application=application,
        mesh=(nx, ny),
        coarse=coarse,
        fine=fine,
        prior_ln_mean=prior["ln_mean"],
        prior_ln_std=prior["ln_std"],
        sigma=sigma,
        estimator=estimator,
        time=time_block,
        chains=chains,
        max_samples=max_samples,
        burn_in=burn_in,
        seed=seed,
        proposal_scale=proposal_scale,
        order_levels=levels,
        output=output,
    )
