"""Strong-convergence measurement between the mass-eps system and its limit.

``run_convergence`` estimates E sup_t max_i |x^eps_i - x_i|^2 by synchronous
coupling for a descending grid of eps values, ``fit_rate`` fits the log-log
slope, and ``constant_reduction_check`` cross-validates the limit stepper
against an independently coded overdamped Euler scheme in the constant
friction case (where both corrections vanish identically and the two must
agree to the last bit).

Replica fan-out is chunked with a fixed chunk size; chunks may run on a
thread pool, and results are assembled in replica order, so reports are
byte-reproducible for a given seed at any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .driver import NoiseDriver
from .dynamics import (
    BLOWUP_CAP,
    DEFAULT_KAPPA,
    ProbeConfig,
    SCHEME_EXPLICIT,
    SCHEME_EXPONENTIAL,
    _ratio_int,
    _run_coupled_batch,
    _state_array,
    run_limit_path,
    validate_assumptions,
)
from .errors import (
    DegenerateFit,
    InsufficientReplicas,
    ValidationError,
)
from .models import ModelSpec, SystemModel

REPLICA_CHUNK = 16


@dataclass(frozen=True)
class DeltaRule:
    """Fast-step rule: explicit (delta = eps/kappa) or exponential (fixed delta)."""

    scheme: str = SCHEME_EXPLICIT
    kappa: float = DEFAULT_KAPPA
    delta: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in (SCHEME_EXPLICIT, SCHEME_EXPONENTIAL):
            raise ValidationError(f"unknown delta_rule scheme {self.scheme!r}")
        if self.scheme == SCHEME_EXPLICIT and self.kappa <= 0.0:
            raise ValidationError("kappa must be positive")
        if self.scheme == SCHEME_EXPONENTIAL and (
            self.delta is None or self.delta <= 0.0
        ):
            raise ValidationError("exponential delta_rule needs a positive delta")

    def resolve(self, eps: float, Delta: float) -> float:
        """Fast step for this eps, snapped so that Delta is an exact multiple."""
        raw = eps / self.kappa if self.scheme == SCHEME_EXPLICIT else self.delta
        m = _ratio_int(Delta, raw, f"Delta/delta at eps={eps}")
        return Delta / m


@dataclass
class ConvergenceReport:
    """Per-eps strong-error estimates plus the fitted log-log rate."""

    model_spec: Optional[ModelSpec]
    epsilons: list
    errors: list
    stderrs: list
    replicas: int
    n_particles: int
    ratios: list = field(default_factory=list)   # errors / sqrt(eps)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r2: Optional[float] = None


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def _check_epsilons(eps_list):
    eps = [float(e) for e in eps_list]
    if not eps or any(e <= 0.0 for e in eps):
        raise ValidationError("epsilon values must be positive")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValidationError("epsilon_list must be strictly decreasing")
    return eps


def run_convergence(
    model: SystemModel,
    eps_list,
    T: float,
    n_particles: int,
    replicas: int,
    seed: int,
    delta_rule: DeltaRule,
    Delta: float,
    x0=0.0,
    v0=0.0,
    threads: int = 1,
    kappa: Optional[float] = None,
    cap: float = BLOWUP_CAP,
    validate: bool = True,
    probe: Optional[ProbeConfig] = None,
) -> ConvergenceReport:
    """Estimate the coupled strong error over a descending eps grid.

    Replica r of every eps value reuses stream key r, so the per-eps
    estimates are positively correlated and their comparison across eps has
    reduced variance.
    """
    eps_values = _check_epsilons(eps_list)
    if replicas < 2:
        raise InsufficientReplicas("need at least 2 replicas")
    if validate:
        validate_assumptions(model, probe if probe is not None else ProbeConfig())
    kappa_eff = delta_rule.kappa if kappa is None else kappa

    chunks = [
        list(range(s, min(s + REPLICA_CHUNK, replicas)))
        for s in range(0, replicas, REPLICA_CHUNK)
    ]

    errors, stderrs, ratios = [], [], []
    for eps in eps_values:
        delta = delta_rule.resolve(eps, Delta)
        sup = np.empty(replicas)

        def one_chunk(ids, _eps=eps, _delta=delta):
            vals, _ = _run_coupled_batch(
                model, _eps, T, _delta, Delta, n_particles, ids, seed,
                x0, v0, delta_rule.scheme, kappa_eff, cap,
            )
            return ids, vals

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for ids, vals in pool.map(one_chunk, chunks):
                    sup[ids[0]:ids[-1] + 1] = vals
        else:
            for ids in chunks:
                got_ids, vals = one_chunk(ids)
                sup[got_ids[0]:got_ids[-1] + 1] = vals

        err = float(np.mean(sup))
        se = float(np.std(sup, ddof=1) / np.sqrt(replicas))
        errors.append(err)
        stderrs.append(se)
        ratios.append(err / np.sqrt(eps))

    return ConvergenceReport(
        model_spec=model.spec,
        epsilons=eps_values,
        errors=errors,
        stderrs=stderrs,
        replicas=replicas,
        n_particles=n_particles,
        ratios=ratios,
    )


def fit_rate(report: ConvergenceReport) -> RateFit:
    """Ordinary least squares of log error against log eps.

    The slope is the empirical rate exponent of the squared sup error;
    exp(intercept) estimates the rate constant.
    """
    eps = np.asarray(report.epsilons, dtype=float)
    err = np.asarray(report.errors, dtype=float)
    if len(np.unique(eps)) < 3:
        raise DegenerateFit("need at least 3 distinct epsilon values")
    if np.any(err <= 0.0):
        raise DegenerateFit("all error estimates must be positive to fit a rate")
    x = np.log(eps)
    y = np.log(err)
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - ybar) ** 2))
    r2 = 1.0 if ss_tot == 0.0 and ss_res == 0.0 else 1.0 - ss_res / max(ss_tot, 1e-300)
    fit = RateFit(slope=slope, intercept=intercept, r2=r2)
    report.slope, report.intercept, report.r2 = fit.slope, fit.intercept, fit.r2
    return fit


def _naive_overdamped_path(
    model: SystemModel,
    T: float,
    Delta: float,
    n_particles: int,
    replica_id: int,
    seed: int,
    x0,
) -> np.ndarray:
    """Plain overdamped Euler path for a constant-coefficient model.

    Written against the raw coefficients on purpose: no correction-drift
    machinery, the friction/force/noise are read off the model once per step
    and applied as x += ginv F Delta + ginv sigma dW.
    """
    n_coarse = _ratio_int(T, Delta, "T/Delta")
    d, k = model.dim, model.noise_dim
    drv = NoiseDriver(seed, Delta, 1)
    dws = drv.fast_increments(replica_id, n_particles, k, n_coarse)
    X = _state_array(x0, n_particles, d, "x0")[None]
    out = np.empty((n_coarse + 1, n_particles, d))
    out[0] = X[0]
    for j in range(n_coarse):
        g = model.friction_field(X, X)
        ginv = np.linalg.inv(g)
        F = model.force_field(X, X)
        sig = model.noise_field(X, X)
        ginv_f = np.einsum("bnij,bnj->bni", ginv, F)
        ginv_sigma = np.einsum("bnij,bnjk->bnik", ginv, sig)
        X = X + ginv_f * Delta + np.einsum("bnik,bnk->bni", ginv_sigma, dws[j][None])
        out[j + 1] = X[0]
    return out


def constant_reduction_check(
    model: SystemModel,
    eps_smallest: float,
    T: float,
    seed: int,
    Delta: float = 0.01,
    n_particles: int = 1,
    x0=0.0,
) -> float:
    """Max gap between the limit stepper and a naive overdamped Euler path.

    Only meaningful for constant-friction models, where both correction
    drifts are exactly zero and the two integrations must coincide exactly
    on the same driver.  ``eps_smallest`` is carried along for reporting
    symmetry with the coupled experiments; the comparison itself is eps-free.
    """
    d = model.dim
    states = np.array([[0.0], [1.3], [-0.7], [0.0]]) * np.ones((1, d))
    clouds = np.stack([
        np.stack([states[0], states[0] + 0.5]),
        np.stack([states[0], states[0] + 0.5]),
        np.stack([states[0], states[0] + 0.5]),
        np.stack([states[0] - 1.0, states[0] + 2.0]),
    ])
    fr = model.friction_field(states[:, None, :], clouds)
    if not all(np.array_equal(fr[0], fr[i]) for i in (1, 2, 3)):
        raise ValidationError("reduction check requires a constant-friction model")
    if eps_smallest <= 0.0:
        raise ValidationError("eps_smallest must be positive")
    limit = run_limit_path(model, T, Delta, n_particles, 0, seed, x0)
    naive = _naive_overdamped_path(model, T, Delta, n_particles, 0, seed, x0)
    return float(np.max(np.abs(limit - naive)))


# --- report serialization -----------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _json_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_json_value(u) for u in v) + "]"
    if isinstance(v, dict):
        inner = ", ".join(
            f'"{key}": {_json_value(v[key])}' for key in sorted(v)
        )
        return "{" + inner + "}"
    if v is None:
        return "null"
    raise ValidationError(f"cannot serialize {type(v)!r}")


def report_to_json(report: ConvergenceReport) -> str:
    """Fixed-schema JSON document; floats at 17 significant digits."""
    spec = report.model_spec
    model_obj = {"family": spec.family, "params": dict(spec.params)} if spec else None
    fields = [
        ("model", model_obj),
        ("epsilons", list(report.epsilons)),
        ("errors", list(report.errors)),
        ("stderrs", list(report.stderrs)),
        ("slope", report.slope),
        ("intercept", report.intercept),
        ("r2", report.r2),
        ("ratios", list(report.ratios)),
    ]
    body = ",\n".join(f'  "{name}": {_json_value(value)}' for name, value in fields)
    return "{\n" + body + "\n}\n"


def report_to_csv(report: ConvergenceReport) -> str:
    """Companion table: epsilon,error,stderr,ratio_sqrt."""
    lines = ["epsilon,error,stderr,ratio_sqrt"]
    for eps, err, se, ratio in zip(
        report.epsilons, report.errors, report.stderrs, report.ratios
    ):
        lines.append(f"{_fmt(eps)},{_fmt(err)},{_fmt(se)},{_fmt(ratio)}")
    return "\n".join(lines) + "\n"
