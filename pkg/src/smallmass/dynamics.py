"""Time integration of the second-order system and of its overdamped limit.

The second-order (mass ``eps``) system is advanced on a fast grid, either by
explicit Euler-Maruyama (stable for ``delta <= eps / kappa``) or by an
exponential stepper that freezes the coefficients over the step and applies
the exact damping semigroup (no stiffness constraint).  The limit system is
advanced on a coarse grid whose Brownian increments are the window sums of
the fast ones, so both systems ride the same noise path and their difference
estimates the strong error directly.

Batched kernels carry state as (R, N, d) arrays: replica, particle,
component.  The empirical measure entering the friction is the ensemble of
the replica itself, frozen at the step start.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .driver import NoiseDriver
from .errors import (
    AssumptionViolated,
    GridMismatch,
    NumericalBlowup,
    StepTooLarge,
    ValidationError,
)
from .linalg import expm
from .measures import EmpiricalMeasure, wasserstein2_assignment
from .models import SystemModel, limit_drift_fields

DEFAULT_KAPPA = 20.0
BLOWUP_CAP = 1e8

SCHEME_EXPLICIT = "explicit"
SCHEME_EXPONENTIAL = "exponential"


# --- ensembles ---------------------------------------------------------------


def _state_array(value, n_particles: int, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n_particles, dim), float(arr))
    elif arr.shape == (dim,):
        arr = np.tile(arr, (n_particles, 1))
    if arr.shape != (n_particles, dim):
        raise ValidationError(f"{name} must broadcast to ({n_particles}, {dim})")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    return arr


@dataclass
class ParticleEnsembleFull:
    """State (x_i, v_i) of the second-order system at time t, mass eps."""

    t: float
    eps: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValidationError("eps must be positive")
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.x.shape != self.v.shape or self.x.ndim != 2:
            raise ValidationError("x and v must be matching (N, d) arrays")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise ValidationError("ensemble state must be finite")


@dataclass
class ParticleEnsembleLimit:
    """Positions x_i of the limit system at time t."""

    t: float
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ValidationError("x must be an (N, d) array")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("ensemble state must be finite")


def _guard(arr: np.ndarray, cap: float, what: str):
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if not np.isfinite(peak) or peak > cap:
        raise NumericalBlowup(f"{what} reached magnitude {peak:.3e} (cap {cap:.0e})")


# --- batched one-step kernels ------------------------------------------------


def _advance_full_em(model, X, V, delta, eps, dw):
    F = model.force_field(X, X)
    g = model.friction_field(X, X)
    sig = model.noise_field(X, X)
    X_new = X + V * delta
    V_new = (
        V
        + (F - np.einsum("bnij,bnj->bni", g, V)) * (delta / eps)
        + np.einsum("bnik,bnk->bni", sig, dw) / eps
    )
    return X_new, V_new


def _batch_expm(mats: np.ndarray) -> np.ndarray:
    d = mats.shape[-1]
    if d == 1:
        return np.exp(mats)
    flat = mats.reshape(-1, d, d)
    return np.stack([expm(m) for m in flat]).reshape(mats.shape)


def _advance_full_exponential(model, X, V, delta, eps, dw):
    F = model.force_field(X, X)
    g = model.friction_field(X, X)
    sig = model.noise_field(X, X)
    E = _batch_expm(-g * (delta / eps))
    E_half = _batch_expm(-g * (delta / (2.0 * eps)))
    ginv = np.linalg.inv(g)
    ident = np.broadcast_to(np.eye(g.shape[-1]), g.shape)
    drift_gain = np.einsum("bnij,bnjk->bnik", ginv, ident - E)
    V_new = (
        np.einsum("bnij,bnj->bni", E, V)
        + np.einsum("bnij,bnj->bni", drift_gain, F)
        + np.einsum("bnij,bnjk,bnk->bni", E_half, sig, dw) / eps
    )
    X_new = X + 0.5 * delta * (V + V_new)
    return X_new, V_new


def _advance_limit_em(model, X, Delta, dw):
    ginv_f, S, S_t, ginv_sigma = limit_drift_fields(model, X)
    drift = ginv_f + S + S_t
    return X + drift * Delta + np.einsum("bnik,bnk->bni", ginv_sigma, dw)


_FULL_SCHEMES = {
    SCHEME_EXPLICIT: _advance_full_em,
    SCHEME_EXPONENTIAL: _advance_full_exponential,
}


# --- public one-step operations ----------------------------------------------


def _check_increment(dw, n_particles, noise_dim) -> np.ndarray:
    dw = np.asarray(dw, dtype=float)
    if dw.shape != (n_particles, noise_dim):
        raise ValidationError(
            f"increment must have shape ({n_particles}, {noise_dim}), got {dw.shape}"
        )
    return dw


def step_full_em(
    ens: ParticleEnsembleFull,
    model: SystemModel,
    delta: float,
    dw,
    kappa: float = DEFAULT_KAPPA,
    cap: float = BLOWUP_CAP,
) -> ParticleEnsembleFull:
    """One explicit Euler-Maruyama step of the second-order system.

    Coefficients and the empirical measure are read from the step-start
    state.  Requires delta <= eps / kappa.
    """
    if delta > ens.eps / kappa * (1.0 + 1e-12):
        raise StepTooLarge(
            f"delta = {delta} exceeds eps/kappa = {ens.eps / kappa:.3e}"
        )
    dw = _check_increment(dw, ens.x.shape[0], model.noise_dim)
    X, V = _advance_full_em(model, ens.x[None], ens.v[None], delta, ens.eps, dw[None])
    _guard(V, cap, "velocity")
    _guard(X, cap, "position")
    return ParticleEnsembleFull(ens.t + delta, ens.eps, X[0], V[0])


def step_full_exponential(
    ens: ParticleEnsembleFull,
    model: SystemModel,
    delta: float,
    dw,
    cap: float = BLOWUP_CAP,
) -> ParticleEnsembleFull:
    """One exponential-integrator step: coefficients frozen over the step,
    exact damping semigroup, midpoint-kernel stochastic convolution, and a
    trapezoid position update.  No stiffness restriction on delta."""
    if delta < 0.0:
        raise ValidationError("delta must be nonnegative")
    dw = _check_increment(dw, ens.x.shape[0], model.noise_dim)
    if delta == 0.0:
        return ParticleEnsembleFull(ens.t, ens.eps, ens.x.copy(), ens.v.copy())
    X, V = _advance_full_exponential(
        model, ens.x[None], ens.v[None], delta, ens.eps, dw[None]
    )
    _guard(V, cap, "velocity")
    _guard(X, cap, "position")
    return ParticleEnsembleFull(ens.t + delta, ens.eps, X[0], V[0])


def step_limit_em(
    ens: ParticleEnsembleLimit,
    model: SystemModel,
    Delta: float,
    dw,
    cap: float = BLOWUP_CAP,
) -> ParticleEnsembleLimit:
    """One Euler-Maruyama step of the limit equation, with both correction
    drifts evaluated against the step-start ensemble."""
    if Delta <= 0.0:
        raise ValidationError("Delta must be positive")
    dw = _check_increment(dw, ens.x.shape[0], model.noise_dim)
    X = _advance_limit_em(model, ens.x[None], Delta, dw[None])
    _guard(X, cap, "position")
    return ParticleEnsembleLimit(ens.t + Delta, X[0])


# --- coupled simulation ------------------------------------------------------


@dataclass
class PathRecord:
    """Coupled trajectories sampled on the coarse grid."""

    times: np.ndarray
    x_full: np.ndarray   # (n_coarse + 1, N, d)
    v_full: np.ndarray
    x_limit: np.ndarray


@dataclass
class CoupledResult:
    sup_diff: float
    paths: Optional[PathRecord] = None


def _ratio_int(big: float, small: float, what: str) -> int:
    ratio = big / small
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, abs(m)):
        raise GridMismatch(f"{what} = {ratio} is not a positive integer")
    return m


def _run_coupled_batch(
    model: SystemModel,
    eps: float,
    T: float,
    delta: float,
    Delta: float,
    n_particles: int,
    replica_ids,
    seed: int,
    x0,
    v0,
    scheme: str = SCHEME_EXPLICIT,
    kappa: float = DEFAULT_KAPPA,
    cap: float = BLOWUP_CAP,
    record_paths: bool = False,
):
    """Synchronously coupled fast/coarse run over a batch of replicas.

    Returns (sup_diffs, paths) with sup_diffs of shape (len(replica_ids),);
    paths (first replica only) when requested.
    """
    if scheme not in _FULL_SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}")
    if scheme == SCHEME_EXPLICIT and delta > eps / kappa * (1.0 + 1e-12):
        raise StepTooLarge(
            f"delta = {delta} exceeds eps/kappa = {eps / kappa:.3e}"
        )
    m = _ratio_int(Delta, delta, "Delta/delta")
    n_coarse = _ratio_int(T, Delta, "T/Delta")
    advance = _FULL_SCHEMES[scheme]
    R = len(replica_ids)
    d, k = model.dim, model.noise_dim

    driver = NoiseDriver(seed, delta, m)
    fast = driver.fast_increments_batch(replica_ids, n_particles, k, n_coarse * m)
    coarse = driver.coarse_from_fast(fast)

    x_init = _state_array(x0, n_particles, d, "x0")
    v_init = _state_array(v0, n_particles, d, "v0")
    X = np.broadcast_to(x_init, (R, n_particles, d)).copy()
    V = np.broadcast_to(v_init, (R, n_particles, d)).copy()
    XL = X.copy()

    paths = None
    if record_paths:
        times = np.arange(n_coarse + 1) * Delta
        rec_xf = np.empty((n_coarse + 1, n_particles, d))
        rec_vf = np.empty_like(rec_xf)
        rec_xl = np.empty_like(rec_xf)
        rec_xf[0], rec_vf[0], rec_xl[0] = X[0], V[0], XL[0]

    sup = np.zeros(R)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_coarse):
            for s in range(m):
                X, V = advance(model, X, V, delta, eps, fast[:, j * m + s])
                _guard(V, cap, "velocity")
            _guard(X, cap, "position")
            XL = _advance_limit_em(model, XL, Delta, coarse[:, j])
            _guard(XL, cap, "limit position")
            diff = np.max(np.sum((X - XL) ** 2, axis=-1), axis=-1)
            np.maximum(sup, diff, out=sup)
            if record_paths:
                rec_xf[j + 1], rec_vf[j + 1], rec_xl[j + 1] = X[0], V[0], XL[0]

    if record_paths:
        paths = PathRecord(times, rec_xf, rec_vf, rec_xl)
    return sup, paths


def simulate_coupled(
    model: SystemModel,
    eps: float,
    T: float,
    delta: float,
    Delta: float,
    n_particles: int,
    replica_id: int,
    seed: int,
    x0=0.0,
    v0=0.0,
    scheme: str = SCHEME_EXPLICIT,
    kappa: float = DEFAULT_KAPPA,
    cap: float = BLOWUP_CAP,
    record_paths: bool = False,
) -> CoupledResult:
    """Run one synchronously coupled replica of the two systems.

    The second-order system advances on the fast grid, the limit system on
    the coarse grid driven by the window sums of the same increments; returns
    the sup over coarse grid points of the worst-particle squared distance.
    """
    sup, paths = _run_coupled_batch(
        model, eps, T, delta, Delta, n_particles, [replica_id], seed,
        x0, v0, scheme, kappa, cap, record_paths,
    )
    return CoupledResult(float(sup[0]), paths)


def run_limit_path(
    model: SystemModel,
    T: float,
    Delta: float,
    n_particles: int,
    replica_id: int,
    seed: int,
    x0=0.0,
    cap: float = BLOWUP_CAP,
) -> np.ndarray:
    """Limit-system trajectory on its own grid: (n_coarse + 1, N, d)."""
    n_coarse = _ratio_int(T, Delta, "T/Delta")
    d, k = model.dim, model.noise_dim
    driver = NoiseDriver(seed, Delta, 1)
    dws = driver.fast_increments(replica_id, n_particles, k, n_coarse)
    X = _state_array(x0, n_particles, d, "x0")[None]
    out = np.empty((n_coarse + 1, n_particles, d))
    out[0] = X[0]
    for j in range(n_coarse):
        X = _advance_limit_em(model, X, Delta, dws[j][None])
        _guard(X, cap, "position")
        out[j + 1] = X[0]
    return out


def write_path_csv(fileobj, paths: PathRecord, replica_id: int):
    """Dump a coupled trajectory: one row per (time, particle, component)."""
    fileobj.write("t,replica,particle,component,x_eps,v_eps,x_limit\n")
    n_times, n_particles, d = paths.x_full.shape
    for j in range(n_times):
        t = paths.times[j]
        for p in range(n_particles):
            for c in range(d):
                fileobj.write(
                    f"{t:.17g},{replica_id},{p},{c},"
                    f"{paths.x_full[j, p, c]:.17g},"
                    f"{paths.v_full[j, p, c]:.17g},"
                    f"{paths.x_limit[j, p, c]:.17g}\n"
                )


# --- velocity diagnostics ----------------------------------------------------


@dataclass
class VelocityDiagnostics:
    """Monte Carlo summaries of the velocity moment bounds.

    ``sup_ev2`` is the sup over the diagnostic grid of eps * E|v_t|^2 (the
    expectation over replicas), with the pointwise standard error at the
    maximizing time.  ``mean_sup_ev4`` is E[(sup_t |eps v_t|)^4] with the sup
    tracked at every fast step.
    """

    sup_ev2: float
    sup_ev2_stderr: float
    sup_ev2_time: float
    mean_sup_ev4: float
    mean_sup_ev4_stderr: float
    replicas: int


def diagnostics_velocity(
    model: SystemModel,
    eps: float,
    T: float,
    delta: float,
    replicas: int,
    seed: int,
    n_record: int = 10,
    n_particles: int = 1,
    scheme: str = SCHEME_EXPLICIT,
    kappa: float = DEFAULT_KAPPA,
    x0=0.0,
    v0=0.0,
    cap: float = BLOWUP_CAP,
    chunk_size: int = 128,
) -> VelocityDiagnostics:
    """Estimate the two velocity moment functionals of the mass-eps system."""
    if replicas < 2:
        raise ValidationError("diagnostics need at least two replicas")
    if scheme not in _FULL_SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}")
    if scheme == SCHEME_EXPLICIT and delta > eps / kappa * (1.0 + 1e-12):
        raise StepTooLarge(f"delta = {delta} exceeds eps/kappa = {eps / kappa:.3e}")
    n_steps = _ratio_int(T, delta, "T/delta")
    rec_every = max(1, n_steps // n_record)
    rec_steps = [0] + [j for j in range(1, n_steps + 1) if j % rec_every == 0]
    advance = _FULL_SCHEMES[scheme]
    d, k = model.dim, model.noise_dim

    x_init = _state_array(x0, n_particles, d, "x0")
    v_init = _state_array(v0, n_particles, d, "v0")

    n_rec = len(rec_steps)
    z_sum = np.zeros(n_rec)
    z_sq_sum = np.zeros(n_rec)
    sup4 = np.empty(replicas)

    driver = NoiseDriver(seed, delta, 1)
    for start in range(0, replicas, chunk_size):
        ids = list(range(start, min(start + chunk_size, replicas)))
        R = len(ids)
        fast = driver.fast_increments_batch(ids, n_particles, k, n_steps)
        X = np.broadcast_to(x_init, (R, n_particles, d)).copy()
        V = np.broadcast_to(v_init, (R, n_particles, d)).copy()
        sup_ev = np.max(np.linalg.norm(eps * V, axis=-1), axis=-1)
        rec_i = 0
        if rec_steps[0] == 0:
            z = eps * np.mean(np.sum(V * V, axis=-1), axis=-1)
            z_sum[0] += z.sum()
            z_sq_sum[0] += (z * z).sum()
            rec_i = 1
        for j in range(1, n_steps + 1):
            X, V = advance(model, X, V, delta, eps, fast[:, j - 1])
            _guard(V, cap, "velocity")
            np.maximum(
                sup_ev, np.max(np.linalg.norm(eps * V, axis=-1), axis=-1), out=sup_ev
            )
            if rec_i < n_rec and j == rec_steps[rec_i]:
                z = eps * np.mean(np.sum(V * V, axis=-1), axis=-1)  # (R,)
                z_sum[rec_i] += z.sum()
                z_sq_sum[rec_i] += (z * z).sum()
                rec_i += 1
        sup4[ids[0]:ids[-1] + 1] = sup_ev ** 4

    mean_curve = z_sum / replicas
    j_star = int(np.argmax(mean_curve))
    var = (z_sq_sum[j_star] - replicas * mean_curve[j_star] ** 2) / (replicas - 1)
    stderr = float(np.sqrt(max(var, 0.0) / replicas))
    m4 = float(np.mean(sup4))
    m4_se = float(np.std(sup4, ddof=1) / np.sqrt(replicas))
    return VelocityDiagnostics(
        sup_ev2=float(mean_curve[j_star]),
        sup_ev2_stderr=stderr,
        sup_ev2_time=float(rec_steps[j_star] * delta),
        mean_sup_ev4=m4,
        mean_sup_ev4_stderr=m4_se,
        replicas=replicas,
    )


# --- assumption validation ---------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """State box, measure draws, and pair counts for assumption probing."""

    lo: float = -2.0
    hi: float = 2.0
    n_states: int = 64
    n_measures: int = 4
    measure_size: int = 8
    n_pairs: int = 64
    fd_step: float = 1e-5
    seed: int = 0
    eig_floor: float = 1e-8


@dataclass
class AssumptionReport:
    min_sym_eig: float
    argmin_state: np.ndarray
    lipschitz: dict = field(default_factory=dict)
    max_dmu_norm: float = 0.0
    n_probes: int = 0
    eig_floor: float = 1e-8

    @property
    def violated(self) -> bool:
        return self.min_sym_eig <= self.eig_floor


def validate_assumptions(
    model: SystemModel, probe: ProbeConfig = ProbeConfig()
) -> AssumptionReport:
    """Probe ellipticity and regularity of the model coefficients.

    Scans a state box against random empirical measures: reports the smallest
    symmetric-part friction eigenvalue (raising AssumptionViolated when it
    falls to the floor), the worst difference-quotient Lipschitz ratios of
    force, noise, friction and its state derivative, and the largest measure-
    derivative norm.
    """
    rng = np.random.default_rng(probe.seed)
    d = model.dim
    if d == 1:
        states = np.linspace(probe.lo, probe.hi, probe.n_states)[:, None]
    else:
        states = rng.uniform(probe.lo, probe.hi, size=(probe.n_states, d))
    measures = [
        EmpiricalMeasure(rng.uniform(probe.lo, probe.hi, size=(probe.measure_size, d)))
        for _ in range(probe.n_measures)
    ]

    min_eig = np.inf
    argmin = states[0]
    report = AssumptionReport(
        min_sym_eig=np.inf, argmin_state=argmin, eig_floor=probe.eig_floor
    )
    n_probes = 0
    for mu in measures:
        g = model.friction_field(states[None], mu.samples[None])[0]
        sym = 0.5 * (g + np.swapaxes(g, -1, -2))
        lam = np.linalg.eigvalsh(sym)[..., 0]
        n_probes += lam.shape[0]
        j = int(np.argmin(lam))
        if lam[j] < min_eig:
            min_eig = float(lam[j])
            argmin = states[j].copy()

    report.min_sym_eig = min_eig
    report.argmin_state = argmin
    report.n_probes = n_probes

    # difference-quotient Lipschitz ratios over random probe pairs; half the
    # pairs are local perturbations of size fd_step
    ratios = {"force": 0.0, "noise": 0.0, "friction": 0.0, "friction_dx": 0.0}
    max_dmu = 0.0
    for pair_i in range(probe.n_pairs):
        x1 = rng.uniform(probe.lo, probe.hi, size=d)
        if pair_i % 2 == 0:
            direction = rng.normal(size=d)
            x2 = x1 + probe.fd_step * direction / max(np.linalg.norm(direction), 1e-300)
        else:
            x2 = rng.uniform(probe.lo, probe.hi, size=d)
        m1, m2 = rng.choice(len(measures), size=2)
        mu1, mu2 = measures[m1], measures[m2]
        dx = float(np.linalg.norm(x1 - x2))
        dw = wasserstein2_assignment(mu1, mu2)
        denom = dx + dw
        if denom == 0.0:
            continue
        mu_arg1 = mu1 if model.mode == "extension" else None
        mu_arg2 = mu2 if model.mode == "extension" else None
        denom_state = dx if model.mode != "extension" else denom
        if dx > 0.0 or model.mode == "extension":
            df = np.linalg.norm(model.force(x1, mu_arg1) - model.force(x2, mu_arg2))
            dsig = np.linalg.norm(model.noise(x1, mu_arg1) - model.noise(x2, mu_arg2))
            if denom_state > 0.0:
                ratios["force"] = max(ratios["force"], df / denom_state)
                ratios["noise"] = max(ratios["noise"], dsig / denom_state)
        dgamma = np.linalg.norm(model.friction(x1, mu1) - model.friction(x2, mu2))
        ddx = np.linalg.norm(
            (model.friction_dx(x1, mu1) - model.friction_dx(x2, mu2)).reshape(-1)
        )
        ratios["friction"] = max(ratios["friction"], dgamma / denom)
        ratios["friction_dx"] = max(ratios["friction_dx"], ddx / denom)
        y = mu1.samples[int(rng.integers(0, mu1.size))]
        dmu_norm = float(np.linalg.norm(model.friction_dmu(x1, mu1, y).reshape(-1)))
        max_dmu = max(max_dmu, dmu_norm)

    report.lipschitz = ratios
    report.max_dmu_norm = max_dmu

    if report.violated:
        raise AssumptionViolated(
            f"min symmetric-part eigenvalue {min_eig:.3e} <= {probe.eig_floor:.0e} "
            f"at state {argmin}",
            probe_point=argmin,
            report=report,
        )
    return report
