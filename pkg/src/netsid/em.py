"""Consensus EM: particle likelihood surrogates and the stability-constrained
maximization loop.

Each iteration smooths every agent locally, fuses the scaled particle subsets
by push-sum gossip, evaluates the Gaussian likelihood surrogate on the fused
state track, and maximizes it over the feasible (contraction-certified)
parameter set.  The surrogate drops the parameter-free initial-state term, so
its transition part runs over the T-1 recorded transitions.

The fused track divides the restored payload by the consensus estimate of the
total contributed weight mass: the restored entries are particles scaled by
smoothed weights, and only after that normalization do the entries form a
properly weighted (unit-mass) particle approximation whose sum is the state
estimate.
"""

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from .errors import DegeneracyError, DivergenceError, ParameterError
from .gossip import run_consensus
from .rng import spawn_seed, stream
from .smoother import backward_smooth, contribution_size, pairwise_weights, pf_forward, select_contribution
from .stability import PSD_SLACK, FeasibilitySearch, StabilityCertificate, check_contraction

ASCENT_TOL = 1e-12
VARIANCE_FLOOR = 1e-8
THETA_NORM_GUARD = 1e6


@dataclass
class GlobalParticleSet:
    """Fused consensus particles for every step of the horizon.

    The restored payload concatenates every agent's scaled particle block;
    ``block_mass`` carries each block's contributed smoothed-weight mass
    through the same averaging.  ``particles`` are the entries normalized by
    the total contributed mass, so they form a unit-mass weighted sample whose
    sum is the consensus state estimate; ``block_means`` resolve each agent's
    own posterior-mean track from its block.
    """

    raw_particles: np.ndarray      # (T, K*V, n)
    block_mass: np.ndarray         # (T, V)
    particles: np.ndarray = field(init=False)

    def __post_init__(self):
        self.block_mass = np.atleast_2d(self.block_mass)
        total = self.block_mass.sum(axis=1)
        total = np.where(total > 0, total, 1.0)
        self.particles = self.raw_particles / total[:, None, None]

    @property
    def num_agents(self):
        return self.block_mass.shape[1]

    @property
    def block_size(self):
        return self.raw_particles.shape[1] // self.num_agents

    @property
    def aggregate(self):
        """State estimate per step: the sum of the scaled (normalized) entries."""
        return self.particles.sum(axis=1)

    @property
    def block_means(self):
        """(T, V, n) per-agent state estimates: block sums over block masses."""
        T, KV, n = self.raw_particles.shape
        V = self.num_agents
        sums = self.raw_particles.reshape(T, V, self.block_size, n).sum(axis=2)
        mass = np.where(self.block_mass > 0, self.block_mass, 1.0)
        return sums / mass[:, :, None]


@dataclass
class EMConfig:
    num_particles: int = 500
    delta: float = 1e-2
    i_con: int = 1000
    epsilon: float = 0.1
    max_iters: int = 12
    seed: int = 0
    theta0: Optional[np.ndarray] = None
    init_center: Optional[np.ndarray] = None
    init_range: float = 0.5
    constrain_stability: bool = True
    witness_mode: str = "mean"            # "mean": time-averaged fused state; "track": every step
    witness_box: Optional[np.ndarray] = None
    kappa_grid: Optional[np.ndarray] = None
    p_grid: Optional[np.ndarray] = None
    consensus_mode: str = "oracle"
    agent: int = 1
    degeneracy_retries: int = 3
    n_jobs: int = 1


@dataclass
class IterationRecord:
    k: int
    theta: np.ndarray
    qbar_new: float
    qbar_old: float
    delta_qbar: float
    rounds: int
    messages: int
    seconds: float
    cert_kappa: Optional[float] = None
    cert_margin: Optional[float] = None
    mass_drift: float = 0.0
    count_drift: float = 0.0
    degeneracy_retries: int = 0


@dataclass
class ThetaEstimate:
    theta: np.ndarray
    certificate: Optional[StabilityCertificate]
    history: list
    converged: bool = False
    diverged: bool = False
    theta0: Optional[np.ndarray] = None
    model_name: str = ""

    @property
    def n_iterations(self):
        return len(self.history)

    def history_to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        q = len(self.theta)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["k"]
                + [f"theta_{i + 1}" for i in range(q)]
                + ["qbar", "delta_qbar", "rounds", "seconds"]
            )
            for rec in self.history:
                writer.writerow(
                    [rec.k]
                    + [repr(float(v)) for v in rec.theta]
                    + [repr(float(rec.qbar_new)), repr(float(rec.delta_qbar)), rec.rounds, repr(float(rec.seconds))]
                )

    def summary_to_json(self, path):
        payload = {
            "theta": [float(v) for v in self.theta],
            "converged": self.converged,
            "diverged": self.diverged,
            "iterations": self.n_iterations,
            "model_name": self.model_name,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def _gaussian_logpdf(resid, var, dim_per_term):
    quad = np.sum(resid**2)
    count = resid.size / dim_per_term
    return -0.5 * (quad / var + count * dim_per_term * np.log(2.0 * np.pi * var))


def q_local(theta, theta_k, ensemble, model):
    """Single-agent particle surrogate: initial + transition + measurement parts.

    Pairwise transition weights are evaluated under ``theta_k`` (the parameter
    that produced the particles); log densities under ``theta``.
    """
    if ensemble.log_smoothed is None:
        raise ParameterError("run backward_smooth before q_local")
    theta = model.check_theta(theta)
    T = ensemble.horizon
    u = ensemble.u
    w_sm = np.exp(ensemble.log_smoothed)

    u0 = u[0] if model.m else None
    init_mean = model.transition_mean(theta, model.init_state, u0) + model.process_mean_shift()
    log_init = -0.5 * (
        np.sum((ensemble.particles[0] - init_mean) ** 2, axis=-1) / model.process_var(theta)
        + model.n * np.log(2.0 * np.pi * model.process_var(theta))
    )
    q1 = float(np.dot(w_sm[0], log_init))

    q2 = 0.0
    for t in range(1, T):
        w_pair = pairwise_weights(ensemble, model, theta_k, t)
        u_t = u[t] if model.m else None
        mean = model.transition_mean(theta, ensemble.particles[t - 1], u_t)
        mean = mean + model.process_mean_shift()
        diff = ensemble.particles[t][None, :, :] - mean[:, None, :]
        logp = -0.5 * (
            np.sum(diff**2, axis=-1) / model.process_var(theta)
            + model.n * np.log(2.0 * np.pi * model.process_var(theta))
        )
        term = float(np.sum(w_pair * logp))
        if not np.isfinite(term):
            i, j = np.unravel_index(np.argmin(np.where(np.isfinite(logp), 0, -np.inf)), logp.shape)
            raise DivergenceError(
                f"non-finite transition log-density at t={t}, pair ({i}, {j})", t=t
            )
        q2 += term

    q3 = 0.0
    for t in range(T):
        u_t = u[t] if model.m else None
        logp = model.log_observation_density(theta, ensemble.y[t], ensemble.particles[t], u_t)
        term = float(np.dot(w_sm[t], logp))
        if not np.isfinite(term):
            i = int(np.argmin(np.where(np.isfinite(logp), 0, -np.inf)))
            raise DivergenceError(
                f"non-finite measurement log-density at t={t + 1}, particle {i}", t=t + 1
            )
        q3 += term
    return q1 + q2 + q3


def _consensus_residuals(theta, aggregate, y_v, u_v, model):
    """Transition and measurement residual stacks on the fused state track."""
    T = aggregate.shape[0]
    u_next = u_v[1:] if model.m else None
    mean_next = model.transition_mean(theta, aggregate[:-1], u_next) + model.process_mean_shift()
    resid_f = aggregate[1:] - mean_next
    u_all = u_v if model.m else None
    mean_obs = model.observation_mean(theta, aggregate, u_all) + model.noise_mean_meas
    resid_h = y_v - mean_obs
    return resid_f, resid_h


def q_consensus(theta, theta_k, gset, y_v, u_v, model, form="per_agent", agent=1):
    """Likelihood surrogate on the fused consensus particles.

    Forms:
      * "per_agent" (default, what the EM loop maximizes): transition terms on
        every agent's block-mean track plus the measurement term on the
        designated agent's own block track.
      * "aggregate": the single-track Gaussian form on the summed
        (weight-normalized) consensus estimate.
      * "legacy": the unnormalized quadratic cost on the aggregate track with
        an elementwise theta*log|theta| penalty (compatibility only).

    All forms use exact Gaussian residual quadratics plus log-normalization
    (except "legacy") over T-1 transitions and T measurements; the
    parameter-free initial-state term is dropped.
    """
    theta = model.check_theta(theta)
    if form == "per_agent":
        tracks = np.swapaxes(gset.block_means, 0, 1)     # (V, T, n)
        own = tracks[agent - 1]
        u_next = u_v[1:] if model.m else None
        mean_next = model.transition_mean(theta, tracks[:, :-1], u_next)
        resid_f = tracks[:, 1:] - mean_next - model.process_mean_shift()
        u_all = u_v if model.m else None
        resid_h = y_v - model.observation_mean(theta, own, u_all) - model.noise_mean_meas
        q2 = _gaussian_logpdf(resid_f, model.process_var(theta), model.n)
        q3 = _gaussian_logpdf(resid_h, model.measurement_var(theta), model.p)
        out = float(q2 + q3)
        if not np.isfinite(out):
            raise DivergenceError("non-finite consensus surrogate value")
        return out

    aggregate = gset.aggregate
    resid_f, resid_h = _consensus_residuals(theta, aggregate, y_v, u_v, model)
    if form == "legacy":
        theta_arr = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            penalty = np.where(theta_arr != 0, theta_arr * np.log(np.abs(theta_arr)), 0.0)
        T = aggregate.shape[0]
        return float(
            -np.sum(resid_f**2) - np.sum(resid_h**2) - (2 * T - 1) * np.sum(penalty)
        )
    if form != "aggregate":
        raise ParameterError(f"unknown q_consensus form '{form}'")
    q2 = _gaussian_logpdf(resid_f, model.process_var(theta), model.n)
    q3 = _gaussian_logpdf(resid_h, model.measurement_var(theta), model.p)
    out = float(q2 + q3)
    if not np.isfinite(out):
        raise DivergenceError("non-finite consensus surrogate value")
    return out


def _design_matrices(model, tracks, y_v, u_v, obs_track):
    """Least-squares design for the structural entries.

    ``tracks`` is (V, T, n): transition residual rows come from every track;
    measurement rows come from ``obs_track`` (T, n) against ``y_v``.
    """
    V, T, n = tracks.shape
    u_next = u_v[1:] if model.m else None
    basis_f = model.transition_basis(tracks[:, :-1], u_next)      # (V, T-1, qs, n)
    fixed_f = model.transition_fixed(tracks[:, :-1], u_next)
    a_f = np.swapaxes(basis_f, -2, -1).reshape(V * (T - 1) * n, -1)
    b_f = (tracks[:, 1:] - fixed_f - model.process_mean_shift()).reshape(-1)

    u_all = u_v if model.m else None
    basis_h = model.observation_basis(obs_track, u_all)           # (T, qs, p)
    fixed_h = model.observation_fixed(obs_track, u_all)
    a_h = np.swapaxes(basis_h, -2, -1).reshape(T * model.p, -1)
    b_h = (y_v - fixed_h - model.noise_mean_meas).reshape(-1)
    return a_f, b_f, a_h, b_h


def _bisect_to_boundary(start, end, feasible, iters=45):
    """Largest feasible point on the segment [start, end]; start must be feasible."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(start + mid * (end - start)):
            lo = mid
        else:
            hi = mid
    return start + lo * (end - start)


def _repair_infeasible(theta_s, feasible):
    """Pull an infeasible start toward the zero structural vector until feasible."""
    if feasible(theta_s):
        return theta_s, True
    for tau in np.linspace(0.95, 0.0, 20):
        cand = tau * theta_s
        if feasible(cand):
            return _bisect_to_boundary(cand, theta_s, feasible), True
    return theta_s, False


def kkt_residual(theta_s, hess, lin, feasible, grad_tol_scale=1e-6):
    """Stationarity diagnostics at a candidate maximizer.

    Either the projected gradient is negligible, or the constraint is active
    and the ascent direction immediately leaves the feasible set (multiplier
    sign consistent with a maximum on the boundary).
    """
    grad = lin - hess @ theta_s
    gnorm = float(np.linalg.norm(grad))
    eps = 1e-7 / (1.0 + gnorm)
    step = theta_s + eps * grad
    if feasible(step):
        projected = step
        blocked = False
    else:
        projected = _bisect_to_boundary(theta_s, step, feasible)
        blocked = True
    pg_norm = float(np.linalg.norm(projected - theta_s)) / eps
    stationary = pg_norm <= grad_tol_scale * (1.0 + gnorm)
    return {
        "grad_norm": gnorm,
        "projected_grad_norm": pg_norm,
        "active_blocking": blocked,
        "stationary": bool(stationary or blocked),
    }


def m_step(theta_k, gset, y_v, u_v, model, config, agent=None):
    """Maximize the consensus surrogate over the certified-stable set.

    Structural entries: projected-gradient ascent from theta_k (exact
    least-squares jump when it is feasible), projection by bisection toward
    the current iterate.  Noise variances: closed-form residual averages,
    floored at 1e-8.

    Returns (theta_next, certificate, info).
    """
    theta_k = model.check_theta(theta_k)
    agent = config.agent if agent is None else agent
    tracks = np.swapaxes(gset.block_means, 0, 1)     # (V, T, n)
    obs_track = tracks[agent - 1]
    a_f, b_f, a_h, b_h = _design_matrices(model, tracks, y_v, u_v, obs_track)
    s_eff = model.process_var(theta_k)
    w_var = model.measurement_var(theta_k)

    hess = a_f.T @ a_f / s_eff + a_h.T @ a_h / w_var
    lin = a_f.T @ b_f / s_eff + a_h.T @ b_h / w_var

    search = None
    if config.constrain_stability:
        flat = tracks.reshape(-1, model.n)
        if config.witness_mode == "track":
            witnesses = flat
        elif config.witness_mode == "mean":
            # representative operating point: mean magnitude per component, signed
            # by the mean direction so asymmetric dynamics see the right side
            sign = np.where(flat.mean(axis=0) >= 0, 1.0, -1.0)
            witnesses = (sign * np.abs(flat).mean(axis=0))[None, :]
        else:
            raise ParameterError(f"unknown witness_mode '{config.witness_mode}'")
        if config.witness_box is not None:
            witnesses = np.vstack([witnesses, np.atleast_2d(config.witness_box)])
        search = FeasibilitySearch(
            model, witnesses, kappa_grid=config.kappa_grid, p_grid=config.p_grid
        )

    def theta_with(struct):
        out = theta_k.copy()
        out[list(model.struct_indices)] = struct
        return out

    if search is None:
        def feasible(struct):
            return True
    else:
        def feasible(struct):
            return search.best(theta_with(struct))[0] >= PSD_SLACK

    def objective(struct):
        rf = a_f @ struct - b_f
        rh = a_h @ struct - b_h
        return -0.5 * (rf @ rf / s_eff + rh @ rh / w_var)

    theta_s = model.struct(theta_k).astype(float)
    info = {"repaired": False, "solver": "pg", "pg_iters": 0, "stalled": False}

    theta_s, repaired_ok = _repair_infeasible(theta_s, feasible)
    info["repaired"] = not np.array_equal(theta_s, model.struct(theta_k))
    if not repaired_ok:
        info["solver"] = "stalled-infeasible"
        cert = _certify(model, theta_k, search)
        return theta_k.copy(), cert, info

    ls_solution, *_ = np.linalg.lstsq(hess, lin, rcond=None)
    if feasible(ls_solution) and objective(ls_solution) >= objective(theta_s):
        theta_s = ls_solution
        info["solver"] = "least-squares"
    else:
        eigmax = float(np.max(np.linalg.eigvalsh(hess))) if hess.size else 1.0
        base_step = 1.0 / max(eigmax, 1e-30)
        start = theta_s.copy()
        for it in range(200):
            grad = lin - hess @ theta_s
            if np.linalg.norm(grad) <= 1e-10 * (1.0 + np.linalg.norm(theta_s)):
                break
            step = base_step
            accepted = False
            for _ in range(50):
                cand = theta_s + step * grad
                if not feasible(cand):
                    cand = _bisect_to_boundary(theta_s, cand, feasible)
                if objective(cand) > objective(theta_s) + 1e-15:
                    theta_s = cand
                    accepted = True
                    break
                step *= 0.5
            info["pg_iters"] = it + 1
            if not accepted:
                info["stalled"] = True
                if it == 0:
                    theta_s = start
                break

    theta_next = theta_with(theta_s)

    resid_f = a_f @ theta_s - b_f
    resid_h = a_h @ theta_s - b_h
    s_new = max(float(np.mean(resid_f**2)) / model.process_noise_scale, VARIANCE_FLOOR)
    w_new = max(float(np.mean(resid_h**2)), VARIANCE_FLOOR)
    theta_next[model.s_index] = s_new
    theta_next[model.w_index] = w_new

    gain_new = q_consensus(theta_next, theta_k, gset, y_v, u_v, model, agent=agent)
    gain_old = q_consensus(theta_k, theta_k, gset, y_v, u_v, model, agent=agent)
    if not np.isfinite(gain_new) or gain_new < gain_old - ASCENT_TOL:
        theta_next = theta_k.copy()
        info["solver"] = "stalled-ascent"

    info["kkt"] = kkt_residual(
        theta_next[list(model.struct_indices)], hess, lin, feasible
    )
    cert = _certify(model, theta_next, search)
    return theta_next, cert, info


def _certify(model, theta, search):
    if search is None:
        return None
    margin_s, p_diag, kappa = search.best(theta)
    cert = StabilityCertificate(P=np.diag(p_diag), kappa=kappa, witness_states=search.states)
    _, block_margin = check_contraction(model, theta, cert, search.states)
    cert.margin = block_margin
    return cert


def draw_initial_theta(center, range_frac, seed):
    """Each entry uniform in center_i * (1 +/- range_frac)."""
    center = np.asarray(center, dtype=float)
    rng = stream(seed, "init")
    return center * (1.0 + rng.uniform(-range_frac, range_frac, size=center.shape))


def _agent_contribution(model, theta, y_v, u_v, num_particles, j_max, seed):
    ens = pf_forward(model, y_v, u_v, theta, num_particles, seed)
    backward_smooth(ens, model, theta)
    return select_contribution(ens, j_max)


def identify(trajectory, net, model, config):
    """Run the full consensus EM loop on a recorded network trajectory.

    Alternates the per-agent smoothing + gossip fusion E-step with the
    stability-constrained M-step until the surrogate gain drops below
    ``config.epsilon`` or the iteration cap; deterministic for a fixed
    config seed.

    Returns a ThetaEstimate whose history carries, per iteration, the
    surrogate values, consensus report counters and the certificate data.
    """
    V = net.num_agents
    if trajectory.num_agents != V:
        raise ParameterError(
            f"trajectory has {trajectory.num_agents} agents, network has {V}"
        )
    if not (1 <= config.agent <= V):
        raise ParameterError(f"designated agent {config.agent} out of range")

    j_max = net.max_in_degree()
    y_des = trajectory.y[config.agent - 1]
    u_des = trajectory.u[config.agent - 1]

    if config.theta0 is not None:
        theta = model.check_theta(np.asarray(config.theta0, dtype=float))
    else:
        center = config.init_center if config.init_center is not None else model.theta_true
        if center is None:
            raise ParameterError("need theta0 or init_center (or a model with theta_true)")
        theta = model.check_theta(
            draw_initial_theta(center, config.init_range, spawn_seed(config.seed, "init"))
        )
    theta0 = theta.copy()

    history = []
    certificate = None
    converged = False
    diverged = False

    for k in range(config.max_iters):
        tic = time.perf_counter()
        theta_filter = theta.copy()
        retries = 0
        while True:
            try:
                runner = Parallel(n_jobs=config.n_jobs) if config.n_jobs != 1 else None
                seeds = [spawn_seed(config.seed, "estep", k, v) for v in range(V)]
                if runner is None:
                    contribs = [
                        _agent_contribution(
                            model,
                            theta_filter,
                            trajectory.y[v],
                            trajectory.u[v],
                            config.num_particles,
                            j_max,
                            seeds[v],
                        )
                        for v in range(V)
                    ]
                else:
                    contribs = runner(
                        delayed(_agent_contribution)(
                            model,
                            theta_filter,
                            trajectory.y[v],
                            trajectory.u[v],
                            config.num_particles,
                            j_max,
                            seeds[v],
                        )
                        for v in range(V)
                    )
                break
            except DegeneracyError as err:
                retries += 1
                if retries > config.degeneracy_retries:
                    raise DegeneracyError(
                        f"EM iteration {k}: smoother degeneracy persisted after "
                        f"{config.degeneracy_retries} measurement-variance inflations "
                        f"({err})",
                        t=err.t,
                        j=err.j,
                    ) from err
                theta_filter = theta_filter.copy()
                theta_filter[model.w_index] *= 10.0

        raw, block_mass, report = run_consensus(
            contribs,
            net,
            delta=config.delta,
            i_con=config.i_con,
            seed=spawn_seed(config.seed, "gossip", k),
            termination=config.consensus_mode,
        )
        gset = GlobalParticleSet(raw_particles=raw, block_mass=block_mass)

        theta_next, certificate, info = m_step(theta, gset, y_des, u_des, model, config)
        qbar_old = q_consensus(theta, theta, gset, y_des, u_des, model, agent=config.agent)
        qbar_new = q_consensus(theta_next, theta, gset, y_des, u_des, model, agent=config.agent)
        seconds = time.perf_counter() - tic

        history.append(
            IterationRecord(
                k=k,
                theta=theta_next.copy(),
                qbar_new=qbar_new,
                qbar_old=qbar_old,
                delta_qbar=qbar_new - qbar_old,
                rounds=report.rounds_run,
                messages=report.messages_sent,
                seconds=seconds,
                cert_kappa=None if certificate is None else certificate.kappa,
                cert_margin=None if certificate is None else certificate.margin,
                mass_drift=report.mass_drift,
                count_drift=report.count_drift,
                degeneracy_retries=retries,
            )
        )
        theta = theta_next
        if np.linalg.norm(theta) > THETA_NORM_GUARD:
            diverged = True
            break
        if qbar_new - qbar_old < config.epsilon:
            converged = True
            break

    return ThetaEstimate(
        theta=theta,
        certificate=certificate,
        history=history,
        converged=converged,
        diverged=diverged,
        theta0=theta0,
        model_name=model.name,
    )
