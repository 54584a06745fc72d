"""Per-agent particle filtering and backward smoothing from local data only.

The forward pass is a bootstrap filter: propagate through the transition
density (the interaction term is deliberately left out; the stability
constraint compensates downstream), reweight by the measurement likelihood,
then systematic-resample every step.  Stored (particles, filter weights) are
the pre-resampling pairs the backward pass needs.

Weights live in log domain; all normalizations are max-shifted.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegeneracyError, ParameterError
from .rng import spawn_seed, stream

WEIGHT_TOL = 1e-12


@dataclass
class ParticleEnsemble:
    """Weighted particles of one agent over the whole horizon."""

    particles: np.ndarray                     # (T, M, n)
    log_filter: np.ndarray                    # (T, M), normalized
    log_smoothed: Optional[np.ndarray] = None  # (T, M), normalized
    y: Optional[np.ndarray] = None            # (T, p) local measurements
    u: Optional[np.ndarray] = None            # (T, m) local inputs

    @property
    def horizon(self):
        return self.particles.shape[0]

    @property
    def num_particles(self):
        return self.particles.shape[1]

    @property
    def filter_weights(self):
        return np.exp(self.log_filter)

    @property
    def smoothed_weights(self):
        if self.log_smoothed is None:
            raise ParameterError("smoothed weights not available; run backward_smooth")
        return np.exp(self.log_smoothed)


@dataclass
class ContributionSet:
    """Per-step particles an agent contributes to consensus.

    ``scaled[t, j]`` is the j-th ranked particle at step t multiplied by its
    smoothed weight; ``mass[t]`` is the summed smoothed weight of the selected
    subset (the normalization the aggregation stage divides out).
    """

    scaled: np.ndarray       # (T, K, n)
    mass: np.ndarray         # (T,)
    indices: np.ndarray      # (T, K) selected particle indices

    @property
    def size(self):
        return self.scaled.shape[1]


def contribution_size(num_particles, j_max):
    """ceil(M / J_max) selected particles; the whole ensemble when J_max < 1."""
    return int(np.ceil(num_particles / max(int(j_max), 1)))


def _normalize_log(logw, t):
    shift = logsumexp(logw)
    if not np.isfinite(shift):
        raise DegeneracyError(f"all particle weights vanished at step {t}", t=t)
    return logw - shift


def _systematic_indices(weights, offset, num_draws=None):
    """Systematic selection grid: one draw ``offset`` in [0,1) spaces the picks."""
    m = num_draws if num_draws is not None else len(weights)
    positions = (offset + np.arange(m)) / m
    cumulative = np.cumsum(weights)
    cumulative[-1] = max(cumulative[-1], 1.0)
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), len(weights) - 1)


def resample(particles, weights, seed):
    """Systematic resampling; returns an equally-weighted multiset of particles.

    Marginal selection counts have expectation M * weights.
    """
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ParameterError("resampling weights must be normalized")
    offset = stream(seed, "offset").uniform()
    return np.asarray(particles)[_systematic_indices(weights, offset)]


def pf_forward(model, y_v, u_v, theta, num_particles, seed):
    """Bootstrap particle filter on one agent's local record.

    Args:
        model: AgentModel; its init_state anchors the time-1 prior.
        y_v: (T, p) measurements.
        u_v: (T, m) inputs or None; row k drives the transition into step k+1.
        theta: parameter vector (noise variances must be positive).
        num_particles: M >= 2.
        seed: base seed for propagation and resampling streams.

    Raises:
        DegeneracyError: every measurement likelihood underflowed at some step;
            the caller may inflate the measurement variance and retry.
    """
    theta = model.check_theta(theta)
    if num_particles < 2:
        raise ParameterError(f"need at least 2 particles, got {num_particles}")
    y_v = np.asarray(y_v, dtype=float)
    T = y_v.shape[0]
    if u_v is None:
        u_v = np.zeros((T, model.m))

    var = model.process_var(theta)
    std = np.sqrt(var)
    shift = model.process_mean_shift()

    particles = np.empty((T, num_particles, model.n))
    log_filter = np.empty((T, num_particles))

    current = np.tile(model.init_state, (num_particles, 1))
    for k in range(T):
        u_k = u_v[k] if model.m else None
        mean = model.transition_mean(theta, current, u_k) + shift
        rng = stream(seed, "prop", k)
        props = mean + std * rng.normal(size=(num_particles, model.n))
        loglik = model.log_observation_density(theta, y_v[k], props, u_k)
        particles[k] = props
        log_filter[k] = _normalize_log(loglik, t=k + 1)
        current = resample(props, np.exp(log_filter[k]), spawn_seed(seed, "res", k))

    return ParticleEnsemble(
        particles=particles, log_filter=log_filter, y=y_v, u=np.asarray(u_v, dtype=float)
    )


def _log_kernel(model, theta, x_from, x_to, u_next):
    """(M, M) matrix of log p(x_to[j] | x_from[i]) without forming (M, M, n) temps."""
    var = model.process_var(theta)
    mean = model.transition_mean(theta, x_from, u_next) + model.process_mean_shift()
    quad = (
        np.sum(x_to**2, axis=1)[None, :]
        - 2.0 * mean @ x_to.T
        + np.sum(mean**2, axis=1)[:, None]
    )
    return -0.5 * (np.maximum(quad, 0.0) / var + model.n * np.log(2.0 * np.pi * var))


def _smoothing_ratio(ensemble, model, theta, k):
    """Shifted kernel E and its column sums for the transition k -> k+1 (0-based)."""
    u_next = ensemble.u[k + 1] if model.m else None
    log_k = _log_kernel(model, theta, ensemble.particles[k], ensemble.particles[k + 1], u_next)
    c = ensemble.log_filter[k][:, None] + log_k
    colmax = np.max(c, axis=0)
    bad = ~np.isfinite(colmax)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise DegeneracyError(
            f"smoothing denominator vanished for transition {k + 1} -> {k + 2},"
            f" target particle {j}",
            t=k + 1,
            j=j,
        )
    e = np.exp(c - colmax[None, :])
    return e, e.sum(axis=0)


CHUNK_TARGETS = 2048


def _backward_step(ensemble, model, theta, k, w_next):
    """One backward reweighting step, chunked over target particles.

    Chunking bounds the (M, M) kernel memory; results are identical to the
    one-shot computation because shifts cancel per target column.
    """
    M = ensemble.num_particles
    u_next = ensemble.u[k + 1] if model.m else None
    var = model.process_var(theta)
    mean = model.transition_mean(theta, ensemble.particles[k], u_next)
    mean = mean + model.process_mean_shift()
    mean_sq = np.sum(mean**2, axis=1)
    logw_f = ensemble.log_filter[k]
    w_new = np.zeros(M)
    for lo in range(0, M, CHUNK_TARGETS):
        hi = min(lo + CHUNK_TARGETS, M)
        x_to = ensemble.particles[k + 1][lo:hi]
        quad = (
            np.sum(x_to**2, axis=1)[None, :]
            - 2.0 * mean @ x_to.T
            + mean_sq[:, None]
        )
        c = logw_f[:, None] - 0.5 * np.maximum(quad, 0.0) / var
        colmax = np.max(c, axis=0)
        bad = ~np.isfinite(colmax) & (w_next[lo:hi] > 0)
        if np.any(bad):
            j = lo + int(np.argmax(bad))
            raise DegeneracyError(
                f"smoothing denominator vanished for transition {k + 1} -> {k + 2},"
                f" target particle {j}",
                t=k + 1,
                j=j,
            )
        e = np.exp(c - colmax[None, :])
        denom = e.sum(axis=0)
        denom[denom == 0.0] = 1.0
        w_new += e @ (w_next[lo:hi] / denom)
    return w_new


def backward_smooth(ensemble, model, theta):
    """Fill smoothed weights by the backward reweighting recursion.

    The recursion starts from the filter weights at the final step and runs
    the transition-density reweighting backward, renormalizing at every step.
    """
    theta = model.check_theta(theta)
    T, M = ensemble.horizon, ensemble.num_particles
    log_sm = np.empty((T, M))
    log_sm[T - 1] = ensemble.log_filter[T - 1]
    for k in range(T - 2, -1, -1):
        w_new = _backward_step(ensemble, model, theta, k, np.exp(log_sm[k + 1]))
        with np.errstate(divide="ignore"):
            log_sm[k] = _normalize_log(np.log(w_new), t=k + 1)
    ensemble.log_smoothed = log_sm
    return ensemble


def pairwise_weights(ensemble, model, theta, t):
    """Joint smoothing weights over particle pairs for the transition t -> t+1.

    ``t`` is 1-based with 1 <= t <= T-1.  The returned (M, M) matrix sums to 1;
    entry (i, j) weights source particle i at t against target particle j at t+1.
    """
    if ensemble.log_smoothed is None:
        raise ParameterError("run backward_smooth before pairwise_weights")
    if not (1 <= t <= ensemble.horizon - 1):
        raise ParameterError(f"t must be in 1..{ensemble.horizon - 1}, got {t}")
    k = t - 1
    e, denom = _smoothing_ratio(ensemble, model, theta, k)
    w_next = np.exp(ensemble.log_smoothed[k + 1])
    return e * (w_next / denom)[None, :]


def select_contribution(ensemble, j_max):
    """Top-ceil(M/J_max) particles per step by smoothed weight, scaled by that weight.

    Ties break toward the lower particle index.
    """
    if ensemble.log_smoothed is None:
        raise ParameterError("run backward_smooth before select_contribution")
    T, M = ensemble.horizon, ensemble.num_particles
    k_sel = contribution_size(M, j_max)
    weights = np.exp(ensemble.log_smoothed)
    order = np.argsort(-weights, axis=1, kind="stable")[:, :k_sel]
    rows = np.arange(T)[:, None]
    top_w = weights[rows, order]
    scaled = ensemble.particles[rows, order] * top_w[..., None]
    return ContributionSet(scaled=scaled, mass=top_w.sum(axis=1), indices=order)


def dump_particles(ensemble, path):
    """Debug CSV: one row per (t, i) with state, filter and smoothed weight."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = ensemble.particles.shape[2]
    w_f = ensemble.filter_weights
    w_s = (
        ensemble.smoothed_weights
        if ensemble.log_smoothed is not None
        else np.full_like(w_f, np.nan)
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "i"] + [f"x_{d + 1}" for d in range(n)] + ["w_filter", "w_smooth"])
        for t in range(ensemble.horizon):
            for i in range(ensemble.num_particles):
                writer.writerow(
                    [t + 1, i + 1]
                    + [repr(float(v)) for v in ensemble.particles[t, i]]
                    + [repr(float(w_f[t, i])), repr(float(w_s[t, i]))]
                )
