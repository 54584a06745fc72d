"""Agent model classes: linearly parametrized dynamics shared by every agent.

A model owns the deterministic parts of the transition and observation maps,

    x(t+1) = fixed_f(x, u) + sum_i theta_i * basis_f_i(x, u) + noise + coupling
    y(t)   = fixed_h(x, u) + sum_i theta_i * basis_h_i(x, u) + noise

plus the location of the two noise-variance entries inside theta.  Process
noise is isotropic N(mean, s) per state component, scaled by
sqrt(process_noise_scale) per step (the scale is dt for Euler-discretized
continuous models, 1 for natively discrete ones).

All basis callables are vectorized over leading axes of ``x``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class AgentModel:
    name: str
    n: int
    m: int
    p: int
    param_names: tuple
    s_index: int
    w_index: int
    init_state: np.ndarray
    transition_fixed: Callable
    transition_basis: Callable
    observation_fixed: Callable
    observation_basis: Callable
    theta_true: Optional[np.ndarray] = None
    input_signal: Optional[Callable] = None
    process_noise_scale: float = 1.0
    noise_mean_process: float = 0.0
    noise_mean_meas: float = 0.0

    @property
    def q(self):
        return len(self.param_names)

    @property
    def struct_indices(self):
        return tuple(i for i in range(self.q) if i not in (self.s_index, self.w_index))

    def struct(self, theta):
        return np.asarray(theta)[list(self.struct_indices)]

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.q,):
            raise ParameterError(f"theta must have shape ({self.q},), got {theta.shape}")
        if theta[self.s_index] <= 0 or theta[self.w_index] <= 0:
            raise ParameterError("noise variance entries of theta must be positive")
        return theta

    def process_var(self, theta):
        """Effective per-step process-noise variance (per state component)."""
        return float(theta[self.s_index]) * self.process_noise_scale

    def measurement_var(self, theta):
        return float(theta[self.w_index])

    def process_mean_shift(self):
        return np.sqrt(self.process_noise_scale) * self.noise_mean_process

    def transition_mean(self, theta, x, u=None):
        """Deterministic next state for states ``x`` (..., n); excludes noise mean."""
        x = np.asarray(x, dtype=float)
        basis = self.transition_basis(x, u)
        return self.transition_fixed(x, u) + np.einsum(
            "...kn,k->...n", basis, self.struct(theta)
        )

    def observation_mean(self, theta, x, u=None):
        x = np.asarray(x, dtype=float)
        basis = self.observation_basis(x, u)
        return self.observation_fixed(x, u) + np.einsum(
            "...kp,k->...p", basis, self.struct(theta)
        )

    def log_transition_density(self, theta, x_to, x_from, u=None):
        """log p(x_to | x_from) under isotropic Gaussian process noise."""
        var = self.process_var(theta)
        mean = self.transition_mean(theta, x_from, u) + self.process_mean_shift()
        resid = np.asarray(x_to, dtype=float) - mean
        quad = np.sum(resid**2, axis=-1)
        return -0.5 * (quad / var + self.n * np.log(2.0 * np.pi * var))

    def log_observation_density(self, theta, y, x, u=None):
        """log p(y | x) under isotropic Gaussian measurement noise."""
        var = self.measurement_var(theta)
        mean = self.observation_mean(theta, x, u) + self.noise_mean_meas
        resid = np.asarray(y, dtype=float) - mean
        quad = np.sum(resid**2, axis=-1)
        return -0.5 * (quad / var + self.p * np.log(2.0 * np.pi * var))

    def inputs(self, horizon):
        """Stacked known inputs u(1..T); u[k-1] drives the transition into step k."""
        if self.m == 0 or self.input_signal is None:
            return np.zeros((horizon, self.m))
        return np.stack([np.atleast_1d(self.input_signal(t)) for t in range(horizon)])


@dataclass(frozen=True)
class InteractionFunction:
    """Pairwise state-difference coupling applied on each incoming edge.

    ``func(diff, j_count)`` maps a state difference (..., n) to a state
    increment; built-ins vanish at zero difference.  ``jacobian_bound`` bounds
    the sampled Jacobian norm of the summed coupling for the 1/J-normalized
    built-ins (per-edge for unnormalized ones).
    """

    name: str
    func: Callable
    jacobian_bound: float

    def __call__(self, diff, j_count):
        return self.func(np.asarray(diff, dtype=float), int(j_count))


def sine_coupling(scale=1.0):
    return InteractionFunction(
        name=f"sin_x{scale:g}",
        func=lambda d, j: (scale / max(j, 1)) * np.sin(d),
        jacobian_bound=abs(scale),
    )


def sine_squared_coupling(scale=1.0):
    return InteractionFunction(
        name=f"sin_sq_x{scale:g}",
        func=lambda d, j: (scale / max(j, 1)) * np.sin(d) ** 2,
        jacobian_bound=abs(scale),
    )


def linear_coupling(scale=1.0):
    return InteractionFunction(
        name=f"linear_x{scale:g}",
        func=lambda d, j: (scale / max(j, 1)) * d,
        jacobian_bound=abs(scale),
    )


def hill_coupling(strength=0.05, exponent=2, dt=1.0):
    """Saturating activation d^a / (d^a + 1), scaled by strength (and dt if given).

    The bound is per incoming edge; the coupling is not 1/J-normalized.
    """
    def func(d, j):
        pow_d = d**exponent
        return dt * strength * pow_d / (pow_d + 1.0)

    return InteractionFunction(
        name=f"hill_a{exponent}", func=func, jacobian_bound=0.6495 * strength * dt
    )


def first_component_coupling(strength=1.0, dt=1.0):
    """Diffusive 1/J coupling acting on the first state component only."""
    def func(d, j):
        out = np.zeros_like(d)
        out[..., 0] = dt * (strength / max(j, 1)) * d[..., 0]
        return out

    return InteractionFunction(
        name="first_component_diffusive", func=func, jacobian_bound=abs(strength) * dt
    )


def coupling_catalog():
    """The five benchmark interaction structures used in the robustness sweep."""
    return {
        "sin_x10": sine_coupling(10.0),
        "sin_sq_x10": sine_squared_coupling(10.0),
        "sin_neg": sine_coupling(-1.0),
        "sin_sq_neg": sine_squared_coupling(-1.0),
        "linear": linear_coupling(1.0),
    }


def _zeros_like_rows(x, k, width):
    return np.zeros(x.shape[:-1] + (k, width))


def benchmark_model():
    """Scalar nonlinear time-varying benchmark agent.

    Transition a*x + b*x/(1+x^2) + c*u with known input u(t) = cos(1.2 t);
    quadratic observation d*x^2.  theta = [a, b, c, d, s, w].
    """
    def trans_fixed(x, u):
        return np.zeros_like(x)

    def trans_basis(x, u):
        xs = x[..., 0]
        if u is None:
            u0 = np.zeros_like(xs)
        else:
            u0 = np.asarray(u, dtype=float)[..., 0] * np.ones_like(xs)
        rows = np.stack(
            [xs, xs / (1.0 + xs**2), u0, np.zeros_like(xs)], axis=-1
        )
        return rows[..., None]

    def obs_fixed(x, u):
        return np.zeros(x.shape[:-1] + (1,))

    def obs_basis(x, u):
        xs = x[..., 0]
        rows = np.stack(
            [np.zeros_like(xs), np.zeros_like(xs), np.zeros_like(xs), xs**2], axis=-1
        )
        return rows[..., None]

    return AgentModel(
        name="benchmark",
        n=1,
        m=1,
        p=1,
        param_names=("a", "b", "c", "d", "s", "w"),
        s_index=4,
        w_index=5,
        init_state=np.zeros(1),
        transition_fixed=trans_fixed,
        transition_basis=trans_basis,
        observation_fixed=obs_fixed,
        observation_basis=obs_basis,
        theta_true=np.array([0.5, 25.0, 8.0, 0.05, 0.5, 1.0]),
        input_signal=lambda t: np.array([np.cos(1.2 * t)]),
    )


def benchmark_coupling():
    return sine_coupling(1.0)


@dataclass(frozen=True)
class ContinuousModel:
    """Continuous-time drift specification, to be discretized by forward Euler."""

    name: str
    n: int
    m: int
    p: int
    param_names: tuple
    s_index: int
    w_index: int
    init_state: np.ndarray
    drift_fixed: Callable
    drift_basis: Callable
    observation_fixed: Callable
    observation_basis: Callable
    theta_true: Optional[np.ndarray] = None
    input_signal: Optional[Callable] = None
    noise_mean_process: float = 0.0
    noise_mean_meas: float = 0.0


def discretize_continuous(cmodel, dt):
    """Forward-Euler discretization x <- x + dt * drift(x); noise std scales by sqrt(dt)."""
    if dt <= 0:
        raise ParameterError(f"dt must be positive, got {dt}")

    def trans_fixed(x, u):
        return x + dt * cmodel.drift_fixed(x, u)

    def trans_basis(x, u):
        return dt * cmodel.drift_basis(x, u)

    return AgentModel(
        name=cmodel.name,
        n=cmodel.n,
        m=cmodel.m,
        p=cmodel.p,
        param_names=cmodel.param_names,
        s_index=cmodel.s_index,
        w_index=cmodel.w_index,
        init_state=np.asarray(cmodel.init_state, dtype=float),
        transition_fixed=trans_fixed,
        transition_basis=trans_basis,
        observation_fixed=cmodel.observation_fixed,
        observation_basis=cmodel.observation_basis,
        theta_true=cmodel.theta_true,
        input_signal=cmodel.input_signal,
        process_noise_scale=float(dt),
        noise_mean_process=cmodel.noise_mean_process,
        noise_mean_meas=cmodel.noise_mean_meas,
    )


def gene_regulation_continuous():
    """Scalar gene-activity drift a*x with linear readout b*x; theta = [a, b, s, w]."""
    def drift_fixed(x, u):
        return np.zeros_like(x)

    def drift_basis(x, u):
        xs = x[..., 0]
        rows = np.stack([xs, np.zeros_like(xs)], axis=-1)
        return rows[..., None]

    def obs_fixed(x, u):
        return np.zeros(x.shape[:-1] + (1,))

    def obs_basis(x, u):
        xs = x[..., 0]
        rows = np.stack([np.zeros_like(xs), xs], axis=-1)
        return rows[..., None]

    return ContinuousModel(
        name="gene_regulation",
        n=1,
        m=0,
        p=1,
        param_names=("a", "b", "s", "w"),
        s_index=2,
        w_index=3,
        init_state=np.ones(1),
        drift_fixed=drift_fixed,
        drift_basis=drift_basis,
        observation_fixed=obs_fixed,
        observation_basis=obs_basis,
        theta_true=np.array([-0.2, 1.0, 0.001, 0.01]),
    )


def gene_regulation_model(dt=0.01):
    return discretize_continuous(gene_regulation_continuous(), dt)


def gene_regulation_coupling(dt=0.01, strength=0.05, exponent=2):
    return hill_coupling(strength=strength, exponent=exponent, dt=dt)


def fitzhugh_nagumo_continuous():
    """Two-state neuron drift; summed-component readout.

    theta = [a, b, c, d, e, f, s, w] with
    dx1 = a*x1 + b*x1^3 + c*x2, dx2 = d + e*x1 + f*x2, y = x1 + x2.
    """
    def drift_fixed(x, u):
        return np.zeros_like(x)

    def drift_basis(x, u):
        x1 = x[..., 0]
        x2 = x[..., 1]
        zeros = np.zeros_like(x1)
        ones = np.ones_like(x1)
        rows = np.stack(
            [
                np.stack([x1, zeros], axis=-1),
                np.stack([x1**3, zeros], axis=-1),
                np.stack([x2, zeros], axis=-1),
                np.stack([zeros, ones], axis=-1),
                np.stack([zeros, x1], axis=-1),
                np.stack([zeros, x2], axis=-1),
            ],
            axis=-2,
        )
        return rows

    def obs_fixed(x, u):
        return (x[..., 0] + x[..., 1])[..., None]

    def obs_basis(x, u):
        return _zeros_like_rows(x, 6, 1)

    return ContinuousModel(
        name="fitzhugh_nagumo",
        n=2,
        m=0,
        p=1,
        param_names=("a", "b", "c", "d", "e", "f", "s", "w"),
        s_index=6,
        w_index=7,
        init_state=np.array([0.87609, -3.5091]),
        drift_fixed=drift_fixed,
        drift_basis=drift_basis,
        observation_fixed=obs_fixed,
        observation_basis=obs_basis,
        theta_true=np.array([1.0, -1.0, -1.0, 0.28, 0.5, -0.04, 0.05, 0.1]),
    )


def fitzhugh_nagumo_model(dt=0.01):
    return discretize_continuous(fitzhugh_nagumo_continuous(), dt)


def fitzhugh_nagumo_coupling(dt=0.01, strength=1.0):
    return first_component_coupling(strength=strength, dt=dt)


MODEL_BUILDERS = {
    "benchmark": lambda dt=None: (benchmark_model(), benchmark_coupling()),
    "gene_regulation": lambda dt=0.01: (
        gene_regulation_model(dt),
        gene_regulation_coupling(dt),
    ),
    "fitzhugh_nagumo": lambda dt=0.01: (
        fitzhugh_nagumo_model(dt),
        fitzhugh_nagumo_coupling(dt),
    ),
}


def build_model(name, dt=None):
    """Look up a built-in model by name; returns (model, default coupling)."""
    if name not in MODEL_BUILDERS:
        raise ParameterError(f"unknown model '{name}'; choices: {sorted(MODEL_BUILDERS)}")
    if dt is None:
        return MODEL_BUILDERS[name]()
    return MODEL_BUILDERS[name](dt)
