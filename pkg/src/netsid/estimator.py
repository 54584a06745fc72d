"""Scikit-learn style front end for the consensus EM identifier."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .em import EMConfig, identify
from .errors import ParameterError
from .models import build_model
from .simulate import TrajectoryData, simulate_network


def check_measurements(y, num_agents=None, output_dim=None):
    """Coerce measurements to a finite (V, T, p) float array."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[:, :, None]
    if y.ndim != 3:
        raise ParameterError(f"y must be (V, T, p), got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ParameterError("y contains non-finite values")
    if num_agents is not None and y.shape[0] != num_agents:
        raise ParameterError(f"expected {num_agents} agents, y has {y.shape[0]}")
    if output_dim is not None and y.shape[2] != output_dim:
        raise ParameterError(f"expected output dim {output_dim}, y has {y.shape[2]}")
    return y


def check_inputs(u, num_agents, horizon, input_dim):
    """Coerce inputs to (V, T, m); generate zeros when the model has none."""
    if u is None:
        return np.zeros((num_agents, horizon, input_dim))
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[:, :, None]
    if u.shape != (num_agents, horizon, input_dim):
        raise ParameterError(
            f"u must have shape ({num_agents}, {horizon}, {input_dim}), got {u.shape}"
        )
    if not np.all(np.isfinite(u)):
        raise ParameterError("u contains non-finite values")
    return u


class ConsensusEMIdentifier(BaseEstimator):
    """Identify shared agent dynamics from per-agent measurements.

    Parameters mirror the EM configuration; ``model`` is a built-in model name
    or an AgentModel instance, and ``network`` the communication graph.  After
    ``fit``, the estimated parameter vector is in ``theta_``, with the
    stability certificate, per-iteration history and consensus counters
    alongside.
    """

    def __init__(
        self,
        model="benchmark",
        network=None,
        dt=None,
        n_particles=500,
        consensus_tol=1e-2,
        max_consensus_rounds=1000,
        tol=0.1,
        max_iter=12,
        theta0=None,
        init_center=None,
        init_range=0.5,
        constrain_stability=True,
        witness_box=None,
        consensus_mode="oracle",
        agent=1,
        n_jobs=1,
        random_state=0,
    ):
        self.model = model
        self.network = network
        self.dt = dt
        self.n_particles = n_particles
        self.consensus_tol = consensus_tol
        self.max_consensus_rounds = max_consensus_rounds
        self.tol = tol
        self.max_iter = max_iter
        self.theta0 = theta0
        self.init_center = init_center
        self.init_range = init_range
        self.constrain_stability = constrain_stability
        self.witness_box = witness_box
        self.consensus_mode = consensus_mode
        self.agent = agent
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _resolve_model(self):
        if isinstance(self.model, str):
            model, coupling = build_model(self.model, self.dt)
            return model, coupling
        return self.model, None

    def fit(self, y, u=None):
        """Estimate the shared parameter vector from measurements y (V, T, p)."""
        if self.network is None:
            raise ParameterError("a DirectedNetwork must be supplied via `network`")
        model, _ = self._resolve_model()
        y = check_measurements(y, num_agents=self.network.num_agents, output_dim=model.p)
        u = check_inputs(u, y.shape[0], y.shape[1], model.m)
        trajectory = TrajectoryData(y=y, u=u, model_name=model.name)

        config = EMConfig(
            num_particles=self.n_particles,
            delta=self.consensus_tol,
            i_con=self.max_consensus_rounds,
            epsilon=self.tol,
            max_iters=self.max_iter,
            seed=self.random_state,
            theta0=self.theta0,
            init_center=self.init_center,
            init_range=self.init_range,
            constrain_stability=self.constrain_stability,
            witness_box=self.witness_box,
            consensus_mode=self.consensus_mode,
            agent=self.agent,
            n_jobs=self.n_jobs,
        )
        estimate = identify(trajectory, self.network, model, config)

        self.model_ = model
        self.estimate_ = estimate
        self.theta_ = estimate.theta
        self.certificate_ = estimate.certificate
        self.history_ = estimate.history
        self.n_iter_ = estimate.n_iterations
        self.converged_ = estimate.converged
        return self

    def _check_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("call fit before using the fitted attributes")

    def predict_trajectory(self, horizon, coupling=None, x0=None, seed=0):
        """Simulate the fitted dynamics over ``horizon`` steps; returns TrajectoryData."""
        self._check_fitted()
        g = coupling
        if g is None and isinstance(self.model, str):
            g = build_model(self.model, self.dt)[1]
        return simulate_network(
            self.model_, g, self.network, horizon, x0=x0, seed=seed, theta=self.theta_
        )
