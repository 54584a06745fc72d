"""Contraction certificates for the deterministic part of the agent dynamics.

Feasible parameters are those for which a metric P > 0 and a rate kappa in
(0, 2) make the block matrix

    [[(2 - kappa) I - P,  F(x, theta)^T],
     [F(x, theta),        P            ]]

positive semidefinite at every witness state x, where F is the state Jacobian
of the deterministic transition.  PSD of the block form is equivalent (for
P > 0) to PSD of the Schur complement (2 - kappa) I - P - F^T P^{-1} F, which
is the cheap form used inside grid searches; the block form gives the reported
margin.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError

PSD_SLACK = -1e-9


@dataclass
class StabilityCertificate:
    P: np.ndarray
    kappa: float
    witness_states: np.ndarray
    margin: Optional[float] = None

    def validate(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ParameterError("P must be a square matrix")
        if not np.allclose(P, P.T, atol=1e-12):
            raise ParameterError("P must be symmetric")
        if np.min(np.linalg.eigvalsh(P)) <= 0:
            raise ParameterError("P must be positive definite")
        if not (0.0 < self.kappa < 2.0):
            raise ParameterError(f"kappa must lie in (0, 2), got {self.kappa}")
        return self

    def to_dict(self):
        return {
            "P_diag": [float(v) for v in np.diag(self.P)],
            "kappa": float(self.kappa),
            "margin": None if self.margin is None else float(self.margin),
            "witness_count": int(np.atleast_2d(self.witness_states).shape[0]),
        }


def differential_jacobian(model, theta, x, u=None, method="forward"):
    """State Jacobian of the deterministic transition at ``x`` by finite differences.

    Steps are 1e-6 * (1 + |x_k|) per coordinate; ``method`` selects forward or
    central differences (central is the validation reference).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.n:
        raise ParameterError(f"state must have dim {model.n}, got {x.shape[0]}")
    jac = _jacobians(model, theta, x[None, :], u=u, method=method)[0]
    if not np.all(np.isfinite(jac)):
        raise ParameterError(f"non-finite derivative at x={x}")
    return jac


def _jacobians(model, theta, states, u=None, method="forward"):
    """(W, n, n) stack of transition Jacobians at each witness state."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    w, n = states.shape
    base = model.transition_mean(theta, states, u)
    jac = np.empty((w, n, n))
    for k in range(n):
        h = 1e-6 * (1.0 + np.abs(states[:, k]))
        plus = states.copy()
        plus[:, k] += h
        if method == "forward":
            jac[:, :, k] = (model.transition_mean(theta, plus, u) - base) / h[:, None]
        elif method == "central":
            minus = states.copy()
            minus[:, k] -= h
            jac[:, :, k] = (
                model.transition_mean(theta, plus, u) - model.transition_mean(theta, minus, u)
            ) / (2.0 * h[:, None])
        else:
            raise ParameterError(f"unknown differencing method '{method}'")
    return jac


def _block_eigmin(F, P, kappa):
    """Minimum eigenvalue of the contraction block matrix for one Jacobian."""
    n = P.shape[0]
    top = (2.0 - kappa) * np.eye(n) - P
    block = np.block([[top, F.T], [F, P]])
    return float(np.min(np.linalg.eigvalsh(block)))


def _schur_eigmin(F, P, kappa):
    n = P.shape[0]
    S = (2.0 - kappa) * np.eye(n) - P - F.T @ np.linalg.solve(P, F)
    return float(np.min(np.linalg.eigvalsh(S)))


def check_contraction(model, theta, cert, states):
    """True iff the block matrix is PSD at every witness state (slack -1e-9).

    Returns (ok, margin) with margin the worst block-matrix minimum eigenvalue
    over the witness set.
    """
    cert.validate()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    F_all = _jacobians(model, theta, states)
    P = np.asarray(cert.P, dtype=float)
    margin = min(_block_eigmin(F, P, cert.kappa) for F in F_all)
    return margin >= PSD_SLACK, margin


def schur_margin(model, theta, cert, states):
    """Worst Schur-complement minimum eigenvalue; sign-equivalent cross-check."""
    cert.validate()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    F_all = _jacobians(model, theta, states)
    P = np.asarray(cert.P, dtype=float)
    return min(_schur_eigmin(F, P, cert.kappa) for F in F_all)


def _sym_eigmin_batch(S):
    """Minimum eigenvalue over the last two axes; closed form for n <= 2."""
    n = S.shape[-1]
    if n == 1:
        return S[..., 0, 0]
    if n == 2:
        tr = S[..., 0, 0] + S[..., 1, 1]
        det_gap = np.sqrt((S[..., 0, 0] - S[..., 1, 1]) ** 2 + 4.0 * S[..., 0, 1] ** 2)
        return 0.5 * (tr - det_gap)
    return np.linalg.eigvalsh(S)[..., 0]


def default_kappa_grid():
    # reaches well below 1e-2: Euler-discretized slow dynamics dissipate
    # only O(rate * dt) per step
    return np.geomspace(1e-5, 1.0, 26)


def default_p_grid():
    return np.geomspace(0.05, 1.95, 13)


class FeasibilitySearch:
    """Grid search for a diagonal-P certificate over a fixed witness set.

    Precomputes the grids once so repeated feasibility queries (one per
    optimizer step) stay cheap.
    """

    def __init__(self, model, states, kappa_grid=None, p_grid=None):
        self.model = model
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.states.shape[0] == 0:
            raise ParameterError("witness set must be nonempty")
        self.kappa_grid = np.asarray(
            default_kappa_grid() if kappa_grid is None else kappa_grid, dtype=float
        )
        p_vals = np.asarray(default_p_grid() if p_grid is None else p_grid, dtype=float)
        n = model.n
        if n == 1:
            self.p_combos = p_vals[:, None]
        elif n == 2:
            a, b = np.meshgrid(p_vals, p_vals, indexing="ij")
            self.p_combos = np.stack([a.ravel(), b.ravel()], axis=1)
        else:
            self.p_combos = np.tile(p_vals[:, None], (1, n))

    def best(self, theta):
        """(schur margin, P diag, kappa) of the best grid certificate for theta."""
        F = _jacobians(self.model, theta, self.states)          # (W, n, n)
        inv_p = 1.0 / self.p_combos                              # (C, n)
        quad = np.einsum("wki,ck,wkj->cwij", F, inv_p, F)        # (C, W, n, n)
        n = self.model.n
        eye = np.eye(n)
        base = -self.p_combos[:, None, None, :] * eye - quad     # (C, W, n, n)
        # margin over witnesses for every (P, kappa) pair
        kappas = self.kappa_grid[:, None, None, None, None]
        S = (2.0 - kappas) * eye + base[None]
        eigmin = _sym_eigmin_batch(S)                            # (K, C, W)
        margins = eigmin.min(axis=2)                             # (K, C)
        k_idx, c_idx = np.unravel_index(np.argmax(margins), margins.shape)
        return (
            float(margins[k_idx, c_idx]),
            self.p_combos[c_idx].copy(),
            float(self.kappa_grid[k_idx]),
        )

    def feasible(self, theta):
        return self.best(theta)[0] >= PSD_SLACK


def fit_certificate(model, theta, states, kappa_grid=None, p_grid=None):
    """Best diagonal-P certificate on the witness set, or None when infeasible.

    The search selects the grid pair maximizing the Schur margin; the returned
    certificate's margin field is recomputed in block form.
    """
    search = FeasibilitySearch(model, states, kappa_grid=kappa_grid, p_grid=p_grid)
    schur_best, p_diag, kappa = search.best(theta)
    if schur_best < PSD_SLACK:
        return None
    cert = StabilityCertificate(
        P=np.diag(p_diag), kappa=kappa, witness_states=search.states
    )
    _, margin = check_contraction(model, theta, cert, search.states)
    cert.margin = margin
    return cert
