"""Randomized push-sum averaging of particle payloads over a directed network.

Every round, each agent halves its (payload, counter) pair, keeps one half and
sends the other to one uniformly random out-neighbor; received halves are
summed on arrival.  Payload/counter ratios converge to the network average,
and the total payload and counter mass are conserved exactly (up to float
summation order).

Payloads carry an arbitrary leading shape, so one execution can average the
per-step particle blocks of a whole horizon at once: every time slice sees the
same protocol events, which is one valid realization of the per-step protocol.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProtocolError
from .rng import stream
from .smoother import ContributionSet

DEFAULT_MAX_ROUNDS = 1000


@dataclass
class ConsensusState:
    """One agent's gossip state.

    ``xc`` holds the flattened particle blocks (leading axes optional, last
    axis length n_dim * block_size * num_agents); ``c_track`` tracks block
    provenance; ``wmass`` carries the contribution weight mass through the
    same averaging.
    """

    agent: int
    xc: np.ndarray
    n_count: float
    c_track: np.ndarray
    wmass: np.ndarray


def _as_blocks(contribution):
    """(T, K, n) particle array and (T,) mass from a ContributionSet or array."""
    if isinstance(contribution, ContributionSet):
        return np.asarray(contribution.scaled, dtype=float), np.asarray(
            contribution.mass, dtype=float
        )
    arr = np.asarray(contribution, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :, None]          # (K,) -> one step, scalar states
    elif arr.ndim == 2:
        arr = arr[None, :, :]             # (K, n) -> one step
    return arr, np.ones(arr.shape[0])


def init_consensus(contribution, v, num_agents, n_dim, block_size=None):
    """Place agent ``v``'s scaled particles in its own block; zero elsewhere.

    The flattened layout is agent-major, then particle-major, then state
    components (C order of a (V, K, n) array).  ``block_size`` optionally
    asserts the expected ceil(M / J_max) contribution size.  The weight-mass
    channel is laid out agent-major too, so restored payloads resolve each
    block's contributed smoothed-weight mass.
    """
    blocks, mass = _as_blocks(contribution)
    T, K, n = blocks.shape
    if n != n_dim:
        raise ParameterError(f"contribution state dim {n} != expected dim {n_dim}")
    if block_size is not None and K != block_size:
        raise ParameterError(f"contribution holds {K} particles, expected {block_size}")
    xc = np.zeros((T, num_agents, K, n))
    xc[:, v - 1] = blocks
    c_track = np.zeros(num_agents * K)
    c_track[(v - 1) * K : v * K] = 1.0
    wmass = np.zeros((T, num_agents))
    wmass[:, v - 1] = mass
    return ConsensusState(
        agent=v,
        xc=xc.reshape(T, num_agents * K * n),
        n_count=1.0,
        c_track=c_track,
        wmass=wmass,
    )


def _destinations(successor_lists, seed, round_idx):
    dests = np.empty(len(successor_lists), dtype=int)
    for v, succ in enumerate(successor_lists):
        if len(succ) == 0:
            raise ProtocolError(f"agent {v + 1} has no out-neighbor to gossip to")
        dests[v] = stream(seed, "gossip", round_idx, v).choice(succ)
    return dests


def _round_arrays(xc, n_count, c_track, wmass, dests):
    """Apply one synchronous push-sum round to stacked per-agent arrays."""
    half_xc = 0.5 * xc
    half_n = 0.5 * n_count
    half_c = 0.5 * c_track
    half_w = 0.5 * wmass
    new_xc = half_xc.copy()
    new_n = half_n.copy()
    new_c = half_c.copy()
    new_w = half_w.copy()
    np.add.at(new_xc, dests, half_xc)
    np.add.at(new_n, dests, half_n)
    np.add.at(new_c, dests, half_c)
    np.add.at(new_w, dests, half_w)
    return new_xc, new_n, new_c, new_w


def gossip_round(states, net, seed, round_idx):
    """One synchronous round over per-agent ConsensusState objects.

    All sends are computed from the pre-round snapshot; destination draws come
    from streams keyed by (seed, agent, round), so any evaluation order agrees.
    """
    if len(states) != net.num_agents:
        raise ParameterError("need exactly one state per agent")
    dests = _destinations(net.successor_lists(), seed, round_idx)
    xc = np.stack([s.xc for s in states])
    n_count = np.array([s.n_count for s in states], dtype=float)
    c_track = np.stack([s.c_track for s in states])
    wmass = np.stack([np.atleast_1d(s.wmass) for s in states])
    new_xc, new_n, new_c, new_w = _round_arrays(xc, n_count, c_track, wmass, dests)
    return [
        ConsensusState(
            agent=s.agent,
            xc=new_xc[i],
            n_count=float(new_n[i]),
            c_track=new_c[i],
            wmass=new_w[i],
        )
        for i, s in enumerate(states)
    ]


def consensus_error(states, initial_contributions):
    """Per-agent relative sup-norm distance of V * Xc / n from the exact total.

    The target is the elementwise sum of all initial payload vectors, an
    oracle quantity available to the simulator only.  A zero target yields
    absolute errors.
    """
    target = None
    for init in initial_contributions:
        vec = init.xc if isinstance(init, ConsensusState) else np.asarray(init, dtype=float)
        target = vec.copy() if target is None else target + vec
    scale = np.max(np.abs(target))
    if scale == 0:
        scale = 1.0
    V = len(states)
    return np.array(
        [np.max(np.abs(V * s.xc / s.n_count - target)) / scale for s in states]
    )


def relative_error_sigma(state, num_agents):
    """Sup-norm distance of the normalized provenance vector from uniform."""
    total = np.sum(state.c_track)
    if total <= 0:
        raise ProtocolError(f"agent {state.agent} has zero provenance mass")
    return float(np.max(np.abs(state.c_track / total - 1.0 / num_agents)))


def round_budget(num_agents, delta, delta_bar=None):
    """Round count after which consensus holds with probability >= 1 - 1/V.

    ``delta_bar`` defaults to delta^2 / (2V) * 2^(-2 tau) with
    tau = (2 + 3 ln 2) * log2(2V); pass a value to override the convention.
    """
    if delta <= 0:
        raise ParameterError("delta must be positive")
    v = num_agents
    if delta_bar is None:
        tau = (2.0 + 3.0 * np.log(2.0)) * np.log2(2.0 * v)
        delta_bar = delta**2 * (1.0 / (2.0 * v)) * 2.0 ** (-2.0 * tau)
    return int(np.ceil(np.log2(v) + np.log2(1.0 / delta_bar)))


@dataclass
class ConsensusReport:
    """Outcome of one consensus execution."""

    rounds_run: int
    sigma: np.ndarray            # per-agent provenance error
    errors: np.ndarray           # per-agent oracle relative errors (nan in budget mode)
    messages_sent: int
    converged: bool
    mass_drift: float = 0.0      # worst relative payload-total drift over rounds
    count_drift: float = 0.0     # worst relative counter-total drift over rounds

    def to_dict(self):
        return {
            "rounds_run": self.rounds_run,
            "messages_sent": self.messages_sent,
            "converged": self.converged,
            "sigma": [float(s) for s in self.sigma],
            "errors": [float(e) for e in self.errors],
            "mass_drift": self.mass_drift,
            "count_drift": self.count_drift,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def run_consensus(
    contributions,
    net,
    delta,
    i_con=DEFAULT_MAX_ROUNDS,
    seed=0,
    termination="oracle",
    delta_bar=None,
    initial_states=None,
):
    """Average all agents' contributions and return the global particle set.

    Args:
        contributions: one ContributionSet (or (T, K, n) array) per agent.
        net: the communication graph (its successor sets route the messages).
        delta: target relative error; rounds stop once every agent is within
            1.5 * delta of the oracle mean ("oracle" mode).
        i_con: hard round cap.
        seed: protocol randomness seed.
        termination: "oracle" uses the simulator-level error; "budget" runs
            the fixed round count from :func:`round_budget` and reports
            convergence from the locally tracked provenance error.
        delta_bar: optional override of the budget constant.
        initial_states: optional pre-built ConsensusState list overriding the
            block initialization (then ``contributions`` may be None).

    Returns:
        (particles, block_mass, report): particles is (T, K*V, n) holding the
        restored global payload of a designated agent; block_mass is its
        (T, V) restored per-agent contribution-mass channel.
    """
    if delta <= 0 or i_con < 1:
        raise ParameterError("need delta > 0 and i_con >= 1")
    V = net.num_agents

    if initial_states is None:
        if len(contributions) != V:
            raise ParameterError(f"need {V} contributions, got {len(contributions)}")
        blocks0, _ = _as_blocks(contributions[0])
        T, K, n = blocks0.shape
        states = [
            init_consensus(contributions[v], v + 1, V, n_dim=n, block_size=K)
            for v in range(V)
        ]
    else:
        if len(initial_states) != V:
            raise ParameterError(f"need {V} states, got {len(initial_states)}")
        states = initial_states
        T = states[0].xc.shape[0] if states[0].xc.ndim > 1 else 1
        K = states[0].c_track.size // V
        n = states[0].xc.size // (T * V * K)

    if V == 1:
        xc0 = np.atleast_2d(states[0].xc)
        report = ConsensusReport(
            rounds_run=0,
            sigma=np.zeros(1),
            errors=np.zeros(1),
            messages_sent=0,
            converged=True,
        )
        return xc0.reshape(T, K, n).copy(), np.atleast_2d(states[0].wmass).copy(), report

    xc = np.stack([np.atleast_2d(s.xc) for s in states])    # (V, T, L)
    n_count = np.array([s.n_count for s in states], dtype=float)
    c_track = np.stack([s.c_track for s in states])
    wmass = np.stack([np.atleast_2d(s.wmass) for s in states])
    target = xc.sum(axis=0)
    target_scale = max(np.max(np.abs(target)), np.finfo(float).tiny)
    xc_total0 = target.copy()

    succ = net.successor_lists()
    tol = 1.5 * delta
    max_rounds = (
        min(round_budget(V, delta, delta_bar), i_con) if termination == "budget" else i_con
    )

    rounds = 0
    converged = False
    mass_drift = 0.0
    count_drift = 0.0
    errors = np.full(V, np.nan)
    while True:
        if termination == "oracle":
            errors = (
                np.max(np.abs(V * xc / n_count[:, None, None] - target[None]), axis=(1, 2))
                / target_scale
            )
            if np.max(errors) <= tol:
                converged = True
                break
        if rounds >= max_rounds:
            break
        dests = _destinations(succ, seed, rounds)
        xc, n_count, c_track, wmass = _round_arrays(xc, n_count, c_track, wmass, dests)
        rounds += 1
        mass_drift = max(
            mass_drift,
            float(np.max(np.abs(xc.sum(axis=0) - xc_total0)) / target_scale),
        )
        count_drift = max(count_drift, abs(float(n_count.sum()) - V) / V)

    sigma = np.array(
        [np.max(np.abs(c_track[v] / c_track[v].sum() - 1.0 / V)) for v in range(V)]
    )
    if termination == "budget":
        converged = bool(np.all(sigma <= delta))

    report = ConsensusReport(
        rounds_run=rounds,
        sigma=sigma,
        errors=errors,
        messages_sent=rounds * V,
        converged=converged,
        mass_drift=mass_drift,
        count_drift=count_drift,
    )
    designated = 0
    particles = (V * xc[designated] / n_count[designated]).reshape(T, V * K, n)
    weight_mass = V * wmass[designated] / n_count[designated]
    return particles, weight_mass, report
