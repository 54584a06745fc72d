"""Distributed identification of isomorphic nonlinear agent networks.

Pipeline: simulate coupled stochastic agents on a directed graph, estimate
latent states per agent by particle smoothing, fuse the estimates network-wide
with randomized push-sum gossip, and identify the shared parameters by EM
under a contraction-stability constraint.
"""

from .em import EMConfig, GlobalParticleSet, ThetaEstimate, identify, m_step, q_consensus, q_local
from .errors import (
    ConstructionError,
    DegeneracyError,
    DivergenceError,
    ParameterError,
    ProtocolError,
)
from .estimator import ConsensusEMIdentifier
from .gossip import (
    ConsensusReport,
    ConsensusState,
    consensus_error,
    gossip_round,
    init_consensus,
    relative_error_sigma,
    round_budget,
    run_consensus,
)
from .models import (
    AgentModel,
    ContinuousModel,
    InteractionFunction,
    benchmark_coupling,
    benchmark_model,
    build_model,
    coupling_catalog,
    discretize_continuous,
    fitzhugh_nagumo_model,
    gene_regulation_model,
)
from .simulate import (
    TrajectoryData,
    coupling_term,
    load_trajectory,
    observe_agent,
    save_trajectory,
    simulate_network,
    step_agent,
)
from .smoother import (
    ContributionSet,
    ParticleEnsemble,
    backward_smooth,
    pairwise_weights,
    pf_forward,
    resample,
    select_contribution,
)
from .stability import (
    StabilityCertificate,
    check_contraction,
    differential_jacobian,
    fit_certificate,
)
from .topology import (
    DirectedNetwork,
    NeighborSets,
    adjacency_matrix,
    generate_ba_directed,
    load_edge_list,
    neighbor_sets,
    save_edge_list,
)

__version__ = "0.1.0"
