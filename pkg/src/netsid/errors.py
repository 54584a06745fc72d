"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class ConstructionError(RuntimeError):
    """Graph generation could not satisfy its invariants within the retry budget."""

    def __init__(self, message, retries):
        super().__init__(message)
        self.retries = retries


class DivergenceError(RuntimeError):
    """A simulated or filtered state became non-finite.

    Carries the time index and agent id where the blow-up was detected.
    """

    def __init__(self, message, t=None, agent=None):
        super().__init__(message)
        self.t = t
        self.agent = agent


class DegeneracyError(RuntimeError):
    """Particle weights collapsed to zero support during filtering or smoothing."""

    def __init__(self, message, t=None, j=None):
        super().__init__(message)
        self.t = t
        self.j = j


class ProtocolError(RuntimeError):
    """A gossip-protocol invariant was violated (e.g. no out-neighbor, zero mass)."""
