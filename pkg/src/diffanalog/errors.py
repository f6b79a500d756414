"""Exception types shared across the toolkit."""


class DiffAnalogError(Exception):
    """Base class for all toolkit errors."""


class ModelError(DiffAnalogError):
    """A model definition violates a structural invariant."""


class EvalError(DiffAnalogError):
    """Expression evaluation failed (e.g. division by zero)."""


class SolveError(DiffAnalogError):
    """Time-domain integration failed (blow-up, bad configuration)."""


class AdjointInstabilityError(SolveError):
    """The backward state reconstruction of the adjoint pass diverged."""


class OptimError(DiffAnalogError):
    """Training failed (non-finite gradients, bad batch)."""


class ConfigError(DiffAnalogError):
    """A run configuration is invalid; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
