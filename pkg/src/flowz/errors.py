"""Exception types shared across flowz modules."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class ShapeError(ValueError):
    """Operands have incompatible array shapes."""


class DomainError(ValueError):
    """An elementwise operation was applied outside its domain (e.g. log of <= 0)."""


class TrainingDivergenceError(RuntimeError):
    """Training loss stayed non-finite for several consecutive batches."""


class SliceSamplerStuck(RuntimeError):
    """The slice-sampling shrinkage interval collapsed without an acceptable point."""


class ChainInitError(RuntimeError):
    """Could not find chain initial states with finite log-target."""


class SimulationError(RuntimeError):
    """The simulator raised while generating a training draw."""


class DegenerateProposalError(RuntimeError):
    """Every importance-sampling proposal draw fell outside the prior support."""
