class DimensionError(ValueError):
    """Tensor extents do not agree with an operation's contract."""


class ParameterError(ValueError):
    """A scalar hyperparameter is out of its valid range."""


class ContractError(ValueError):
    """A precondition on the input values (not shapes) is violated."""


class DegeneracyError(ValueError):
    """Too few or degenerate correspondences for a geometric fit."""


class EstimationError(DegeneracyError):
    """Homography estimation failed; the pair is treated as unmatched."""


class LoadError(RuntimeError):
    """A weight file is malformed or lacks required tensors."""


class TrainingDiverged(RuntimeError):
    """A training loss or gradient became non-finite."""
