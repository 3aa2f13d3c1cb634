"""Exception types raised across the package."""


class StgcnError(Exception):
    """Base class for all package errors."""


class IsolatedNode(StgcnError):
    """A bus has zero degree (no incident edges)."""

    def __init__(self, node):
        self.node = node
        super().__init__(f"bus {node} is isolated (degree 0)")


class AsymmetricTopology(StgcnError):
    """Topology matrix is not symmetric."""


class DuplicateEdge(StgcnError):
    """Same edge listed twice in a topology file."""


class ShapeMismatch(StgcnError):
    """Operands have incompatible shapes."""


class NonFiniteValue(StgcnError):
    """A NaN or Inf appeared; carries the name of the offending op or parameter."""

    def __init__(self, where):
        self.where = where
        super().__init__(f"non-finite value produced by {where}")


class TopologyMismatch(StgcnError):
    """Filter bank dimension does not match the data's bus count."""


class DimensionMismatch(StgcnError):
    """Checkpoint/model dimensions do not match the dataset."""


class SingleClassDataset(StgcnError):
    """Training dataset contains only one class."""


class Infeasible(StgcnError):
    """Requested perturbation has no valid change set."""
