"""Exception hierarchy shared by all sparsebeam modules."""


class SparseBeamError(Exception):
    """Base class for every error raised by this package."""


class InvalidGeometry(SparseBeamError, ValueError):
    pass


class DegeneratePoint(SparseBeamError, ValueError):
    """A point lies behind (or on) the source plane of a view."""


class InvalidCount(SparseBeamError, ValueError):
    pass


class SizeMismatch(SparseBeamError, ValueError):
    pass


class Infeasible(SparseBeamError, ValueError):
    pass


class DegenerateRange(SparseBeamError, ValueError):
    pass


class HeaderMismatch(SparseBeamError, ValueError):
    pass


class ShapeMismatch(SparseBeamError, ValueError):
    pass


class IoFailure(SparseBeamError, OSError):
    pass


class InsufficientViews(SparseBeamError, ValueError):
    pass


class InvalidRelaxation(SparseBeamError, ValueError):
    pass


class EmptySet(SparseBeamError, ValueError):
    pass


class StageMismatch(SparseBeamError, ValueError):
    pass


class IndexOutOfRange(SparseBeamError, IndexError):
    pass


class InvalidConfig(SparseBeamError, ValueError):
    pass
