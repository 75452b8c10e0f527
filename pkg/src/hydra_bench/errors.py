"""Exception hierarchy shared by every hydra_bench module."""


class HydraError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(HydraError):
    pass


class SingularHomography(HydraError):
    pass


class AnchorNotVisible(HydraError):
    pass


class DegenerateRig(HydraError):
    pass


class DegenerateRigWarning(UserWarning):
    pass


class RectOutOfBounds(HydraError):
    pass


class ConfigInvalid(HydraError):
    pass


class SchemaMismatch(HydraError):
    pass


class ShapeMismatch(HydraError):
    pass


class Diverged(HydraError):
    pass


class NonFiniteGradient(HydraError):
    pass


class BadSize(HydraError):
    pass


class EmptyPlacementList(HydraError):
    pass


class DimensionMismatch(HydraError):
    pass


class WrongVictim(HydraError):
    pass


class EmptyResults(HydraError):
    pass
