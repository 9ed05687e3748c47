"""Exception hierarchy shared across the package."""


class GbmBenchError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(GbmBenchError):
    """A volume file violates the supported format subset.

    The message names the offending header field.
    """


class VolumeCorruptionError(GbmBenchError):
    """A volume file is structurally valid but its payload is truncated."""


class GridCompatibilityError(GbmBenchError):
    """Two volumes live on incompatible voxel grids."""


class EmptyRegionError(GbmBenchError):
    """An operation requiring a nonempty region received an empty one."""


class DegenerateDynamicsError(GbmBenchError):
    """Neither diffusion nor proliferation is active; no time scale exists."""


class NumericalInstabilityError(GbmBenchError):
    """The solver produced a non-finite field."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite cell density after step {step}")


class DegenerateCellMapError(GbmBenchError):
    """A cell map is identically zero where a plan must be placed."""


class PhantomGenerationError(GbmBenchError):
    """Repeated parameter draws failed to produce a usable phantom subject."""


class ManifestError(GbmBenchError):
    """A cohort manifest fails schema or referential validation."""


class CohortError(GbmBenchError):
    """A cohort-level failure: no subject survived evaluation."""
