"""Exception types shared across the toolkit.

Two failure families matter to callers (and to the CLI exit codes):
validation problems in the inputs or arguments, and I/O problems with
files on disk.
"""


class TorsosegError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(TorsosegError):
    """Invalid argument, inconsistent volume, or unsatisfiable precondition."""


class GridMismatchError(ValidationError):
    """Operands live on different voxel grids (shape/affine disagree)."""


class IOFailure(TorsosegError):
    """File missing, unreadable, or not a supported NIfTI-1 container."""
