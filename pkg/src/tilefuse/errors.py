"""Exception taxonomy shared across the package.

Every failure mode raised by the library derives from TileFuseError so
callers can catch one base class at API boundaries (the CLI maps them to
exit codes).
"""


class TileFuseError(Exception):
    """Base class for all tilefuse errors."""


class DimensionError(TileFuseError):
    """Operand shapes are inconsistent with the declared problem."""


class BindingError(TileFuseError):
    """An epilogue program names an operand that was not bound."""


class ProgramError(TileFuseError):
    """An epilogue program is structurally invalid (duplicate aux slots,
    width algebra violations, partials after a width change, ...)."""


class PairingError(ProgramError):
    """A pairwise primitive met an odd tile width or pair-splitting offset."""


class ConfigError(TileFuseError):
    """A pipeline or tiling configuration is invalid."""


class LabelError(TileFuseError):
    """A gather label lies outside the logit column range."""


class TapeError(TileFuseError):
    """A backward pass received an incomplete or inconsistent tape."""


class DegenerateError(TileFuseError):
    """An input admits no meaningful result (zero reference norm,
    zero reduction count, all-empty statistic blocks)."""


class MissingGatherError(TileFuseError):
    """A gathered-logit slot still holds its sentinel at finalize time."""


class ProbeError(TileFuseError):
    """A finite-difference probe produced a non-finite evaluation."""


class ContainerError(TileFuseError):
    """A binary tensor container is malformed or unsupported."""
