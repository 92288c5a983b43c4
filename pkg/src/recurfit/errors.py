"""Exception taxonomy shared across the package."""


class RecurfitError(Exception):
    """Base class for all package errors."""


class ShapeError(RecurfitError):
    """Tensor extents incompatible with the requested operation."""


class ContractError(RecurfitError):
    """An argument violates an operation's precondition."""


class InputError(RecurfitError):
    """Bad user-supplied data (token ids out of range, empty corpus, ...)."""


class PlanError(RecurfitError):
    """Invalid surgery plan (overlap, out-of-range layer indices, ...)."""


class FormatError(RecurfitError):
    """Checkpoint or plan file does not match the expected format/schema."""


class ConfigError(RecurfitError):
    """Run-config file or override is invalid."""


class NonFiniteError(RecurfitError):
    """A loss or gradient became NaN/Inf."""


class DivergenceError(RecurfitError):
    """Too many consecutive non-finite steps; the run is aborted."""
