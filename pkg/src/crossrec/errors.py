"""Exception hierarchy shared across the toolkit.

Everything raised on purpose derives from :class:`CrossrecError`, so callers
(and the CLI) can distinguish "your inputs are wrong" from genuine bugs.
"""


class CrossrecError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CrossrecError):
    """A configuration value is out of range, missing, or inconsistent."""


class ContractError(CrossrecError):
    """A documented precondition was violated by the caller."""


class EmptyGraphError(CrossrecError):
    """An operation that needs at least one edge received an empty graph."""


class NodeNotFoundError(CrossrecError):
    """A node id falls outside the graph it was used with."""


class ShapeError(CrossrecError):
    """Array dimensions do not line up."""


class NumericError(CrossrecError):
    """A non-finite value (or a norm violation) appeared where it must not."""


class NoNegativeAvailableError(CrossrecError):
    """A user interacts with every item, so no negative can be sampled."""


class DataIOError(CrossrecError):
    """A file could not be read or written."""


class FormatError(CrossrecError):
    """File content does not match the expected on-disk format."""
