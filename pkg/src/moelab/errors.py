"""Exception taxonomy shared across the package.

Each class maps to one failure family so the CLI can translate them into
stable exit codes without inspecting messages.
"""


class MoelabError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(MoelabError, ValueError):
    """A configuration value is missing, malformed, or out of range."""


class InputError(MoelabError, ValueError):
    """Runtime input violates a documented precondition (shape, vocab, range)."""


class MissingArtifactError(MoelabError, FileNotFoundError):
    """A required input file (checkpoint, config, corpus) does not exist."""


class NumericalError(MoelabError, ArithmeticError):
    """Numerical failure: non-finite loss, degenerate softmax, divergence."""


class StateError(MoelabError, RuntimeError):
    """Operation applied to an object in the wrong state."""
