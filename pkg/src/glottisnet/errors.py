"""Error taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: configuration problems (bad shapes, invalid configs) are
`ConfigError`, broken input files are `DataError`, and non-finite numerics
are `NumericError`.
"""


class GlottisNetError(Exception):
    """Base class for all package errors."""


class ConfigError(GlottisNetError):
    """Invalid configuration: shape mismatches, bad hyperparameters, malformed keys."""


class DataError(GlottisNetError):
    """Broken or malformed input data: images, annotations, checkpoints, fixtures."""


class NumericError(GlottisNetError):
    """Non-finite values where finite ones are required (NaN/Inf sentinel, diverged loss)."""


class GraphError(GlottisNetError):
    """Autodiff misuse, e.g. backward() through a detached or non-scalar tensor."""
