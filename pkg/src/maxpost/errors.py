"""Error taxonomy shared across the package; the CLI maps these to exit codes."""


class SchemaError(ValueError):
    """Input file or configuration violates the documented schema."""


class FitError(RuntimeError):
    """An optimizer failed to converge or produced an unusable fit."""


class SamplerError(RuntimeError):
    """A stochastic sampler exhausted its budget without converging."""
