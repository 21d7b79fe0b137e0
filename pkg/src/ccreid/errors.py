class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared during training or sampling."""


class DataError(ValueError):
    """Inputs are inconsistent with each other (missing variants, bad shapes)."""


class ProtocolError(ValueError):
    """An evaluation query has no eligible true match."""


class ArtifactError(RuntimeError):
    """A pipeline stage is missing a prerequisite artifact."""
