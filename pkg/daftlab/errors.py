"""Exception hierarchy shared by the library and the stage runner.

Every class carries the process exit code ``run_pipeline.py`` returns for it.
"""


class DaftError(Exception):
    exit_code = 1


class ConfigError(DaftError):
    """Invalid configuration, usage or violated precondition."""

    exit_code = 1


class ShapeError(ConfigError):
    """Tensor dimensions that do not fit the layer or network."""


class DataError(ConfigError):
    """Dataset that cannot be generated, parsed or batched."""


class NumericalError(DaftError):
    """NaN/Inf, divergence or a broken numerical contract."""

    exit_code = 2


class ArtifactError(DaftError):
    """Checkpoint, report or manifest IO failure."""

    exit_code = 3
