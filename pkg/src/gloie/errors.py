"""Exception types shared across the package.

The CLI maps each family to a stable exit code (config 1, data 2, divergence 3).
"""


class GloieError(Exception):
    pass


class ConfigError(GloieError, ValueError):
    pass


class DataError(GloieError, ValueError):
    pass


class DivergenceError(GloieError, FloatingPointError):
    pass


class ConvergenceError(GloieError, RuntimeError):
    pass
