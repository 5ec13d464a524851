"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: configuration errors exit 2,
integrity/version errors exit 3, training divergence exits 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, schema violation, or unsupported option."""


class IntegrityError(RuntimeError):
    """Stored artifact fails its digest or schema-version check."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""
