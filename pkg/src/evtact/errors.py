"""Exception types shared across the package.

The CLI maps these onto exit codes (config -> 2, data -> 3, metric -> 4);
plain ValueError is used for rejected numeric inputs inside operations.
"""


class ConfigError(Exception):
    """Invalid configuration value or malformed config file."""


class DataError(Exception):
    """Malformed or inconsistent input data (event files, pose files, maps)."""


class MetricError(Exception):
    """A metric is undefined (empty mask/cloud) or a threshold check failed."""


class AlignmentError(DataError):
    """ICP could not establish enough correspondences to align two clouds."""
