"""Exception taxonomy shared across the pipeline.

The CLI maps these onto process exit codes: ConfigError -> 2, DataError -> 3,
BackendError -> 4, PartialFailureError -> 5.
"""


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""


class DataError(Exception):
    """Unreadable or inconsistent input data."""


class BundleFormatError(DataError):
    """meta.json missing, unparseable, or schema-invalid."""


class BundleIntegrityError(DataError):
    """Stored rasters disagree with the declared pyramid geometry."""


class BoundsError(DataError):
    """Region read outside the stored raster."""


class EmptyTissueError(DataError):
    """No foreground component found on the thumbnail."""


class CsvParseError(DataError):
    """Candidate or cohort CSV malformed; message carries the line number."""


class NoQuantifiedPatchesError(DataError):
    """A score was requested for a patient with zero quantified patches."""


class BackendError(Exception):
    """Inference backend failure."""


class BackendUnavailableError(BackendError):
    """Backend process/endpoint cannot be reached or timed out."""


class ProtocolError(BackendError):
    """Backend spoke, but the message violated the wire contract."""


class PartialFailureError(Exception):
    """Some patches failed; carries the per-patch failure list."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])


class UndefinedMetricError(ValueError):
    """Metric has no defined value on this input (no comparable pairs, ...)."""


class ConvergenceError(RuntimeError):
    """Iterative fit diverged or failed to converge."""
