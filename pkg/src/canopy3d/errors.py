"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all canopy3d errors."""


class CloudParseError(PipelineError):
    """Raised when a cloud file cannot be parsed; message names the offending line."""

    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class EmptyCloudError(PipelineError):
    """Raised when an operation requires a non-empty point cloud."""


class EmptySeedSetError(PipelineError):
    """Raised when seed selection or filtering leaves no usable seeds."""


class NoCanopyError(PipelineError):
    """Raised when canopy separation finds no plant supervoxels."""


class DegenerateSupportError(PipelineError):
    """Raised when a descriptor support region cannot define a reference frame."""


class TrainingDivergedError(PipelineError):
    """Raised when network training produces a non-finite loss."""


class ModelBundleError(PipelineError):
    """Raised when a model bundle is missing or malformed."""


class ConfigError(PipelineError):
    """Raised for unreadable, unknown, or inconsistent configuration keys."""
