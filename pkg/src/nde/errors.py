"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    pass


class ChannelMismatchError(ToolkitError, ValueError):
    pass


class DomainError(ToolkitError, ValueError):
    pass


class BoundsError(ToolkitError, ValueError):
    pass


class ShapeMismatchError(ToolkitError, ValueError):
    pass


class ImageIOError(ToolkitError, IOError):
    pass


class ConfigurationError(ToolkitError, ValueError):
    pass


class ManifestError(ToolkitError, ValueError):
    pass


class SplitError(ToolkitError, ValueError):
    pass


class AdapterError(ToolkitError, RuntimeError):
    pass


class LayoutError(ToolkitError, ValueError):
    pass


class CheckpointError(ToolkitError, ValueError):
    pass


class TrainingDivergedError(ToolkitError, RuntimeError):
    pass
