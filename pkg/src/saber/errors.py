"""Exception types shared across the package."""


class SaberError(Exception):
    """Base class for all package errors."""


class ParameterError(SaberError, ValueError):
    pass


class SceneFormatError(SaberError):
    """A scene file could not be loaded or failed validation."""

    def __init__(self, message, scene_id=None):
        self.scene_id = scene_id
        if scene_id is not None:
            message = f"scene {scene_id!r}: {message}"
        super().__init__(message)


class ConfigError(SaberError, ValueError):
    pass


class CheckpointError(SaberError):
    pass


class SingleClassError(SaberError, ValueError):
    """Metrics are undefined when only one class is present."""


class NonFiniteError(SaberError, FloatingPointError):
    pass
