class ScheduleError(ValueError):
    pass

class ShapeError(ValueError):
    pass

class ConfigError(ValueError):
    pass

class StaleCacheError(RuntimeError):
    """backward was called without a matching forward pass."""

class NonFiniteLossError(FloatingPointError):
    pass

class TensorFormatError(ValueError):
    pass

class CheckpointError(IOError):
    pass
