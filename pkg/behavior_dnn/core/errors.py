class BehaviorDNNError(Exception):
    """Root of every error raised by behavior_dnn."""


class ConfigurationError(BehaviorDNNError, ValueError):
    pass


class InputError(BehaviorDNNError, ValueError):
    pass


class InternalError(BehaviorDNNError, RuntimeError):
    pass
