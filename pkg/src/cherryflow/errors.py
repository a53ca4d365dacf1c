"""Exception types shared across the package."""


class CherryFlowError(Exception):
    """Base class; `exit_code` is what the command line returns for it."""

    exit_code = 3


class ConfigError(CherryFlowError, ValueError):
    exit_code = 2


class BridgeError(ConfigError):
    def __init__(self, msg, x=None):
        super().__init__(msg)
        self.x = x


class PrecisionExhausted(CherryFlowError, ArithmeticError):
    pass


class OrbitHitSingularity(CherryFlowError, ArithmeticError):
    def __init__(self, msg, index=None, point=None):
        super().__init__(msg)
        self.index = index
        self.point = point


class TuneError(CherryFlowError):
    pass


class CombinatoricsError(CherryFlowError):
    def __init__(self, msg, predicted=None, detected=None):
        super().__init__(msg)
        self.predicted = predicted
        self.detected = detected


class DisjointnessError(CherryFlowError):
    pass


class TongueNotFound(CherryFlowError):
    pass


class EndpointCertificationError(CherryFlowError):
    pass


class PassageStalled(CherryFlowError):
    pass


class StageFailed(CherryFlowError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or []
