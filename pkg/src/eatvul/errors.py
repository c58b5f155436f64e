"""Exception hierarchy shared by every stage of the toolkit."""


class EatVulError(Exception):
    """Base class for all toolkit errors."""


class DatasetParseError(EatVulError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetValidationError(DatasetParseError):
    pass


class LexError(EatVulError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


class TrainingError(EatVulError):
    pass


class CheckpointError(EatVulError):
    pass


class SvmError(EatVulError):
    pass


class FeatureError(EatVulError):
    pass


class GenerationError(EatVulError):
    def __init__(self, message, raw_text=None):
        self.raw_text = raw_text
        super().__init__(message)


class RetryableError(EatVulError):
    """Transient failure (timeout, 5xx); the caller may retry."""


class ProtocolError(EatVulError):
    """The remote side answered with something we cannot interpret."""


class SuffixError(EatVulError):
    pass


class PoolError(EatVulError):
    def __init__(self, message, report=None, line=None):
        self.report = report
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BudgetExhausted(EatVulError):
    pass


class InsertionError(EatVulError):
    pass


class MetricError(EatVulError):
    pass


class ConfigError(EatVulError):
    pass


class MissingArtifactError(EatVulError):
    pass
