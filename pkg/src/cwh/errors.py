"""Exception hierarchy. Each class carries a short category used by the CLI."""


class CWHError(Exception):
    category = "error"


class DataError(CWHError):
    category = "data"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(CWHError):
    category = "config"


class SplitError(CWHError):
    category = "split"


class ModelError(CWHError):
    category = "model"


class TrainingError(CWHError):
    category = "train"


class EvaluationError(CWHError):
    category = "eval"
