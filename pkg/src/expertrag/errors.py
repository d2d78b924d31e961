"""Exception hierarchy shared by every module."""


class ExpertRAGError(Exception):
    """Base class for all package errors."""


class ShapeError(ExpertRAGError, ValueError):
    pass


class ContractError(ExpertRAGError):
    """A documented precondition was violated by the caller."""


class VocabularyError(ExpertRAGError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class LengthError(ExpertRAGError, ValueError):
    pass


class IngestionError(ExpertRAGError):
    pass


class UpdateError(ExpertRAGError):
    pass


class EmptyCorpusError(ExpertRAGError):
    pass


class DomainError(ExpertRAGError, ValueError):
    pass


class ConfigError(ExpertRAGError, ValueError):
    pass


class LoadError(ExpertRAGError):
    pass


class TrainingDiverged(ExpertRAGError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
