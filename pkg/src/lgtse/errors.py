"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class LgtseError(Exception):
    exit_code = 1


class InvalidInput(LgtseError, ValueError):
    exit_code = 2


class InvalidState(LgtseError, RuntimeError):
    exit_code = 3


class ShapeError(LgtseError, ValueError):
    exit_code = 4


class ConfigError(LgtseError, ValueError):
    exit_code = 5


class IngestError(LgtseError, OSError):
    exit_code = 6

    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot read {self.path}" + (f": {reason}" if reason else ""))


class DataError(LgtseError, ValueError):
    exit_code = 7


class TrainingDiverged(LgtseError, RuntimeError):
    exit_code = 8

    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
