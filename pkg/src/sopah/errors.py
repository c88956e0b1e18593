"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`SopahError`.  The
category classes map onto CLI exit codes: configuration problems (2), data
problems (3), a missing upstream stage (4) and training divergence (5).
"""


class SopahError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SopahError):
    """Invalid configuration or programming contract violation."""


class DataError(SopahError):
    """Input data cannot be processed as requested."""


# ingest
class EmptyInput(DataError):
    pass


class MissingColumn(DataError):
    def __init__(self, column: str):
        super().__init__(f"missing required column {column!r}")
        self.column = column


class NonMonotonicTime(DataError):
    def __init__(self, cycle_index: int, cell_id: str = ""):
        where = f" (cell {cell_id})" if cell_id else ""
        super().__init__(f"time is not strictly increasing in cycle {cycle_index}{where}")
        self.cycle_index = cycle_index
        self.cell_id = cell_id


class InfeasibleSpec(ConfigError):
    pass


# features
class NoDischarge(DataError):
    pass


class NoCharge(DataError):
    pass


class NoValidTransition(DataError):
    pass


class Underdetermined(DataError):
    pass


class SolverFailure(DataError):
    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} after {iterations} iterations")
        self.iterations = iterations


class EmptyCell(DataError):
    pass


# dataset
class SegmentTooShort(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class TooFewCells(DataError):
    pass


# sttf
class ShapeMismatch(ConfigError):
    pass


class SequenceTooLong(ConfigError):
    pass


class EmptyMask(DataError):
    pass


class HorizonZero(ConfigError):
    pass


class DivergenceDetected(SopahError):
    pass


# evalkit
class LengthMismatch(DataError):
    pass


class ZeroTruth(DataError):
    pass


class NoSegments(DataError):
    pass


class EmptyErrors(DataError):
    pass


class TooFewPoints(DataError):
    pass


class DegenerateX(DataError):
    pass


# cli
class MissingStage(SopahError):
    def __init__(self, stage: str, path=None):
        self.stage = stage
        where = f" (expected {path})" if path is not None else ""
        super().__init__(f"missing output of stage '{stage}'{where}; run `sopah {stage}` first")


def exit_code(err: BaseException) -> int:
    """CLI exit status for an exception."""
    if isinstance(err, MissingStage):
        return 4
    if isinstance(err, DivergenceDetected):
        return 5
    if isinstance(err, DataError):
        return 3
    return 2
