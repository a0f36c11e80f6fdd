"""
Exception hierarchy shared by every loan_ate module.

Each error carries the name of the module that raised it so the CLI can
surface failures as `{"error": ..., "module": ..., ...}` payloads.
"""

from typing import Any, Dict, Optional


class LoanAteError(Exception):
    """Base error. Subclasses set `module` to the raising module's name."""

    module: str = "loan_ate"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.__class__.__name__,
            "module": self.module,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return repr(value)


# -------------------------------------------------------------------------
# ingest
# -------------------------------------------------------------------------

class IngestError(LoanAteError):
    module = "ingest"


class ParseFailure(IngestError):
    """A raw loan line could not be turned into a RawLoan."""

    def __init__(self, reason: str, field: Optional[str] = None):
        text = reason if field is None else f"{reason}: {field}"
        super().__init__(text, reason=reason, field=field)
        self.reason = reason
        self.field = field


class EmptyInput(IngestError):
    pass


class DegenerateColumn(IngestError):
    pass


# -------------------------------------------------------------------------
# embed
# -------------------------------------------------------------------------

class EmbedError(LoanAteError):
    module = "embed"


class DimensionMismatch(EmbedError):

    def __init__(self, line_no: int, expected: int, found: int):
        super().__init__(
            f"line {line_no}: expected {expected} values, found {found}",
            line_no=line_no, expected=expected, found=found,
        )
        self.line_no = line_no


class IoFailure(EmbedError):
    pass


# -------------------------------------------------------------------------
# neural
# -------------------------------------------------------------------------

class NeuralError(LoanAteError):
    module = "neural"


class ShapeMismatch(NeuralError):
    pass


class InvalidTarget(NeuralError):
    pass


class NonFiniteLoss(NeuralError):

    def __init__(self, epoch: int, train_loss: float, val_loss: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}",
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
        )
        self.epoch = epoch


# -------------------------------------------------------------------------
# nuisance
# -------------------------------------------------------------------------

class NuisanceError(LoanAteError):
    module = "nuisance"


class NonFiniteInput(NuisanceError):
    pass


class NoConvergence(NuisanceError):
    """Raised by strict fits; `partial` holds the last iterate."""

    def __init__(self, max_iters: int, partial: Any = None):
        super().__init__(f"no convergence after {max_iters} iterations", max_iters=max_iters)
        self.max_iters = max_iters
        self.partial = partial


class SingleClass(NuisanceError):
    pass


class MissingTextFeatures(NuisanceError):
    pass


class EmptySplit(NuisanceError):
    pass


# -------------------------------------------------------------------------
# estimators
# -------------------------------------------------------------------------

class EstimationError(LoanAteError):
    module = "estimators"


class EmptyArm(EstimationError):
    pass


class AllTrimmed(EstimationError):
    pass


class NonFinitePrediction(EstimationError):
    pass


class DegenerateFluctuation(EstimationError):
    pass


class RankDeficient(EstimationError):
    pass


# -------------------------------------------------------------------------
# synthbench / cli
# -------------------------------------------------------------------------

class BenchError(LoanAteError):
    module = "synthbench"


class OverlapViolation(BenchError):
    pass


class CliError(LoanAteError):
    module = "cli"


class ConfigInvalid(CliError):

    def __init__(self, field: str, message: str = ""):
        super().__init__(message or f"invalid config field: {field}", field=field)
        self.field = field
