"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input for which a cost or estimator is undefined (e.g. zero vector under cosine)."""


class BudgetExceededError(MemoryError):
    """A dense tensor or enumeration would exceed the configured budget."""

    def __init__(self, required: float, budget: float, what: str = "n^k tuples"):
        self.required = required
        self.budget = budget
        super().__init__(f"{what} = {required:.3g} exceeds budget {budget:.3g}")


class NumericalError(ArithmeticError):
    """A non-finite value, or an exponent beyond the overflow guard."""

    def __init__(self, message: str, value: float | None = None):
        self.value = value
        super().__init__(message if value is None else f"{message} (value={value!r})")


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch and batch position."""

    def __init__(self, message: str, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters changed."""


class DatasetFormatError(ValueError):
    """On-disk dataset does not match its manifest."""


class CorruptDataError(DatasetFormatError):
    """Content hash of a dataset file does not match the manifest."""


class InnerSolverError(RuntimeError):
    """The inner EMOT solve of an EMGW outer round failed; the cause is chained."""

    def __init__(self, message: str, outer_round: int):
        self.outer_round = outer_round
        super().__init__(f"outer round {outer_round}: {message}")
