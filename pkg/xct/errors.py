# xct/errors.py


class XctError(Exception):
    exit_code = 1


class ConfigError(XctError, ValueError):
    exit_code = 2


class UsageError(XctError):
    exit_code = 2


class FormatError(XctError):
    """A file does not follow its binary layout; ``field`` names where it broke."""

    exit_code = 3

    def __init__(self, path, field: str, detail: str):
        super().__init__(f"{path}: {detail} ({field})")
        self.path = path
        self.field = field


class DataError(XctError):
    exit_code = 3


class PhantomGenerationError(DataError):
    def __init__(self, seed: int, detail: str):
        super().__init__(f"phantom seed {seed}: {detail}")
        self.seed = seed


class EvaluationError(DataError):
    pass


class NumericalAbort(XctError):
    exit_code = 4

    def __init__(self, *, step: int, term: str, max_grad: float, param: str | None = None):
        where = f", parameter {param!r}" if param else ""
        super().__init__(
            f"non-finite value at step {step} in {term}{where} (max |grad| {max_grad:.3g})"
        )
        self.step = step
        self.term = term
        self.max_grad = max_grad
        self.param = param
