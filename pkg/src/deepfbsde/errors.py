"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter values."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class UsageError(RuntimeError):
    """An API was called out of order or with mismatched inputs."""


class SimulationError(ArithmeticError):
    """Path simulation produced or received non-finite values."""


class NumericalError(ArithmeticError):
    """A numerical sub-problem (e.g. a backward root solve) failed."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
