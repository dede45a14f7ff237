class ConfigurationError(ValueError):
    """Invalid or infeasible parameters."""


class ShapeError(ValueError):
    """An array does not have the dimensions the protocol expects."""


class BudgetExceeded(RuntimeError):
    """An exhaustive search would exceed its configured work budget."""

    def __init__(self, size, budget):
        self.size = size
        self.budget = budget
        super().__init__(f"search space of {size} evaluations exceeds budget {budget}")
