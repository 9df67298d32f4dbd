"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """Input values make the operation numerically undefined (NaN, zero norm)."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class ScheduleRangeError(ValueError):
    """Step or layer index outside the schedule's valid range."""


class DegenerateLossError(ValueError):
    """Every position is masked out; the mean loss is undefined."""


class ConfigError(ValueError):
    """Configuration file or value failed schema validation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
