"""Exception hierarchy shared by every ercgraph module."""


class ErcGraphError(Exception):
    """Base class for errors raised by ercgraph."""


class ArgumentError(ErcGraphError, ValueError):
    """An argument is outside its documented domain."""


class DimensionError(ErcGraphError, ValueError):
    """Shapes of two operands, or of data and parameters, disagree."""


class NumericError(ErcGraphError, ArithmeticError):
    """A value is NaN/Inf or outside a numeric range."""


class ClassIndexError(ErcGraphError, IndexError):
    """A gold class index does not address the logits vector."""


class DataError(ErcGraphError, ValueError):
    """Dataset content is unusable."""


class ParseError(DataError):
    """A dataset line is not valid JSON."""


class SchemaError(DataError):
    """A dataset record is missing fields or has fields of the wrong kind."""


class ConfigError(ArgumentError):
    """A configuration file or mapping is invalid."""
