"""Exception hierarchy shared across the package."""


class CitySegError(Exception):
    pass


class FormatError(CitySegError, ValueError):
    """A binary or text file does not match its declared format."""


class TruncatedError(CitySegError, OSError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SchemaError(CitySegError, ValueError):
    pass


class ParameterError(CitySegError, ValueError):
    pass


class EmptyInputError(CitySegError, ValueError):
    pass


class RangeError(CitySegError, ValueError):
    pass


class ShapeError(CitySegError, ValueError):
    pass


class NumericError(CitySegError, ArithmeticError):
    pass


class HierarchyError(CitySegError, ValueError):
    """Invalid tree structure, unknown node, or illegal hierarchy query."""


class EmbeddingLookupError(CitySegError, KeyError):
    pass


class DataError(CitySegError, ValueError):
    pass


class ConfigError(CitySegError, ValueError):
    pass
