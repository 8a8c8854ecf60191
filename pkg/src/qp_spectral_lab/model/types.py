from enum import Enum


class ShiftMode(str, Enum):
    COMPONENTWISE = "componentwise"
    INNER = "inner"


class SymbolRule(str, Enum):
    CANONICAL = "canonical"
    TABLE = "table"
