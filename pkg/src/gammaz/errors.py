"""Exception hierarchy shared by all modules."""


class GammazError(Exception):
    pass


class ExprSyntaxError(GammazError):
    def __init__(self, position: int, expected: str, source: str = ""):
        self.position = position
        self.expected = expected
        self.source = source
        msg = f"syntax error at position {position}: expected {expected}"
        if source:
            msg += f"\n  {source}\n  {' ' * position}^"
        super().__init__(msg)


class UnknownIdentifier(GammazError):
    def __init__(self, name: str, position: int | None = None):
        self.name = name
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"unknown identifier {name!r}{where}")


class ArityError(GammazError):
    def __init__(self, function: str, got: int, expected: int):
        self.function = function
        self.got = got
        self.expected = expected
        super().__init__(f"{function}() takes {expected} argument(s), got {got}")


class DomainError(GammazError):
    """A field could not be evaluated at a point (log of a negative, division by zero, ...)."""

    def __init__(self, message: str, subexpression: str | None = None, point=None):
        self.subexpression = subexpression
        self.point = point
        parts = [message]
        if subexpression is not None:
            parts.append(f"in {subexpression}")
        if point is not None:
            parts.append(f"at {list(map(float, point))}")
        super().__init__(" ".join(parts))


class SchemaError(GammazError):
    pass


class UnknownExample(GammazError):
    pass


class RankError(GammazError):
    pass


class CFLViolation(GammazError):
    pass


class NonFinite(GammazError):
    pass
