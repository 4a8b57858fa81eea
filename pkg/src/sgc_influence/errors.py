"""Exception hierarchy shared by every module."""


class SgcInfluenceError(Exception):
    """Base class for all errors raised by this package."""


class MissingEdge(SgcInfluenceError, KeyError):
    pass


class OutOfRange(SgcInfluenceError, IndexError):
    pass


class InvalidGraph(SgcInfluenceError, ValueError):
    """Self-loops, bad node ids or mis-shaped feature matrices."""


class NonConvergence(SgcInfluenceError, RuntimeError):
    pass


class SolverStall(SgcInfluenceError, RuntimeError):
    pass


class DegenerateInput(SgcInfluenceError, ValueError):
    pass


class DegenerateDenominator(SgcInfluenceError, ArithmeticError):
    pass


class ParseError(SgcInfluenceError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ValidationError(SgcInfluenceError, ValueError):
    pass
