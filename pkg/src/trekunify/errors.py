"""Exception hierarchy.

``UsageError`` subclasses map to CLI exit code 1, every other
``TrekUnifyError`` to exit code 2.
"""


class TrekUnifyError(Exception):
    pass


class UnknownVariable(TrekUnifyError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unknown variable {self.name!r}"


class CycleError(TrekUnifyError, ValueError):
    def __init__(self, nodes):
        super().__init__(f"graph has a directed cycle through {nodes}")
        self.nodes = nodes


class StandardizationInfeasible(TrekUnifyError, ValueError):
    def __init__(self, node, residual):
        super().__init__(
            f"disturbance variance of {node!r} would be {residual:.3g}; "
            "coefficients are too large or the relation is deterministic"
        )
        self.node = node
        self.residual = residual


class NodeSetMismatch(TrekUnifyError, ValueError):
    pass


class GraphParseError(TrekUnifyError, ValueError):
    def __init__(self, source, line, message):
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


ParseError = GraphParseError


class DegenerateColumn(TrekUnifyError, ValueError):
    pass


class SingularConditioning(TrekUnifyError, ValueError):
    pass


class InsufficientSample(TrekUnifyError, ValueError):
    pass


class ArityMismatch(TrekUnifyError, ValueError):
    pass


class DuplicateId(TrekUnifyError, ValueError):
    pass


class VariableMismatch(TrekUnifyError, ValueError):
    pass


class ContradictoryStatements(TrekUnifyError, ValueError):
    pass


class InconsistentOverlap(TrekUnifyError, ValueError):
    pass


class TooManyVariables(TrekUnifyError, ValueError):
    pass


class UnknownPair(TrekUnifyError, KeyError):
    def __init__(self, x, y):
        super().__init__((x, y))
        self.pair = (x, y)

    def __str__(self):
        return f"correlation of ({self.pair[0]}, {self.pair[1]}) is unknown"


class ZeroCorrelation(TrekUnifyError, ValueError):
    pass


class UndirectedEdge(TrekUnifyError, ValueError):
    pass


class UsageError(TrekUnifyError):
    pass
