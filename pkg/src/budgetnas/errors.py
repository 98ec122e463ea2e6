"""Exception hierarchy shared by every budgetnas module."""


class BudgetNASError(Exception):
    """Base class for all library errors."""


class GraphError(BudgetNASError):
    pass


class CycleDetected(GraphError):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


class DisconnectedLayer(GraphError):
    def __init__(self, layer_id, message=None):
        super().__init__(message or f"layer {layer_id} is not on a source-to-sink path")
        self.layer_id = layer_id


class MultipleSinks(GraphError):
    pass


class NotConnected(BudgetNASError):
    """The selected edges do not link the input layer to the output layer."""


class EmptyTape(BudgetNASError):
    pass


class TooLarge(BudgetNASError):
    """Exhaustive enumeration requested on a graph that is too big for it."""


class TooLargeForBruteForce(TooLarge):
    pass


class InvalidConfig(BudgetNASError):
    pass


class EmptyInput(BudgetNASError):
    pass
