class ConfigurationError(ValueError):
    """Invalid parameter or a request the data cannot satisfy."""


class GraphFormatError(ValueError):
    """Malformed input file."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class NodeIndexError(IndexError):
    """Edge endpoint outside [0, n)."""

    def __init__(self, path, lineno, node, n):
        self.path = str(path)
        self.lineno = lineno
        self.node = node
        self.n = n
        super().__init__(f"{self.path}:{lineno}: node id {node} out of range for n={n}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``dump`` holds the diagnostic state."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
