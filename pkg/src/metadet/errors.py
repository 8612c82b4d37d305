"""Exception hierarchy shared by every pipeline stage."""


class MetadetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MetadetError, ValueError):
    pass


class IngestionError(MetadetError):
    """A raw dataset file is missing, truncated or malformed."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class ContractError(MetadetError, ValueError):
    """A caller violated an operation's precondition."""


class TrainingError(MetadetError, RuntimeError):
    def __init__(self, message, *, epoch=None, step=None, provenance=None):
        self.epoch = epoch
        self.step = step
        self.provenance = provenance or {}
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class AttackError(MetadetError, RuntimeError):
    pass


class PoolError(MetadetError):
    pass


class ProtocolError(MetadetError, ValueError):
    pass


class BenchmarkError(MetadetError, RuntimeError):
    pass
