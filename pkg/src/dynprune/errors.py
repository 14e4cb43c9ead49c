"""Exception hierarchy shared across the package."""


class DynPruneError(Exception):
    pass


class DimensionError(DynPruneError, ValueError):
    pass


class DomainError(DynPruneError, ValueError):
    pass


class ContractError(DynPruneError, RuntimeError):
    pass


class StructuralError(DynPruneError, ValueError):
    pass


class ConfigError(DynPruneError, ValueError):
    pass


class DataError(DynPruneError, ValueError):
    pass


class DivergenceError(DynPruneError, RuntimeError):
    pass


class CheckpointError(DynPruneError, ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass
