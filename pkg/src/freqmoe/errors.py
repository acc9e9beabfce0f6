"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


class DataError(RuntimeError):
    """Dataset or embedding records are missing or inconsistent."""


class StoreError(DataError):
    """Base class for embedding-store load failures."""


class StoreVersionError(StoreError):
    """Store was written with an unsupported format version."""


class StoreTruncatedError(StoreError):
    """Store payload is shorter than the manifest promises."""


class StoreDuplicateIdError(StoreError):
    """Two store records share an id."""
