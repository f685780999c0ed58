"""Exception types.  ``category`` is what the CLI reports on failure."""


class StructPruneError(Exception):
    category = "error"


class DimensionError(StructPruneError, ValueError):
    category = "dimension"

    def __init__(self, msg, layer=None):
        if layer is not None:
            msg = f"layer {layer}: {msg}"
        super().__init__(msg)
        self.layer = layer


class InputError(StructPruneError, ValueError):
    category = "input"


class ConfigurationError(StructPruneError, ValueError):
    category = "configuration"


class StructuralError(StructPruneError, ValueError):
    category = "structural"


class UnsupportedModelError(StructPruneError, ValueError):
    category = "unsupported_model"


class DataError(StructPruneError, OSError):
    category = "io"


class StructureIndexError(InputError, IndexError):
    """Unknown structure id."""
    category = "input"
