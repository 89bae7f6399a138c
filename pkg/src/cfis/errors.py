class ConfigError(ValueError):
    """Raised when operator inputs or specs are inconsistent."""


class DataError(ValueError):
    """Raised on malformed input files; carries a ``path:line`` location."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
