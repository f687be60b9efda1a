"""Error type shared across the package.

Every contract violation raises :class:`TimiError` with a short stable
``code`` string, so callers (and the CLI) can branch on the failure kind
without parsing messages.
"""


class TimiError(ValueError):
    """Contract violation with a stable machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
