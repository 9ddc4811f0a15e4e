#!/usr/bin/env python3
"""
Error Types Module
==================
Exception classes shared by every module of the workbench.

- InvalidArgumentError: a caller passed a value outside an operation's contract
- UnsupportedOperationError: the operation does not exist for this object
- ConfigError: the experiment configuration failed validation
"""


class InvalidArgumentError(ValueError):
    """Raised when an argument violates an operation's preconditions"""


class UnsupportedOperationError(NotImplementedError):
    """Raised when an operation is not defined for the given object"""


class ConfigError(ValueError):
    """
    Raised when the experiment configuration is invalid

    The offending dotted key is kept on the exception so the CLI
    can name it in its diagnostic.
    """

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
