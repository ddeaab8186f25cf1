#!/usr/bin/env python3
"""
Exception hierarchy shared by every module.
"""


class Yolo12Error(Exception):
    """Base class for all toolkit errors."""


class DimensionError(Yolo12Error, ValueError):
    """Tensor shapes or axes do not fit the operation."""


class ConfigurationError(Yolo12Error, ValueError):
    """A spec, config file or static attribute is invalid."""


class ContractError(Yolo12Error):
    """An operation was called outside its pre-conditions."""


class FormatError(Yolo12Error):
    """A file on disk does not follow its documented format."""


class CompatibilityError(Yolo12Error):
    """A checkpoint does not match the architecture it is loaded into."""


class VerificationError(Yolo12Error):
    """A correctness gate (kernel equivalence, gradcheck) failed."""


class DivergenceError(Yolo12Error):
    """Training produced a non-finite loss."""
