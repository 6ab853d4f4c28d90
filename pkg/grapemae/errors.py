"""
Exception hierarchy for grapemae.

Every error carries the process exit status the CLI reports for it:
1 for domain errors (bad data, bad numbers, bad config), 2 for usage errors.
"""


class GrapeMaeError(Exception):
    exit_code = 1


class ConfigurationError(GrapeMaeError):
    pass


class ShapeError(GrapeMaeError):
    pass


class NumericInputError(GrapeMaeError):
    pass


class LabelError(GrapeMaeError):
    pass


class LossError(GrapeMaeError):
    pass


class OptimizerError(GrapeMaeError):
    def __init__(self, message: str, group: str = ""):
        super().__init__(message)
        self.group = group


class SplitError(GrapeMaeError):
    def __init__(self, message: str, class_name: str = ""):
        super().__init__(message)
        self.class_name = class_name


class DecodeError(GrapeMaeError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


class CheckpointError(GrapeMaeError):
    def __init__(self, message: str, offending: list[str] | None = None):
        super().__init__(message)
        self.offending = list(offending or [])


class UndefinedSimilarityError(GrapeMaeError):
    pass


class InputError(GrapeMaeError):
    pass


class UsageError(GrapeMaeError):
    exit_code = 2
