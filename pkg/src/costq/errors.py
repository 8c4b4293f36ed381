"""Exception types shared across the package."""


class CostqError(Exception):
    """Base class for all package errors."""


class InvalidPath(CostqError):
    """Acquisition pair violates the allowed path set (repeat or resume-after-stop)."""


class MissingBlock(CostqError):
    """A feature block required by the requested information state is not observed."""


class DimMismatch(CostqError):
    """Feature dimension does not match what a model or rule was trained on."""


class EmptyData(CostqError):
    """An operation received zero records."""


class DegenerateDesign(CostqError):
    """Unpenalized linear fit on a design with no variation."""


class LabelOutOfRange(CostqError):
    """Classification labels outside {0..K-1}."""


class InsufficientSupport(CostqError):
    """A training cell (action class, state, or ordered path) is empty.

    The message names the empty cell so callers can diagnose small-sample runs.
    """


class TooFewRecords(CostqError):
    """Fewer records than folds."""


class WrongStage(CostqError):
    """Record's first-stage action does not match the stage being computed."""


class NoPositives(CostqError):
    """Recall-threshold selection requires at least one positive label."""


class ConfigError(CostqError):
    """Invalid or unparseable run configuration."""


class DataError(CostqError):
    """Dataset file violates the CSV schema; message carries the row number."""


class SeparationWarning(UserWarning):
    """Near-separated classification fit: some fitted probability is below 1e-6."""
