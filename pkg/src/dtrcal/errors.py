"""Exception types raised by the estimation pipeline."""


class DtrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DtrError):
    """Invalid run configuration or command-line arguments."""


class DataFormatError(DtrError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatch(DtrError):
    """Vector or matrix shapes are inconsistent with the declared design."""


class MissingSource(DtrError):
    """The requested covariate source is not available for a record."""


class StageAbsent(DtrError):
    """The record or policy does not have the requested stage."""


class RankDeficient(DtrError):
    """The regression design is rank deficient at the configured tolerance."""


class InsufficientSample(DtrError):
    """Too few patients at a stage to fit its regression."""


class InsufficientStage2Sample(InsufficientSample):
    """Too few second-stage patients to fit the stage-2 regression."""


class InsufficientReplication(DtrError):
    """No patient has two or more replicates; the error covariance is unidentified."""


class DegenerateSample(DtrError):
    """Fewer than two patients; moment estimation is undefined."""


class SingularBlockMatrix(DtrError):
    """The calibration block matrix is numerically singular."""


class ResampleFitFailure(DtrError):
    """More than the tolerated share of bootstrap resamples failed to fit."""


class MissingY2(DtrError):
    """A non-remitting patient lacks the second-stage outcome."""
