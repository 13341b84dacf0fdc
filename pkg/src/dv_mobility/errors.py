"""Exceptions raised by dv-mobility.

Validation problems derive from :code:`ValueError` and numerical problems
from :code:`RuntimeError` so callers that do not know the package can still
catch them sensibly.
"""


class DvMobilityError(Exception):
    """Base class for all package errors."""


class ValidationError(DvMobilityError, ValueError):
    """Input data or parameters do not satisfy a documented contract."""


class SchemaError(ValidationError):
    """A file does not have the expected structure (columns, keys)."""


class RowError(ValidationError):
    """A single input row cannot be parsed."""


class ReferentialError(ValidationError):
    """Records reference keys that do not exist in another table."""


class GeometryError(ValidationError):
    """Polygon geometry is malformed or degenerate."""


class ParameterError(ValidationError):
    """A parameter is outside its allowed range."""


class GenerationError(ValidationError):
    """A synthetic scenario cannot be generated from its configuration."""


class NumericalError(DvMobilityError, RuntimeError):
    """A computation cannot be completed for numerical reasons."""


class DegenerateInputError(NumericalError):
    """Input has zero variance or is otherwise degenerate."""


class RankDeficiencyError(NumericalError):
    """A design matrix does not have full column rank.

    Parameters
    ----------
    message : str
        Error message.
    columns : list of str, optional
        Names of the columns found to be linearly dependent.
    """

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = list(columns or [])


class BandwidthError(NumericalError):
    """A GWR bandwidth leaves too few residual degrees of freedom."""


class SearchError(NumericalError):
    """Every candidate in a hyperparameter search failed."""


class DivergenceError(NumericalError):
    """Training diverged.

    Parameters
    ----------
    message : str
        Error message.
    epoch : int
        Epoch at which a non-finite loss was observed.
    """

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
