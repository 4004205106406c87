"""Exception hierarchy shared across the engine."""


class TaxEngineError(Exception):
    """Base class for all engine errors."""


# -- taxonomy -----------------------------------------------------------

class EmptyPath(TaxEngineError):
    pass


class EmptySegment(TaxEngineError):
    pass


class UnknownNode(TaxEngineError):
    pass


class DuplicateChild(TaxEngineError):
    pass


class DepthExceeded(TaxEngineError):
    pass


class MultipleRoots(TaxEngineError):
    """Raised where an operation requires a single level-1 category."""


# -- datastore ----------------------------------------------------------

class MissingModalityFile(TaxEngineError):
    pass


class RowCountMismatch(TaxEngineError):
    pass


class BadMagic(TaxEngineError):
    """Manifest missing, malformed, or carrying an unsupported version."""


class DegenerateData(TaxEngineError):
    pass


class DimMismatch(TaxEngineError):
    pass


# -- kernels / model ----------------------------------------------------

class ShapeMismatch(TaxEngineError):
    pass


class BatchTooSmall(TaxEngineError):
    pass


class DepthTooShallow(TaxEngineError):
    pass


class LabelOutsideTaxonomy(TaxEngineError):
    pass


# -- fusion -------------------------------------------------------------

class MissingModality(TaxEngineError):
    pass


class UnknownModality(TaxEngineError):
    pass


# -- metrics ------------------------------------------------------------

class InvalidPath(TaxEngineError):
    pass


class IndexOutOfRange(TaxEngineError):
    pass


class LengthMismatch(TaxEngineError):
    pass


# -- recategorize -------------------------------------------------------

class EmptyInput(TaxEngineError):
    pass


class UnknownClusterId(TaxEngineError):
    pass


class DuplicateLabelAmongSiblings(TaxEngineError):
    pass


class LabelsMissing(TaxEngineError):
    pass


# -- cli ----------------------------------------------------------------

class ConfigError(TaxEngineError):
    """Unknown keys, missing sections, or type errors in a run config."""
