class ZettError(Exception):
    """Base class for all package errors."""


class DataError(ZettError):
    """Malformed or inconsistent input data (dataset, registry, fold, annotations)."""


class TemplateError(ZettError):
    """Template pattern without exactly one <head> and one <tail>."""


class ParseError(ZettError):
    """Decoded output that cannot be turned into an entity pair."""


class MalformedOutputError(ParseError):
    pass


class NullSpanError(ParseError):
    pass


class LengthError(ZettError):
    """Sequence longer than the model's configured maximum."""


class TrainingDiverged(ZettError):
    pass
