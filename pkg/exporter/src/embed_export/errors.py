class ExportError(Exception):
    pass


class EncoderLoadFailure(ExportError):
    """Pretrained weights not available in the local cache."""


class EmptyText(ExportError):
    pass


class CorruptImage(ExportError):
    pass


class BadCsv(ExportError):
    pass
