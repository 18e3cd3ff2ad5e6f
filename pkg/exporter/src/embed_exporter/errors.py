"""Exporter error types."""


class ExporterError(Exception):
    """Base class for exporter failures."""


class MissingWeights(ExporterError):
    """The requested encoder's weights are not available locally."""


class EmptyClassFolder(ExporterError):
    """A class subfolder contains no images."""


class UnknownBackbone(ExporterError):
    """The backbone name does not match any registered encoder."""
