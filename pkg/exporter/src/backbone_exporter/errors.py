class ExporterError(Exception):
    """Base class for everything this package raises on purpose."""


class ValidationError(ExporterError):
    """Bad arguments or an unsupported model construct."""


class InputError(ExporterError):
    """Filesystem or weight-acquisition failure."""
