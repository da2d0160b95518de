"""Exporter error hierarchy."""


class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class ArchError(ExportError):
    """Unknown architecture name or an invalid build script."""


class UnsupportedLayerError(ExportError):
    """The model contains layers outside the closed interchange layer set.

    ``unsupported`` lists one human-readable entry per offending module,
    each naming the layer kind and its location in the model tree.
    """

    def __init__(self, unsupported):
        self.unsupported = list(unsupported)
        super().__init__(
            "unsupported layer kind"
            + ("s" if len(self.unsupported) != 1 else "")
            + ": "
            + "; ".join(self.unsupported)
        )


class ParityError(ExportError):
    """Converted model disagrees with the source beyond the tolerance."""
