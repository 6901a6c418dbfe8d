"""Exception types raised across the pipeline.

Every error carries a short machine-readable ``code`` (the class name) so the
CLI can print one parseable line per failure.
"""


class TexfvError(Exception):
    """Base class for all pipeline errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# dataset
class MissingColumn(TexfvError):
    pass


class BadLabelId(TexfvError, ValueError):
    pass


class DuplicateImageId(TexfvError):
    pass


class UnparsableNumber(TexfvError, ValueError):
    pass


class IoError(TexfvError, OSError):
    pass


class UnsupportedFormat(TexfvError):
    pass


class EmptyClass(TexfvError):
    pass


# dsift
class DegenerateOutput(TexfvError):
    pass


class RasterTooSmall(TexfvError):
    pass


class AllScalesSkipped(TexfvError):
    pass


# encode / embed
class TooFewDescriptors(TexfvError):
    pass


class DegenerateComponent(TexfvError):
    pass


class BadMagic(TexfvError):
    pass


class DimMismatch(TexfvError):
    pass


class DuplicateId(TexfvError):
    pass


# svm
class SingleClass(TexfvError):
    pass


class DimensionMismatch(TexfvError, ValueError):
    pass


class NonPositiveLambda(TexfvError, ValueError):
    pass


# eval
class MissingFeatures(TexfvError):
    pass


class EmptyTestSet(TexfvError):
    pass


class TooFewPoints(TexfvError):
    pass


# color / synth / cli
class EmptyRaster(TexfvError):
    pass


class UnrenderableConfig(TexfvError):
    pass


class UnknownConfigKey(TexfvError):
    pass
