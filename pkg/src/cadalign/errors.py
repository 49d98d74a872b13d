"""Exception hierarchy shared by all modules."""


class CadAlignError(Exception):
    """Base class for every error raised by this package."""


class ZeroAreaMesh(CadAlignError):
    pass


class EmptyCloud(CadAlignError):
    pass


class DegenerateCloud(CadAlignError):
    pass


class DimensionMismatch(CadAlignError):
    pass


class ManifestInvalid(CadAlignError):
    pass


class MissingAsset(CadAlignError):
    pass


class DepthDecodeError(CadAlignError):
    pass


class MeshParseError(CadAlignError):
    pass


class NoVisibleFrames(CadAlignError):
    pass


class EmptySegmentation(CadAlignError):
    pass


class EmptySelection(CadAlignError):
    pass


class UnknownClass(CadAlignError):
    def __init__(self, label, available):
        self.label = label
        self.available = sorted(available)
        super().__init__(
            f"unknown class {label!r}; available categories: {', '.join(self.available) or '(none)'}"
        )


class UnknownModel(CadAlignError):
    pass


class DegenerateModel(CadAlignError):
    pass


class NoOverlap(CadAlignError):
    pass
