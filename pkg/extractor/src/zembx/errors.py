class ExtractorError(Exception):
    """Base class for extraction failures."""


class ModelLoadError(ExtractorError):
    def __init__(self, identifier: str, reason: str):
        super().__init__(f"cannot load encoder {identifier!r}: {reason}")
        self.identifier = identifier


class EmptyClassList(ExtractorError):
    pass


class BadCrop(ExtractorError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"crop {index}: {reason}")
        self.index = index


class ManifestError(ExtractorError):
    pass
