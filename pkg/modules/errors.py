class IrisError(RuntimeError):
    pass


class DegenerateRayError(IrisError):
    def __init__(self, message="degenerate ray"):
        super().__init__(message)


class InvalidRayError(IrisError):
    pass


class EmptySceneError(IrisError):
    def __init__(self, message="empty scene"):
        super().__init__(message)


class SceneFormatError(IrisError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte {offset}"
        super().__init__(message)


class ImageFormatError(IrisError):
    pass


class DatasetError(IrisError):
    def __init__(self, message, missing=None):
        self.missing = list(missing or [])
        if self.missing:
            message = f"{message}: {', '.join(self.missing)}"
        super().__init__(message)


class DeformationError(IrisError):
    pass


class GradientError(IrisError):
    def __init__(self, group):
        self.group = group
        super().__init__(f"non-finite gradient in parameter group '{group}'")


class UsageError(IrisError):
    """Bad command-line arguments."""
