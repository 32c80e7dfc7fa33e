class InvalidInput(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


class DegenerateSplit(ValueError):
    """Raised when a ranking metric needs both correct and incorrect samples."""


class DivergedTraining(FloatingPointError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
