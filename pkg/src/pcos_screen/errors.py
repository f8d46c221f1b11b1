"""Exception hierarchy shared by all pcos_screen modules."""


class PcosScreenError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(PcosScreenError, ValueError):
    """Invalid configuration, parameters or input layout."""


class DatasetLayoutError(ConfigError):
    pass


class EmptyDatasetError(ConfigError):
    pass


class InfeasibleSplitError(ConfigError):
    pass


class InvalidImageError(PcosScreenError, ValueError):
    pass


class ShapeError(PcosScreenError, ValueError):
    pass


class TrainingDivergedError(PcosScreenError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(PcosScreenError, OSError):
    pass


class PretrainedWeightsError(PcosScreenError, RuntimeError):
    pass


class AttributionError(PcosScreenError, RuntimeError):
    pass
