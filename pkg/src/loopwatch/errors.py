class ConfigError(ValueError):
    """Invalid world, model or monitor configuration."""


class EpisodeFormatError(ValueError):
    """An episode directory or table could not be read."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message: str, batch_index: int | None = None, losses: dict | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.losses = losses or {}


class CheckpointError(ValueError):
    """A checkpoint archive is missing, corrupt or incompatible."""
