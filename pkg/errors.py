"""Exception types raised across the scene-graph pipeline."""


class OrsgError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OrsgError, ValueError):
    """Tensor or grid dimensions do not line up."""


class ConfigurationError(OrsgError, ValueError):
    """A configuration key is unknown, missing or out of range."""


class NoProjectionError(OrsgError, ValueError):
    """No corner of a 3D box lands in front of the camera and inside the image."""


class OutOfImageError(OrsgError, ValueError):
    """A 2D anchor point lies outside the image bounds."""


class GenerationError(OrsgError, RuntimeError):
    """Synthetic placement failed after the bounded number of retries."""


class InputError(OrsgError, ValueError):
    """Model input is empty or malformed (e.g. an empty point cloud)."""


class RecordIOError(OrsgError, OSError):
    """A record directory is missing a file; the message names the modality and path."""

    def __init__(self, modality, path):
        self.modality = modality
        self.path = str(path)
        super().__init__(f'missing {modality}: {self.path}')


class SchemaError(OrsgError, ValueError):
    """An annotation, prediction or checkpoint document violates its schema."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f'{key}: {message}')


class MatchError(OrsgError, ValueError):
    """Set matching is impossible (more ground-truth entities than proposals)."""

    def __init__(self, num_gt, num_proposals):
        self.num_gt = num_gt
        self.num_proposals = num_proposals
        super().__init__(
            f'cannot match {num_gt} ground-truth entities to {num_proposals} proposals'
        )


class NonFiniteLossError(OrsgError, FloatingPointError):
    """Training produced a NaN/inf loss."""

    def __init__(self, batch_id, value):
        self.batch_id = batch_id
        self.value = value
        super().__init__(f'non-finite loss {value} at batch {batch_id}')
