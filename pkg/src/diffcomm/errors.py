"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent combination of settings."""


class ChannelTooNoisyError(RuntimeError):
    """Channel noise exceeds what the schedule tail can absorb.

    Raised when the combined diffusion-plus-channel noise of a received
    signal maps past the last schedule timestep. Remediation: encode at a
    larger timestep, or transmit at a higher SNR.
    """


class CheckpointMismatchError(RuntimeError):
    """Checkpoint refuses to load: format version or network config differs."""


class IngestionError(RuntimeError):
    """Dataset directory is empty or contains no decodable images."""
