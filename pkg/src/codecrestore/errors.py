"""Exception types shared across the package.

Every domain error raised by library code derives from CodecRestoreError so
the CLI can map them to a single nonzero exit code.
"""


class CodecRestoreError(Exception):
    """Base class for all domain errors."""


class ShapeError(CodecRestoreError):
    """Tensor or image dimensions violate an operation's contract."""


class MissingBackend(CodecRestoreError):
    """A codec backend (external encoder, format plugin) is unavailable."""


class CodecFailure(CodecRestoreError):
    """An encoder/decoder ran but produced no usable output."""


class EmptyCorpus(CodecRestoreError):
    """The corpus directory contains no decodable image."""


class IoError(CodecRestoreError):
    """Filesystem failure while building or reading benchmark artifacts."""


class NonFiniteInput(CodecRestoreError):
    """An input contains NaN or infinity where finite values are required."""


class ZeroPrompt(CodecRestoreError):
    """A prompt tensor is identically zero where a direction is required."""


class TimestepOutOfRange(CodecRestoreError):
    """Diffusion timestep outside [1, T]."""


class EmptyManifest(CodecRestoreError):
    """A benchmark manifest has no entries."""


class MissingVae(CodecRestoreError):
    """Stage-1 training requires a pretrained autoencoder checkpoint."""


class BadCheckpoint(CodecRestoreError):
    """Checkpoint file is missing, malformed, or from the wrong stage."""


class InvalidGrid(CodecRestoreError):
    """An ablation grid contains an illegal (N, K) combination."""
