#!/usr/bin/env python3
"""
DSRLab Errors

Every failure raised by the library derives from DSRLabError so that the CLI
can map it onto an exit code.
"""


class DSRLabError(Exception):
    """Base class for all library errors"""


class ShapeError(DSRLabError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract"""


class InvalidScene(DSRLabError, ValueError):
    """Scene parameters describe an impossible camera/pipe configuration"""


class InvalidScale(DSRLabError, ValueError):
    """A resampling scale does not produce integral output dimensions"""


class MissingManifest(DSRLabError, FileNotFoundError):
    """Dataset directory has no manifest.json"""


class CorruptDataset(DSRLabError):
    """A dataset file does not match its manifest checksum"""


class CorruptMatch(DSRLabError, IndexError):
    """A match index points outside its reference block"""


class NonFiniteLoss(DSRLabError, ArithmeticError):
    """A loss component evaluated to NaN or infinity"""


class ConfigError(DSRLabError, ValueError):
    """Unknown configuration key, invalid value, or architecture mismatch"""


class CorruptCheckpoint(DSRLabError):
    """Checkpoint files are truncated or fail hash verification"""


class RangeError(DSRLabError, ValueError):
    """Argument outside its permitted range"""


class UnsupportedLayer(DSRLabError, TypeError):
    """model_stats met a parameterized layer it cannot count"""


class FeatureExtractorUnavailable(DSRLabError):
    """Perceptual feature-extractor weights could not be loaded or fetched"""
