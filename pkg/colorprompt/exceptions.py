# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Errors and warnings raised by `colorprompt`.
"""
from astropy.utils.exceptions import AstropyUserWarning

__all__ = ['ColorPromptError', 'InvalidImageError', 'InvalidStatsError',
           'EmptySelectionError', 'NoClustersError', 'ManifestError',
           'PoolFormatError', 'ConfigError', 'TrainingError',
           'DataAccessError', 'ColorPromptWarning', 'UnreadableFileWarning',
           'NoValidPositivesWarning', 'ClusterRelaxationWarning']


class ColorPromptError(Exception):
    """
    Base class for errors raised by `colorprompt`.
    """


class InvalidImageError(ColorPromptError, ValueError):
    """
    Image or lαβ array with the wrong shape or non-finite values.
    """


class InvalidStatsError(ColorPromptError, ValueError):
    """
    Color statistics with non-finite or negative-spread components.
    """


class EmptySelectionError(ColorPromptError, ValueError):
    """
    A region, batch or dataset selects no pixels or no items.
    """


class NoClustersError(ColorPromptError, ValueError):
    """
    Pseudo-label clustering produced no cluster at all.

    Callers should loosen the clustering radius and retry.
    """


class ManifestError(ColorPromptError, ValueError):
    """
    Malformed row in a dataset manifest.
    """


class PoolFormatError(ColorPromptError, ValueError):
    """
    Corrupt, truncated or incompatible prompter pool / checkpoint file.
    """


class ConfigError(ColorPromptError, ValueError):
    """
    Invalid stream, task or synthetic dataset configuration.
    """


class TrainingError(ColorPromptError, RuntimeError):
    """
    A training step produced a non-finite loss or gradient.
    """


class DataAccessError(ColorPromptError, RuntimeError):
    """
    Pixel data of a completed task was read by a later task.
    """


class ColorPromptWarning(AstropyUserWarning):
    """
    Base class for warnings issued by `colorprompt`.
    """


class UnreadableFileWarning(ColorPromptWarning):
    """
    One or more raster files could not be decoded and were skipped.
    """


class NoValidPositivesWarning(ColorPromptWarning):
    """
    Queries without any valid positive were left out of the averages.
    """


class ClusterRelaxationWarning(ColorPromptWarning):
    """
    Clustering found no cluster and the radius was relaxed.
    """
