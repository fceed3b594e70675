# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Data-free continual color prompting: lαβ color statistics, color style
transfer, prompter networks and the continual adaptation loop.
"""
import os

from astropy import config as _config

__all__ = ['__version__', 'Conf', 'conf']

try:
    from .version import version as __version__
except ImportError:
    __version__ = ''


class Conf(_config.ConfigNamespace):
    """
    Configuration parameters for `colorprompt`.

    Every hyper-parameter the library falls back on lives here, so that it
    can be changed for a session with ``conf.set_temp`` or persistently
    through the astropy configuration file.
    """
    tau = _config.ConfigItem(
        0.05, 'Temperature of the cluster contrastive loss.')
    alpha = _config.ConfigItem(
        0.2, 'Momentum of the prototype memory update.')
    lam = _config.ConfigItem(
        0.5, 'Weight of the transferred-twin term of the combined objective.')
    prompter_lr = _config.ConfigItem(
        2e-4, 'Learning rate of the prompter regressor.')
    embed_lr = _config.ConfigItem(
        2e-4, 'Learning rate of the embedding network during adaptation.')
    source_lr = _config.ConfigItem(
        3.5e-4, 'Learning rate of the embedding network on the source task.')
    crop_fraction = _config.ConfigItem(
        0.5, 'Fraction of height and width removed from the center when '
             'computing frame statistics.')
    stat_jitter = _config.ConfigItem(
        0.02, 'Floor on the spread of the batch statistics model.')
    sigma_floor = _config.ConfigItem(
        1e-4, 'Floor on the source standard deviation during transfer.')
    dbscan_eps = _config.ConfigItem(
        0.5, 'Cosine-distance radius of the pseudo-label clustering.')
    dbscan_min_samples = _config.ConfigItem(
        4, 'Core-point threshold of the pseudo-label clustering.')
    replay_capacity = _config.ConfigItem(
        512, 'Number of images held by the reservoir replay buffer.')
    adam_beta1 = _config.ConfigItem(
        0.9, 'First-moment decay of the adaptive moment optimizer.')
    adam_beta2 = _config.ConfigItem(
        0.999, 'Second-moment decay of the adaptive moment optimizer.')
    adam_eps = _config.ConfigItem(
        1e-8, 'Denominator offset of the adaptive moment optimizer.')


conf = Conf()

from .exceptions import *  # noqa
from .colorspace import *  # noqa
from .colorstats import *  # noqa
from .transfer import *  # noqa
from .augment import *  # noqa
from .network import *  # noqa
from .prompter import *  # noqa
from .memory import *  # noqa
from .ingest import *  # noqa
from .pipeline import *  # noqa

if not os.environ.get('COLORPROMPT_SKIP_TEST_RUNNER', False):
    # Create the test function for self test
    from astropy.tests.runner import TestRunner
    test = TestRunner.make_test_runner_in(os.path.dirname(__file__))
    test.__test__ = False
    __all__ += ['test']
