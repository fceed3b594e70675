# This file is used to configure the behavior of pytest when using the Astropy
# test infrastructure. It needs to live inside the package in order for it to
# get picked up when running the tests inside an interpreter using
# colorprompt.test

import os

import pytest

try:
    from pytest_astropy_header.display import PYTEST_HEADER_MODULES, TESTED_VERSIONS
    ASTROPY_HEADER = True
except ImportError:
    ASTROPY_HEADER = False


def pytest_addoption(parser):
    try:
        parser.addoption('--run-slow', action='store_true', default=False,
                         help='run the multi-seed trend tests')
    except ValueError:
        # already registered by the pytest-skip-slow plugin
        pass


def pytest_configure(config):
    config.addinivalue_line('markers',
                            'slow: multi-seed trend test, needs --run-slow')

    if ASTROPY_HEADER:

        config.option.astropy_header = True

        PYTEST_HEADER_MODULES.pop('Pandas', None)
        PYTEST_HEADER_MODULES.pop('h5py', None)
        PYTEST_HEADER_MODULES['scikit-learn'] = 'sklearn'
        PYTEST_HEADER_MODULES['Pillow'] = 'PIL'

        from . import __version__
        packagename = os.path.basename(os.path.dirname(__file__))
        TESTED_VERSIONS[packagename] = __version__


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
