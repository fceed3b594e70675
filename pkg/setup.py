#!/usr/bin/env python
# Licensed under a 3-clause BSD style license - see LICENSE.rst

# NOTE: name, dependencies and entry points of colorprompt live in setup.cfg.

import os
import sys

from setuptools import setup

LEGACY_HELP = """
Note: 'python setup.py {0}' is not supported. Use

    tox -e {1}

or, without tox,

    pip install -e .[{2}]
    {3}
"""

if 'test' in sys.argv:
    print(LEGACY_HELP.format('test', 'test', 'test', 'pytest'))
    sys.exit(1)

if 'build_docs' in sys.argv or 'build_sphinx' in sys.argv:
    print(LEGACY_HELP.format('build_docs', 'build_docs', 'docs',
                             'cd docs && sphinx-build -b html . _build/html'))
    sys.exit(1)

VERSION_TEMPLATE = """
# Fall back to the hard-coded version if setuptools_scm is missing or cannot
# determine the version.
try:
    from setuptools_scm import get_version
    version = get_version(root='..', relative_to=__file__)
except Exception:
    version = '{version}'
""".lstrip()

setup(use_scm_version={'write_to': os.path.join('colorprompt', 'version.py'),
                       'write_to_template': VERSION_TEMPLATE})
