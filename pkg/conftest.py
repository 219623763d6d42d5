import os
import tempfile

import pytest

# The registry must point at memory before `config` is imported by any test module.
os.environ.setdefault('HYPEREHR_DATABASE_URL', 'sqlite://')
os.environ.setdefault('HYPEREHR_OUT', tempfile.mkdtemp(prefix='hyperehr-out-'))

from corpus import SynthConfig, generate_synthetic  # noqa: E402

SMALL = dict(
    num_diag=40, num_proc=20, num_med=24, num_patients=30, num_clusters=4,
    diag_per_visit=5.0, proc_per_visit=2.0, med_per_visit=6.0
)


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='run the slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow') or os.environ.get('HYPEREHR_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason='slow; pass --run-slow or set HYPEREHR_SLOW=1')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='session')
def synth_config():
    """Factory for small synthetic-corpus configs; keyword arguments override the defaults."""
    def build(**changes):
        return SynthConfig(**dict(SMALL, **changes))
    return build


@pytest.fixture(scope='session')
def small_corpus(synth_config):
    return generate_synthetic(synth_config())
