import pytest

import logging
from pathlib import Path

from pyfedaf import config
from pyfedaf.data import make_blobs, partition_iid
from pyfedaf.federation import run_federated
from pyfedaf.inputs import DataConfig, ExperimentConfig, FederationConfig
from pyfedaf.nn import ModelSpec

BLOB_CLASSES = 4
BLOB_DIM = 36


def pytest_addoption(parser):
    parser.addoption("--log-level-fedaf", action="store", default="WARNING")
    parser.addoption(
        "--mnist-dir",
        action="store",
        default=None,
        help="Directory holding the four MNIST IDX files; enables the MNIST tests.",
    )


@pytest.fixture(scope="session")
def tmpdirec(tmp_path_factory):
    """A session-scope "data" folder."""
    return tmp_path_factory.mktemp("data")


@pytest.fixture(autouse=True, scope="session")
def setup_and_teardown_package(tmpdirec, request):
    log_level = request.config.getoption("--log-level-fedaf")
    logging.getLogger("pyfedaf").setLevel(log_level)

    with config.use(direc=tmpdirec, jobs=1):
        yield


@pytest.fixture(scope="session")
def mnist_dir(request):
    direc = request.config.getoption("--mnist-dir")
    if direc is None or not Path(direc).exists():
        pytest.skip("MNIST tests need --mnist-dir pointing at the IDX files.")
    return Path(direc)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(BLOB_CLASSES, 100, BLOB_DIM, 0.05, seed=1)


@pytest.fixture(scope="session")
def blobs_test():
    return make_blobs(BLOB_CLASSES, 50, BLOB_DIM, 0.05, seed=2)


@pytest.fixture(scope="session")
def blob_spec():
    return ModelSpec((BLOB_DIM, 32, BLOB_CLASSES))


@pytest.fixture(scope="session")
def tiny_spec():
    return ModelSpec((5, 4, 3))


@pytest.fixture(scope="session")
def partition(blobs):
    return partition_iid(blobs, 4, seed=3)


@pytest.fixture(scope="session")
def fed_config():
    return FederationConfig(
        client_count=4, local_epochs=2, rounds=5, learning_rate=0.1, batch_size=16, seed=7
    )


@pytest.fixture(scope="session")
def trained_state(fed_config, blob_spec, partition, blobs):
    return run_federated(fed_config, blob_spec, partition, blobs)


@pytest.fixture(scope="session")
def blob_experiment():
    """A small but complete experiment on blobs."""
    return ExperimentConfig(
        data=DataConfig(
            source="blobs",
            classes=BLOB_CLASSES,
            per_class=40,
            test_per_class=20,
            dim=BLOB_DIM,
            spread=0.05,
        ),
        seed=11,
        hidden=(16,),
        federation=FederationConfig(
            client_count=2, local_epochs=1, rounds=3, learning_rate=0.1, batch_size=16
        ),
        trials=2,
        overlap_epochs=3,
    )
