"""The pyfedaf package."""

try:
    from importlib.metadata import PackageNotFoundError, version
except ImportError:
    from importlib_metadata import PackageNotFoundError, version

try:
    from ._version import version as __version__
except ModuleNotFoundError:  # pragma: no cover
    try:
        __version__ = version("fedaf-sim")
    except PackageNotFoundError:
        # package is not installed
        __version__ = "unknown"

from . import data, evaluation, federation, inputs, nn, outputs, unlearning
from ._cfg import config
from ._logging import configure_logging
from ._utils import (
    DegenerateLabelError,
    DivergenceError,
    EmptyBatchError,
    ParameterError,
    ShapeError,
    WeightSumError,
)
from .data import (
    BackdoorSpec,
    ClientPartition,
    Dataset,
    inject_backdoor,
    load_idx,
    load_mnist,
    make_blobs,
    partition_iid,
    select_class,
)
from .evaluation import (
    MetricsRecord,
    SweepSpec,
    backdoor_accuracy,
    overlap_validation,
    prepare_scenario,
    run_arm,
    sweep,
    timed,
)
from .federation import aggregate, client_weights, local_train, run_federated
from .inputs import (
    BackdoorConfig,
    DataConfig,
    EwcConfig,
    ExperimentConfig,
    FakeLabelKind,
    FederationConfig,
    UnlearnRequest,
    parse_config,
)
from .nn import Batch, ModelSpec, ParamVector, xavier_init
from .outputs import GlobalState
from .unlearning import (
    FisherDiagonal,
    TeacherEnsemble,
    resolve_request,
    run_conventional,
    run_retrain,
    run_unlearn,
)

configure_logging(config["log_level"])
