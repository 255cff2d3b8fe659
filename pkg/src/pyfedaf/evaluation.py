"""
Metrics and experiment protocols.

The main entry points are

* :func:`prepare_scenario`: load data, partition it, implant the backdoor into the
  target client's target data and train the federation;
* :func:`run_arm`: run one unlearning method (``fedaf``, ``fedaf-c`` or
  ``retrain``) on a prepared scenario and measure it;
* :func:`overlap_validation`: check whether a fake-label kind admits a model that
  fits the remaining data and the memories at the same time;
* :func:`sweep`: repeat the FedAF arm over a grid of one hyper-parameter.

All random streams derive from the config's root seed, so any record can be
reproduced on its own.
"""

from __future__ import annotations

import attr
import functools
import logging
import numpy as np
import time
from typing import Any, Callable, Sequence

from ._utils import EmptyBatchError, ParameterError, Stream, derive_rng, derive_seed
from .data import (
    BackdoorSpec,
    ClientPartition,
    Dataset,
    inject_backdoor,
    load_mnist,
    make_blobs,
    partition_iid,
    poisoned_indices,
    select_class,
)
from .federation import local_train, run_federated
from .inputs import ARMS, DataConfig, EwcConfig, ExperimentConfig, FakeLabelKind
from .nn import Batch, ModelSpec, ParamVector, accuracy, predict, xavier_init
from .outputs import GlobalState, MetricsRecord
from .unlearning import (
    TeacherEnsemble,
    build_memories,
    resolve_request,
    run_conventional,
    run_retrain,
    run_unlearn,
)

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = {"ewc_epochs": "ewc_epochs", "lambda": "lam", "num_teachers": "num_teachers"}


def timed(run: Callable[[], Any]) -> tuple[Any, float]:
    """Call ``run`` and return its result with the elapsed wall time in seconds."""
    start = time.perf_counter()
    result = run()
    return result, time.perf_counter() - start


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def backdoor_accuracy(params: ParamVector, spec: ModelSpec, poisoned_target: Dataset | Batch) -> float:
    """Accuracy on triggered target data against the flipped labels."""
    if len(poisoned_target) == 0:
        raise EmptyBatchError("No poisoned samples to measure backdoor accuracy on.")
    return accuracy(params, spec, Batch(poisoned_target.features, poisoned_target.labels))


def per_class_accuracy(params: ParamVector, spec: ModelSpec, dataset: Dataset) -> np.ndarray:
    """Accuracy restricted to each class; 0 for classes with no samples."""
    targets = dataset.targets
    correct = predict(params, spec, dataset.features) == targets
    counts = np.bincount(targets, minlength=dataset.class_count)
    hits = np.bincount(targets, weights=correct, minlength=dataset.class_count)
    return np.divide(hits, counts, out=np.zeros(dataset.class_count), where=counts > 0)


def split_accuracy(
    params: ParamVector, spec: ModelSpec, dataset: Dataset, target_class: int
) -> tuple[float, float]:
    """Accuracy on the target class and on all other classes."""
    is_target = dataset.targets == target_class
    correct = predict(params, spec, dataset.features) == dataset.targets
    target_acc = float(correct[is_target].mean()) if is_target.any() else float("nan")
    other_acc = float(correct[~is_target].mean()) if (~is_target).any() else float("nan")
    return target_acc, other_acc


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=4)
def load_datasets(data: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """
    The train and test sets described by a data config.

    Blobs are drawn from ``seed``; train and test share their class centers.
    """
    if data.source == "mnist":
        return (
            load_mnist(data.mnist_dir, "train", data.train_limit),
            load_mnist(data.mnist_dir, "test", data.test_limit),
        )

    train = make_blobs(data.classes, data.per_class, data.dim, data.spread, seed=derive_seed(seed, Stream.BLOBS, 0))
    test = make_blobs(data.classes, data.test_per_class, data.dim, data.spread, seed=derive_seed(seed, Stream.BLOBS, 1))
    return train, test


@attr.define(kw_only=True, eq=False)
class Scenario:
    """
    A trained federation with a backdoored unlearning target, ready for any arm.

    ``train`` is the data as the clients hold it (poisoned); ``clean_train`` has the
    original labels and features.
    """

    config: ExperimentConfig
    trial: int
    seed: int
    spec: ModelSpec
    clean_train: Dataset
    train: Dataset
    test: Dataset
    partition: ClientPartition
    request: Any
    backdoor: BackdoorSpec | None
    poisoned: np.ndarray
    state: GlobalState
    train_time: float

    @property
    def target_class(self) -> int:
        """The class being forgotten."""
        return self.request.target_class

    @property
    def target_data(self) -> Dataset:
        """The target data R, as held by the target client."""
        return self.train.subset(self.request.target_indices)

    @property
    def audit_data(self) -> Dataset:
        """The data backdoor accuracy is measured on."""
        if self.backdoor is None or self.poisoned.size == 0:
            return self.target_data
        return self.train.subset(self.poisoned)


def prepare_scenario(
    config: ExperimentConfig,
    trial: int = 0,
    target_class: int | None = None,
    jobs: int = 1,
) -> Scenario:
    """
    Load, partition, poison and train.

    Parameters
    ----------
    config : :class:`~pyfedaf.inputs.ExperimentConfig`
        The experiment.
    trial : int
        Selects the trial's seed stream (partition, trigger, initialization).
    target_class : int, optional
        Overrides ``config.request.target_class``.
    jobs : int
        Threads used for client training.
    """
    seed = config.trial_seed(trial)
    clean, test = load_datasets(config.data, config.seed)
    spec = config.model_spec
    partition = partition_iid(clean, config.federation.client_count, seed)

    request = config.request
    if target_class is not None:
        request = attr.evolve(request, target_class=target_class)
    request = resolve_request(request, clean, partition)

    backdoor = None
    poisoned = np.array([], dtype=np.int64)
    train = clean
    if config.backdoor.enabled:
        backdoor = BackdoorSpec.from_seed(
            clean.dim,
            clean.class_count,
            seed,
            trigger_size=config.backdoor.trigger_size,
            trigger_value=config.backdoor.trigger_value,
            poison_fraction=config.backdoor.poison_fraction,
        )
        poisoned = poisoned_indices(request.target_indices, backdoor, seed)
        train = inject_backdoor(clean, request.target_indices, backdoor, seed)

    state, seconds = timed(
        lambda: run_federated(config.federation_for_trial(trial), spec, partition, train, jobs=jobs)
    )
    logger.info(f"Trial {trial}: trained federation in {seconds:.2f}s")
    return Scenario(
        config=config,
        trial=trial,
        seed=seed,
        spec=spec,
        clean_train=clean,
        train=train,
        test=test,
        partition=partition,
        request=request,
        backdoor=backdoor,
        poisoned=poisoned,
        state=state,
        train_time=seconds,
    )


def run_arm(
    scenario: Scenario,
    arm: str,
    kind: FakeLabelKind | None = None,
    ewc: EwcConfig | None = None,
    param: str | None = None,
    value: float | None = None,
    jobs: int = 1,
    epochs: int | None = None,
) -> MetricsRecord:
    """
    Run one unlearning method on a scenario and measure before and after.

    Parameters
    ----------
    arm : str
        ``"fedaf"``, ``"fedaf-c"`` or ``"retrain"``.
    kind : :class:`~pyfedaf.inputs.FakeLabelKind`, optional
        Defaults to the config's label kind.
    ewc : :class:`~pyfedaf.inputs.EwcConfig`, optional
        Defaults to the config's (resolved) unlearning settings.
    param, value :
        Recorded on the result when the run is part of a sweep.
    epochs : int, optional
        Overrides the number of unlearning epochs of the ``fedaf`` arm; ``0`` leaves
        the trained federation as it is.
    """
    if arm not in ARMS:
        raise ParameterError(f"Unknown arm '{arm}'. Choose from {list(ARMS)}.")

    config = scenario.config
    kind = kind or config.label_kind
    ewc = (ewc or config.ewc).resolved(config.federation.learning_rate)
    spec, state = scenario.spec, scenario.state
    unlearn_seed = derive_seed(scenario.seed, Stream.UNLEARN)

    bd_before = backdoor_accuracy(state.global_params, spec, scenario.audit_data)
    test_before = accuracy(state.global_params, spec, scenario.test.as_batch())

    if arm == "fedaf":
        new_state, seconds = timed(
            lambda: run_unlearn(
                state,
                scenario.request,
                scenario.train,
                scenario.partition,
                kind,
                ewc,
                unlearn_seed,
                epochs=epochs,
            )
        )
    elif arm == "fedaf-c":
        conventional_lr, conventional_epochs = ewc.conventional_budget
        new_state, seconds = timed(
            lambda: run_conventional(
                state,
                scenario.request,
                scenario.train,
                scenario.partition,
                kind,
                conventional_lr,
                conventional_epochs,
                unlearn_seed,
                memory_config=ewc,
            )
        )
    else:
        new_state, seconds = timed(
            lambda: run_retrain(
                config.federation_for_trial(scenario.trial),
                spec,
                scenario.partition,
                scenario.train,
                scenario.request,
                jobs=jobs,
            )
        )

    params = new_state.global_params
    _, non_target = split_accuracy(params, spec, scenario.test, scenario.target_class)
    record = MetricsRecord(
        arm=arm,
        seed=scenario.seed,
        class_id=scenario.target_class,
        trial=scenario.trial,
        bd_acc_before=bd_before,
        bd_acc_after=backdoor_accuracy(params, spec, scenario.audit_data),
        test_acc_before=test_before,
        test_acc_after=accuracy(params, spec, scenario.test.as_batch()),
        wall_time_seconds=seconds,
        target_acc_after=accuracy(params, spec, scenario.target_data.as_batch()),
        non_target_acc_after=non_target,
        per_class_acc=per_class_accuracy(params, spec, scenario.test),
        param=param,
        value=value,
        config=config.to_dict(),
    )
    logger.info(
        f"{arm} class {record.class_id}: bd {record.bd_acc_before:.3f} -> "
        f"{record.bd_acc_after:.3f}, test {record.test_acc_before:.3f} -> "
        f"{record.test_acc_after:.3f} ({seconds:.2f}s)"
    )
    return record


# ---------------------------------------------------------------------------
# Overlap validation
# ---------------------------------------------------------------------------
def overlap_validation(
    spec: ModelSpec,
    client_data: Dataset,
    test_data: Dataset,
    target_class: int,
    kind: FakeLabelKind,
    config: ExperimentConfig,
    seed: int,
) -> tuple[float, float]:
    """
    Train from scratch on the client's non-target data plus memories of its target data.

    Returns
    -------
    target_acc : float
        Test accuracy on the target class (lower means the fake labels won).
    non_target_acc : float
        Test accuracy on every other class.
    """
    target = select_class(client_data, target_class)
    if target.size == 0:
        raise ParameterError(f"The client holds no samples of class {target_class}.")
    rest = np.setdiff1d(np.arange(len(client_data)), target)

    ewc = config.resolved_ewc
    R = client_data.subset(target).as_batch()
    ensemble = (
        TeacherEnsemble.initialize(spec, ewc.num_teachers, seed) if kind.needs_teachers else None
    )
    M = build_memories(kind, ensemble, R, ewc, seed)

    features, labels = M.features, M.labels
    if rest.size:
        kept = client_data.subset(rest)
        features = np.concatenate([kept.features, features])
        labels = np.concatenate([kept.labels, labels])

    fed = config.federation
    params = local_train(
        xavier_init(spec, derive_seed(seed, Stream.OVERLAP)),
        spec,
        Batch(features, labels),
        config.overlap_epochs,
        fed.learning_rate,
        fed.batch_size,
        derive_rng(seed, Stream.OVERLAP, 1),
    )
    return split_accuracy(params, spec, test_data, target_class)


OVERLAP_COLUMNS = ("kind", "seed", "trial", "class_id", "target_acc", "non_target_acc")


def run_overlap(
    config: ExperimentConfig,
    kinds: Sequence[FakeLabelKind],
    classes: Sequence[int] | None = None,
    trial: int = 0,
) -> list[dict[str, Any]]:
    """Overlap validation of each kind on each class, using the target client's data."""
    seed = config.trial_seed(trial)
    train, test = load_datasets(config.data, config.seed)
    partition = partition_iid(train, config.federation.client_count, seed)
    client_data = train.subset(partition[config.request.client_id])
    classes = range(train.class_count) if classes is None else classes

    rows = []
    for kind in kinds:
        for c in classes:
            target_acc, non_target = overlap_validation(
                config.model_spec, client_data, test, c, kind, config, seed
            )
            logger.info(f"overlap {kind.cli_name} class {c}: target {target_acc:.3f}, rest {non_target:.3f}")
            rows.append(
                {
                    "kind": kind.cli_name,
                    "seed": seed,
                    "trial": trial,
                    "class_id": int(c),
                    "target_acc": target_acc,
                    "non_target_acc": non_target,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------
def _values(value) -> tuple[float, ...]:
    return tuple(float(v) for v in value)


#: Smallest allowed value of each swept parameter.
_SWEEP_MINIMUM = {"ewc_epochs": 0, "lambda": 0, "num_teachers": 1}


@attr.define(frozen=True)
class SweepSpec:
    """
    A hyper-parameter, the values to try, and how many trials per value.

    ``ewc_epochs`` and ``num_teachers`` take whole numbers only. ``ewc_epochs`` may
    be 0, which measures the trained federation without unlearning.
    """

    parameter: str = attr.field(validator=attr.validators.in_(tuple(SWEEP_PARAMETERS)))
    values: tuple[float, ...] = attr.field(converter=_values)
    trials: int = attr.field(default=1, validator=attr.validators.ge(1))

    @values.validator
    def _values_vld(self, attribute, value):
        if not value:
            raise ValueError("A sweep needs at least one value.")

        low = _SWEEP_MINIMUM[self.parameter]
        bad = [v for v in value if not np.isfinite(v) or v < low]
        if bad:
            raise ParameterError(f"'{self.parameter}' values must be >= {low}, got {bad}")
        if self.parameter != "lambda":
            fractional = [v for v in value if not float(v).is_integer()]
            if fractional:
                raise ParameterError(
                    f"'{self.parameter}' takes whole numbers, got {fractional}"
                )

    def ewc_for(self, base: EwcConfig, value: float) -> EwcConfig:
        """``base`` with the swept parameter set to ``value``."""
        field = SWEEP_PARAMETERS[self.parameter]
        if field == "lam":
            return attr.evolve(base, lam=float(value))
        if field == "ewc_epochs" and value == 0:
            return base
        return attr.evolve(base, **{field: int(value)})

    def epochs_for(self, value: float) -> int | None:
        """The unlearning-epoch override for ``value``, if epochs are swept."""
        return int(value) if self.parameter == "ewc_epochs" else None


def sweep(
    base_config: ExperimentConfig,
    spec: SweepSpec,
    scenario: Callable[[int], Scenario] | None = None,
) -> list[MetricsRecord]:
    """
    Run the FedAF arm for every (value, trial) pair.

    Parameters
    ----------
    base_config : :class:`~pyfedaf.inputs.ExperimentConfig`
        The unswept settings.
    spec : :class:`SweepSpec`
        The grid.
    scenario : callable, optional
        Maps a trial index to a prepared :class:`Scenario`. Each trial's scenario
        is prepared once and shared by every value. Defaults to
        :func:`prepare_scenario` on ``base_config``.
    """
    scenario = scenario or functools.partial(prepare_scenario, base_config)
    records = []
    for trial in range(spec.trials):
        sc = scenario(trial)
        for value in spec.values:
            records.append(
                run_arm(
                    sc,
                    "fedaf",
                    ewc=spec.ewc_for(base_config.ewc, value),
                    param=spec.parameter,
                    value=value,
                    epochs=spec.epochs_for(value),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------
def summarize_records(
    rows: Sequence[dict[str, Any]] | Sequence[MetricsRecord],
    by: Sequence[str] = ("arm", "class_id"),
) -> list[dict[str, Any]]:
    """
    Mean and standard deviation of every numeric column per group.

    Returns one dict per group with the grouping keys, ``n``, and ``<col>_mean`` /
    ``<col>_std`` for each numeric column.

    Raises
    ------
    ParameterError
        If any row lacks one of the ``by`` columns.
    """
    rows = [r.to_row() if isinstance(r, MetricsRecord) else dict(r) for r in rows]
    if not rows:
        return []

    missing = sorted({b for row in rows for b in by if b not in row})
    if missing:
        raise ParameterError(
            f"Cannot group by column(s) {missing}: not present in every row. "
            "Summarize files of different kinds separately."
        )

    skip = set(by) | {"seed", "trial"}
    numeric = []
    for row in rows:
        for k, v in row.items():
            if k in skip or k in numeric:
                continue
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                numeric.append(k)

    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[b] for b in by), []).append(row)

    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        summary = dict(zip(by, key))
        summary["n"] = len(members)
        for col in numeric:
            vals = np.array([m[col] for m in members if isinstance(m.get(col), (int, float))], dtype=float)
            summary[f"{col}_mean"] = float(np.mean(vals)) if vals.size else float("nan")
            summary[f"{col}_std"] = float(np.std(vals)) if vals.size else float("nan")
        out.append(summary)
    return out
