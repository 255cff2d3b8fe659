"""
Active forgetting: unlearning by continued training on fake labels.

A client that wants part of its data ``R`` forgotten

1. generates *memories* ``M``: the features of ``R`` paired with fake labels, most
   usefully the (debiased) mean prediction of an ensemble of untrained teachers;
2. computes the diagonal Fisher information of its local loss at its current model;
3. trains on ``L_M - L_R + (lambda/2) sum_i F_i (theta_i - theta*_i)^2`` so that
   the new labels overwrite the old ones while the Fisher penalty keeps what was
   learned from the rest of its data;
4. hands the result back to the server, which re-aggregates it with the unchanged
   models of the other clients.

Also provided are the two reference baselines: retraining from scratch without
``R``, and plain continued training on ``M`` alone.
"""

from __future__ import annotations

import attr
import logging
import numpy as np
from scipy.special import log_softmax

from ._utils import (
    DegenerateLabelError,
    DivergenceError,
    EmptyBatchError,
    ParameterError,
    ShapeError,
    Stream,
    derive_rng,
    derive_seed,
)
from .data import ClientPartition, Dataset, drop_samples, select_class
from .federation import aggregate, iterate_minibatches, run_federated
from .inputs import EwcConfig, FakeLabelKind, FederationConfig, UnlearnRequest
from .nn import (
    Batch,
    ModelSpec,
    ParamVector,
    _backward_deltas,
    _forward_pass,
    _gradient,
    _squared_gradient_sum,
    forward,
    loss_and_grad,
    sgd_step,
    xavier_init,
)
from .outputs import GlobalState

logger = logging.getLogger(__name__)

#: Any loss term larger than this in magnitude aborts unlearning.
DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# Requests
# ---------------------------------------------------------------------------
def resolve_request(
    request: UnlearnRequest, dataset: Dataset, partition: ClientPartition
) -> UnlearnRequest:
    """
    Derive the target index set R of a request.

    ``dataset`` should carry the original (clean) labels.

    Raises
    ------
    ParameterError
        If the client does not exist, or holds none of the requested data.
    """
    k = request.client_id
    if not 0 <= k < partition.client_count:
        raise ParameterError(
            f"client_id={k} but the partition has {partition.client_count} clients."
        )
    held = partition[k]

    if request.scope == "class":
        target = np.intersect1d(held, select_class(dataset, request.target_class))
    elif request.scope == "samples":
        target = np.unique(np.asarray(request.sample_indices, dtype=np.int64))
        outside = np.setdiff1d(target, held)
        if outside.size:
            raise ParameterError(
                f"client {k} does not hold samples {outside[:10].tolist()}"
            )
    else:
        target = np.array(held, dtype=np.int64)

    if target.size == 0:
        raise ParameterError(
            f"client {k} holds no samples of class {request.target_class}; "
            "nothing to unlearn."
        )
    return attr.evolve(request, target_indices=target)


def _target_indices(request: UnlearnRequest) -> np.ndarray:
    if not request.is_resolved:
        raise ParameterError("The unlearn request has not been resolved; call resolve_request.")
    return np.asarray(request.target_indices, dtype=np.int64)


# ---------------------------------------------------------------------------
# Memory generator
# ---------------------------------------------------------------------------
@attr.define(frozen=True)
class TeacherEnsemble:
    """
    A set of untrained models whose averaged prediction serves as a fake label.

    The members are never trained.
    """

    spec: ModelSpec
    members: tuple[ParamVector, ...] = attr.field(converter=tuple)

    @members.validator
    def _members_vld(self, attribute, value):
        if not value:
            raise ValueError("A teacher ensemble needs at least one member.")

    @classmethod
    def initialize(cls, spec: ModelSpec, num_teachers: int, seed: int) -> TeacherEnsemble:
        """Xavier-initialize ``num_teachers`` teachers from independent streams."""
        return cls(
            spec,
            [xavier_init(spec, derive_seed(seed, Stream.TEACHER, i)) for i in range(num_teachers)],
        )

    def __len__(self) -> int:
        return len(self.members)


def teacher_label(ensemble: TeacherEnsemble, features) -> np.ndarray:
    """Mean softmax output of the teachers, one probability row per sample."""
    total = forward(ensemble.members[0], ensemble.spec, features)
    for member in ensemble.members[1:]:
        total = total + forward(member, ensemble.spec, features)
    return total / len(ensemble)


def dynamic_sigma(y_hat, target_class) -> float | np.ndarray:
    """
    Debias strength from the teacher's confidence in the original class.

    ``sigma = clip((1/C) / y_hat[target], 0, 1)``, so targets predicted no more
    confidently than average (including zero) give ``sigma = 1``.

    Parameters
    ----------
    y_hat : array
        A probability row, or a matrix of them.
    target_class : int or array of int
        The original class of each row.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    single = y_hat.ndim == 1
    rows = np.atleast_2d(y_hat)
    C = rows.shape[1]
    target = np.broadcast_to(np.asarray(target_class, dtype=np.int64), (rows.shape[0],))
    t = rows[np.arange(rows.shape[0]), target]

    sigma = np.where(t > 1.0 / C, (1.0 / C) / np.where(t > 0, t, 1.0), 1.0)
    sigma = np.clip(sigma, 0.0, 1.0)
    return float(sigma[0]) if single else sigma


def debias_label(y_hat, y_original, sigma) -> np.ndarray:
    """
    Scale the original-class coordinate of a teacher label by sigma and renormalize.

    Computes ``nu * y_hat / |nu * y_hat|_1`` with ``nu = 1 + (sigma - 1) * y``. Rows
    with ``sigma == 1`` are returned unchanged.

    Raises
    ------
    DegenerateLabelError
        If a row has no mass left (sigma 0 on a teacher output that is the
        original one-hot).
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y_original, dtype=np.float64)
    single = y_hat.ndim == 1
    y_hat2, y2 = np.atleast_2d(y_hat), np.atleast_2d(y)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (y_hat2.shape[0],))
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ParameterError("sigma must lie in [0, 1].")

    nu = 1.0 + (sigma[:, None] - 1.0) * y2
    scaled = nu * y_hat2
    norm = np.abs(scaled).sum(axis=1, keepdims=True)
    if np.any(norm[sigma < 1] == 0):
        raise DegenerateLabelError()

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sigma[:, None] == 1.0, y_hat2, scaled / norm)
    return out[0] if single else out


def random_labels(n: int, class_count: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random points on the probability simplex.

    With two classes each row is ``[r, 1 - r]`` for uniform ``r``; otherwise ``C``
    uniform draws normalized to sum to one.
    """
    if class_count == 2:
        r = rng.uniform(0.0, 1.0, size=n)
        return np.column_stack([r, 1.0 - r])
    draws = rng.uniform(0.0, 1.0, size=(n, class_count))
    return draws / draws.sum(axis=1, keepdims=True)


def build_memories(
    kind: FakeLabelKind,
    ensemble: TeacherEnsemble | None,
    R: Batch,
    config: EwcConfig,
    seed: int,
) -> Batch:
    """
    Pair the features of ``R`` with fake labels.

    Parameters
    ----------
    kind : :class:`~pyfedaf.inputs.FakeLabelKind`
        Which fake label to generate.
    ensemble : :class:`TeacherEnsemble`, optional
        Needed for the teacher kinds.
    R : :class:`~pyfedaf.nn.Batch`
        The data to forget, with the labels it is currently held with.
    config : :class:`~pyfedaf.inputs.EwcConfig`
        Supplies the debias mode.
    seed : int
        Seeds the random labels.
    """
    n, C = len(R), R.class_count
    if kind is FakeLabelKind.UNIFORM:
        labels = np.full((n, C), 1.0 / C)
    elif kind is FakeLabelKind.RANDOM:
        labels = random_labels(n, C, derive_rng(seed, Stream.RANDOM_LABEL))
    else:
        if ensemble is None:
            raise ParameterError(f"Label kind '{kind.cli_name}' needs a teacher ensemble.")
        labels = teacher_label(ensemble, R.features)
        if kind is FakeLabelKind.DEBIAS_TEACHER:
            if config.debias_mode == "dynamic":
                sigma = dynamic_sigma(labels, np.argmax(R.labels, axis=1))
            else:
                sigma = config.sigma_fixed
            logger.debug(
                f"debias sigma: min={np.min(sigma):.3f} mean={np.mean(sigma):.3f} "
                f"max={np.max(sigma):.3f}"
            )
            labels = debias_label(labels, R.labels, sigma)

    return Batch(R.features, labels)


# ---------------------------------------------------------------------------
# Knowledge preserver
# ---------------------------------------------------------------------------
def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@attr.define(frozen=True, eq=False)
class FisherDiagonal:
    """Per-parameter importance weights and the parameters they were computed at."""

    values: np.ndarray = attr.field(converter=_readonly)
    anchor: ParamVector = attr.field()

    def __attrs_post_init__(self):
        if self.values.size != len(self.anchor):
            raise ShapeError(
                f"Fisher diagonal has {self.values.size} entries but the anchor has "
                f"{len(self.anchor)}."
            )
        if np.any(self.values < 0):
            raise ParameterError("Fisher diagonal entries must be non-negative.")


def fisher_diagonal(
    params: ParamVector, spec: ModelSpec, data: Dataset | Batch, batch_size: int = 256
) -> FisherDiagonal:
    """
    Empirical diagonal Fisher information at ``params``.

    ``F_i`` is the mean over samples of the squared per-sample gradient of the
    cross-entropy with respect to parameter ``i``.
    """
    n = len(data)
    if n == 0:
        raise EmptyBatchError("Cannot compute a Fisher diagonal on no data.")

    total = np.zeros(len(params))
    for start in range(0, n, batch_size):
        X = data.features[start : start + batch_size]
        Y = data.labels[start : start + batch_size]
        inputs, logits = _forward_pass(params, spec, X)
        dlogits = np.exp(log_softmax(logits, axis=1)) - Y
        total += _squared_gradient_sum(inputs, _backward_deltas(params, inputs, dlogits))

    fisher = FisherDiagonal(total / n, params)
    logger.debug(
        f"Fisher diagonal: min={fisher.values.min():.3e} mean={fisher.values.mean():.3e} "
        f"max={fisher.values.max():.3e}"
    )
    return fisher


def ewc_penalty(
    theta: ParamVector, fisher: FisherDiagonal, lam: float
) -> tuple[float, ParamVector]:
    """``(lam/2) sum_i F_i (theta_i - anchor_i)^2`` and its gradient."""
    if len(theta) != fisher.values.size:
        raise ShapeError(
            f"ewc_penalty: parameters have {len(theta)} entries, Fisher has "
            f"{fisher.values.size}."
        )
    diff = theta.values - fisher.anchor.values
    value = 0.5 * lam * float(np.sum(fisher.values * diff**2))
    return value, theta.with_values(lam * fisher.values * diff)


def _check_term(term: str, value: float):
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceError(term=term)


def unlearn_loss_grad(
    theta: ParamVector,
    spec: ModelSpec,
    M: Batch,
    R: Batch,
    fisher: FisherDiagonal,
    lam: float,
) -> tuple[float, ParamVector]:
    """
    The unlearning loss ``L_M - L_R + EWC`` and its gradient.

    ``M`` and ``R`` must hold the same feature rows; one forward pass serves both
    cross-entropy terms.

    Raises
    ------
    DivergenceError
        If a term is non-finite or exceeds :data:`DIVERGENCE_LIMIT` in magnitude.
    """
    if M.features.shape != R.features.shape or not np.array_equal(M.features, R.features):
        raise ShapeError("Memories and target data must share their features.")

    inputs, logits = _forward_pass(theta, spec, R.features)
    log_probs = log_softmax(logits, axis=1)
    n = len(R)
    loss_m = float(-np.sum(M.labels * log_probs) / n)
    loss_r = float(-np.sum(R.labels * log_probs) / n)
    penalty, penalty_grad = ewc_penalty(theta, fisher, lam)
    for term, value in (("L_M", loss_m), ("L_R", loss_r), ("ewc", penalty)):
        _check_term(term, value)

    # d(L_M - L_R)/dlogits = (p - y_M)/n - (p - y_R)/n
    deltas = _backward_deltas(theta, inputs, (R.labels - M.labels) / n)
    grad = _gradient(theta, inputs, deltas).values + penalty_grad.values
    return loss_m - loss_r + penalty, theta.with_values(grad)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------
def _memories_for(
    state: GlobalState,
    request: UnlearnRequest,
    dataset: Dataset,
    kind: FakeLabelKind,
    config: EwcConfig,
    seed: int,
) -> tuple[Batch, Batch]:
    R = dataset.subset(_target_indices(request)).as_batch()
    ensemble = (
        TeacherEnsemble.initialize(state.model_spec, config.num_teachers, seed)
        if kind.needs_teachers
        else None
    )
    M = build_memories(kind, ensemble, R, config, seed)
    logger.info(f"Built {len(M)} memories with '{kind.cli_name}' labels.")
    return M, R


def _check_request(state: GlobalState, request: UnlearnRequest, partition: ClientPartition):
    k = request.client_id
    if not 0 <= k < state.client_count:
        raise ParameterError(f"client_id={k} but the state has {state.client_count} clients.")
    target = _target_indices(request)
    if np.setdiff1d(target, partition[k]).size:
        raise ParameterError(f"The target data is not held by client {k}.")


def _reaggregate(state: GlobalState, k: int, theta: ParamVector) -> GlobalState:
    client_params = list(state.client_params)
    client_params[k] = theta
    return attr.evolve(
        state,
        global_params=aggregate(client_params, state.weights),
        client_params=client_params,
    )


def _learning_rate(config: EwcConfig, lr: float | None = None) -> float:
    lr = lr if lr is not None else config.learning_rate
    if lr is None:
        raise ParameterError(
            "No unlearning learning rate; set ewc.learning_rate or use EwcConfig.resolved()."
        )
    return lr


def run_unlearn(
    state: GlobalState,
    request: UnlearnRequest,
    dataset: Dataset,
    partition: ClientPartition,
    kind: FakeLabelKind,
    ewc_config: EwcConfig,
    seed: int,
    epochs: int | None = None,
) -> GlobalState:
    """
    Forget the target data of one client and re-aggregate.

    The target client builds memories for its data R, computes the Fisher
    diagonal of its whole local dataset at its current parameters, and runs
    ``ewc_config.ewc_epochs`` epochs of mini-batch SGD on
    :func:`unlearn_loss_grad`, stepping through M and R in lockstep. The server
    then averages the new model with the unchanged models of every other client.

    Parameters
    ----------
    state : :class:`~pyfedaf.outputs.GlobalState`
        The federation after training.
    request : :class:`~pyfedaf.inputs.UnlearnRequest`
        A resolved request (see :func:`resolve_request`).
    dataset : :class:`~pyfedaf.data.Dataset`
        The training data exactly as the clients hold it.
    partition : :class:`~pyfedaf.data.ClientPartition`
        Which rows each client holds.
    kind : :class:`~pyfedaf.inputs.FakeLabelKind`
        Which fake labels to train towards.
    ewc_config : :class:`~pyfedaf.inputs.EwcConfig`
        Must have its learning rate set.
    seed : int
        Root of the teacher, random-label and shuffling streams.
    epochs : int, optional
        Overrides ``ewc_config.ewc_epochs``; ``0`` returns ``state`` unchanged.
    """
    _check_request(state, request, partition)
    epochs = ewc_config.ewc_epochs if epochs is None else epochs
    if epochs == 0:
        return state
    lr = _learning_rate(ewc_config)

    k = request.client_id
    spec = state.model_spec
    anchor = state.client_params[k]

    M, R = _memories_for(state, request, dataset, kind, ewc_config, seed)
    fisher = fisher_diagonal(anchor, spec, dataset.subset(partition[k]), ewc_config.batch_size)

    theta = anchor
    rng = derive_rng(seed, Stream.UNLEARN)
    for epoch in range(epochs):
        for idx in iterate_minibatches(len(R), ewc_config.batch_size, rng):
            loss, grad = unlearn_loss_grad(
                theta, spec, M.take(idx), R.take(idx), fisher, ewc_config.lam
            )
            theta = sgd_step(theta, grad, lr)
        logger.debug(f"unlearning epoch {epoch + 1}/{epochs}: last batch loss {loss:.4f}")

    logger.info(
        f"Client {k} moved {theta.distance(anchor):.4f} from its anchor; re-aggregating."
    )
    return _reaggregate(state, k, theta)


def run_conventional(
    state: GlobalState,
    request: UnlearnRequest,
    dataset: Dataset,
    partition: ClientPartition,
    kind: FakeLabelKind,
    lr: float,
    epochs: int,
    seed: int,
    memory_config: EwcConfig | None = None,
) -> GlobalState:
    """
    Continue training the target client on its memories only, then re-aggregate.

    Same as :func:`run_unlearn` but minimizing the cross-entropy on M with no
    ascent on R and no Fisher penalty. ``memory_config`` supplies the teacher count,
    debias mode and batch size.
    """
    _check_request(state, request, partition)
    if epochs == 0:
        return state
    memory_config = memory_config or EwcConfig()

    k = request.client_id
    spec = state.model_spec
    M, _ = _memories_for(state, request, dataset, kind, memory_config, seed)

    theta = state.client_params[k]
    rng = derive_rng(seed, Stream.UNLEARN)
    for _ in range(epochs):
        for idx in iterate_minibatches(len(M), memory_config.batch_size, rng):
            _, grad = loss_and_grad(theta, spec, M.take(idx))
            theta = sgd_step(theta, grad, lr)
    return _reaggregate(state, k, theta)


def run_retrain(
    config: FederationConfig,
    spec: ModelSpec,
    partition: ClientPartition,
    dataset: Dataset,
    request: UnlearnRequest,
    jobs: int = 1,
) -> GlobalState:
    """
    Retrain the federation from scratch on everything except the target data.

    The fresh initialization uses a stream separate from the original run's.
    Clients left with no data are dropped.
    """
    reduced, reduced_partition = drop_samples(dataset, partition, _target_indices(request))
    retrain_config = attr.evolve(
        config,
        seed=derive_seed(config.seed, Stream.RETRAIN),
        client_count=reduced_partition.client_count,
    )
    logger.info(f"Retraining on {len(reduced)} of {len(dataset)} samples.")
    return run_federated(retrain_config, spec, reduced_partition, reduced, jobs=jobs)
