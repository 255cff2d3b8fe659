"""
Federated averaging over simulated clients.

Every round the server broadcasts the global model, each client runs ``E`` epochs of
mini-batch SGD on its own data, and the server replaces the global model by the
data-size-weighted average of the client models.

Client shuffling draws from a stream keyed on ``(seed, client, round)``, and the
weighted sum is accumulated in client-index order, so running clients on a thread
pool gives bitwise the same result as running them one after another.
"""

from __future__ import annotations

import logging
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, Sequence

from ._utils import ParameterError, ShapeError, Stream, WeightSumError, derive_seed, seed_sequence
from .data import ClientPartition, Dataset
from .inputs import FederationConfig
from .nn import (
    Batch,
    ModelSpec,
    ParamVector,
    accuracy,
    evaluate_loss,
    loss_and_grad,
    sgd_step,
    xavier_init,
)
from .outputs import GlobalState, RoundMetrics

logger = logging.getLogger(__name__)

_WEIGHT_SUM_TOL = 1e-9


def client_weights(partition: ClientPartition) -> np.ndarray:
    """Aggregation weights ``w_k = n_k / sum_j n_j``."""
    sizes = partition.sizes.astype(np.float64)
    if sizes.size == 0:
        raise ParameterError("Cannot weight an empty partition.")
    return sizes / sizes.sum()


def client_seed(seed: int, client_id: int, round_index: int) -> np.random.SeedSequence:
    """The shuffling stream of one client in one round."""
    return seed_sequence(seed, Stream.CLIENT, client_id, round_index)


def init_seed(seed: int) -> int:
    """The seed of the initial global model."""
    return derive_seed(seed, Stream.INIT)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index arrays covering a fresh permutation of ``range(n)``."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(
    params: ParamVector,
    spec: ModelSpec,
    client_data: Dataset | Batch,
    epochs: int,
    lr: float,
    batch_size: int,
    seed,
) -> ParamVector:
    """
    Run ``epochs`` full passes of mini-batch SGD.

    Parameters
    ----------
    params : :class:`~pyfedaf.nn.ParamVector`
        Starting parameters (not modified).
    client_data : Dataset or Batch
        Anything with ``features`` and ``labels`` arrays.
    seed : int or :class:`numpy.random.SeedSequence`
        Seed of the shuffling generator.
    """
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")

    rng = np.random.default_rng(seed)
    features, labels = client_data.features, client_data.labels
    for _ in range(epochs):
        for idx in iterate_minibatches(len(features), batch_size, rng):
            _, grad = loss_and_grad(params, spec, Batch(features[idx], labels[idx]))
            params = sgd_step(params, grad, lr)
    return params


def aggregate(client_params: Sequence[ParamVector], weights) -> ParamVector:
    """
    Weighted average of client parameters.

    Raises
    ------
    WeightSumError
        If the weights are negative or do not sum to one within 1e-9.
    ShapeError
        If the parameter vectors do not share a layout, or there is not one
        weight per vector.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not client_params:
        raise ParameterError("Nothing to aggregate.")
    if weights.size != len(client_params):
        raise ShapeError(f"{len(client_params)} parameter vectors but {weights.size} weights.")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > _WEIGHT_SUM_TOL:
        raise WeightSumError(
            f"Aggregation weights {weights.tolist()} are not a convex combination "
            f"(sum={weights.sum()!r})."
        )

    first = client_params[0]
    total = weights[0] * first.values
    for w, p in zip(weights[1:], client_params[1:]):
        first.check_compatible(p, "aggregate")
        total = total + w * p.values
    return first.with_values(total)


def run_federated(
    config: FederationConfig,
    spec: ModelSpec,
    partition: ClientPartition,
    dataset: Dataset,
    init_params: ParamVector | None = None,
    callback: Callable[[RoundMetrics], None] | None = None,
    jobs: int = 1,
) -> GlobalState:
    """
    Run FedAvg for ``config.rounds`` rounds.

    Parameters
    ----------
    config : :class:`~pyfedaf.inputs.FederationConfig`
        Clients, epochs, rounds, step size, batch size and seed.
    spec : :class:`~pyfedaf.nn.ModelSpec`
        The architecture.
    partition : :class:`~pyfedaf.data.ClientPartition`
        Which rows of ``dataset`` each client holds.
    dataset : :class:`~pyfedaf.data.Dataset`
        The union of the client datasets.
    init_params : :class:`~pyfedaf.nn.ParamVector`, optional
        Initial global model. By default, Xavier-initialized from the seed.
    callback : callable, optional
        Called with a :class:`~pyfedaf.outputs.RoundMetrics` for every client
        after every round (full local-data loss and accuracy).
    jobs : int
        Number of threads used to train clients concurrently.

    Returns
    -------
    :class:`~pyfedaf.outputs.GlobalState`
        The final global model; every client holds a copy of it.
    """
    K = partition.client_count
    if K != config.client_count:
        raise ParameterError(
            f"The partition has {K} clients but the config asks for {config.client_count}."
        )
    if partition.n_samples != len(dataset):
        raise ShapeError(
            f"The partition covers {partition.n_samples} rows but the dataset has "
            f"{len(dataset)}."
        )

    weights = client_weights(partition)
    params = init_params if init_params is not None else xavier_init(spec, init_seed(config.seed))
    clients = [dataset.subset(a) for a in partition.assignments]

    def _train(k: int, round_index: int, start: ParamVector) -> ParamVector:
        return local_train(
            start,
            spec,
            clients[k],
            config.local_epochs,
            config.learning_rate,
            config.batch_size,
            client_seed(config.seed, k, round_index),
        )

    for t in range(config.rounds):
        if jobs > 1 and K > 1:
            with ThreadPoolExecutor(max_workers=min(jobs, K)) as pool:
                local = list(pool.map(lambda k: _train(k, t, params), range(K)))
        else:
            local = [_train(k, t, params) for k in range(K)]

        if callback is not None or logger.isEnabledFor(logging.DEBUG):
            losses = []
            for k, p in enumerate(local):
                batch = clients[k].as_batch()
                m = RoundMetrics(
                    round=t,
                    client=k,
                    loss=evaluate_loss(p, spec, batch),
                    acc=accuracy(p, spec, batch),
                )
                losses.append(m.loss)
                logger.debug(f"round {t} client {k}: loss={m.loss:.4f} acc={m.acc:.4f}")
                if callback is not None:
                    callback(m)
            logger.info(f"Finished round {t + 1}/{config.rounds}, mean client loss {np.mean(losses):.4f}")
        else:
            logger.info(f"Finished round {t + 1}/{config.rounds}")

        params = aggregate(local, weights)

    return GlobalState(
        round=config.rounds,
        global_params=params,
        client_params=[params] * K,
        weights=weights,
        model_spec=spec,
        seed=config.seed,
    )
