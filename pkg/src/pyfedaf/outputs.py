"""
Output objects of training and unlearning runs, and their on-disk formats.

:class:`GlobalState` is the server's view after a federated run and is written to
HDF5. :class:`MetricsRecord` and :class:`RoundMetrics` are flat result rows written
to CSV, with a JSON mirror that also carries the resolved config.
"""

from __future__ import annotations

import attr
import csv
import h5py
import json
import logging
import math
import numpy as np
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__
from ._utils import ParameterError, ShapeError
from .nn import ModelSpec, ParamVector

logger = logging.getLogger(__name__)

_WEIGHT_SUM_TOL = 1e-12


def _weights(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@attr.define(frozen=True, eq=False)
class GlobalState:
    """
    The federation after training (or unlearning).

    Parameters
    ----------
    round : int
        Number of completed rounds.
    global_params : :class:`~pyfedaf.nn.ParamVector`
        The aggregated model.
    client_params : tuple of :class:`~pyfedaf.nn.ParamVector`
        The model each client currently holds.
    weights : array
        Aggregation weights ``n_k / sum(n)``.
    model_spec : :class:`~pyfedaf.nn.ModelSpec`
        The architecture.
    seed : int
        The seed the run was started from.
    """

    round: int = attr.field(converter=int)
    global_params: ParamVector = attr.field()
    client_params: tuple[ParamVector, ...] = attr.field(converter=tuple)
    weights: np.ndarray = attr.field(converter=_weights)
    model_spec: ModelSpec = attr.field()
    seed: int = attr.field(default=0, converter=int)

    def __attrs_post_init__(self):
        if len(self.client_params) != self.weights.size:
            raise ShapeError(
                f"{len(self.client_params)} client parameter vectors but "
                f"{self.weights.size} weights."
            )
        if abs(self.weights.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise ParameterError(f"Client weights sum to {self.weights.sum()!r}, not 1.")
        for p in (self.global_params, *self.client_params):
            if p.shapes != self.model_spec.layer_shapes:
                raise ShapeError("Stored parameters do not match the model spec.")

    @property
    def client_count(self) -> int:
        """Number of clients, K."""
        return len(self.client_params)

    def save(self, fname, clobber: bool = False) -> Path:
        """
        Write the state to an HDF5 file.

        Parameters
        ----------
        fname : path
            File to write.
        clobber : bool
            Overwrite an existing file.
        """
        fname = Path(fname)
        if not clobber and fname.exists():
            raise FileExistsError(
                f"The file {fname} already exists. If you want to overwrite, set clobber=True."
            )
        fname.parent.mkdir(parents=True, exist_ok=True)

        with h5py.File(fname, "w") as fl:
            fl.attrs["round"] = self.round
            fl.attrs["seed"] = self.seed
            fl.attrs["version"] = __version__
            fl.attrs["layer_dims"] = np.array(self.model_spec.layer_dims)
            fl.attrs["activation"] = self.model_spec.activation
            fl["weights"] = self.weights
            fl["global_params"] = self.global_params.values
            fl["client_params"] = np.stack([p.values for p in self.client_params])

        logger.info(f"Wrote global state (round {self.round}) to {fname}")
        return fname

    @classmethod
    def read(cls, fname) -> GlobalState:
        """Read a state written by :meth:`save`."""
        with h5py.File(fname, "r") as fl:
            spec = ModelSpec(
                tuple(int(d) for d in fl.attrs["layer_dims"]),
                activation=str(fl.attrs["activation"]),
            )
            shapes = spec.layer_shapes
            return cls(
                round=int(fl.attrs["round"]),
                seed=int(fl.attrs["seed"]),
                global_params=ParamVector(fl["global_params"][...], shapes),
                client_params=[ParamVector(v, shapes) for v in fl["client_params"][...]],
                weights=fl["weights"][...],
                model_spec=spec,
            )


@attr.define(frozen=True)
class RoundMetrics:
    """Loss and accuracy of one client's local model after one round."""

    round: int
    client: int
    loss: float
    acc: float


def _check_fraction(instance, attribute, value):
    if not (math.isnan(value) or 0.0 <= value <= 1.0):
        raise ValueError(f"{attribute.name} must be in [0, 1], got {value}")


def _fraction_tuple(value) -> tuple[float, ...]:
    return tuple(float(v) for v in value)


METRICS_COLUMNS = (
    "arm",
    "seed",
    "class_id",
    "bd_acc_before",
    "bd_acc_after",
    "test_acc_before",
    "test_acc_after",
    "wall_time_s",
    "target_acc_after",
    "non_target_acc_after",
    "param",
    "value",
    "trial",
)

#: Columns excluded when comparing runs for reproducibility.
TIMING_COLUMNS = ("wall_time_s",)


@attr.define(frozen=True, kw_only=True)
class MetricsRecord:
    """
    The outcome of one experiment arm on one target class in one trial.

    ``seed`` is the trial seed derived from the root seed; ``trial`` is the index it
    was derived from, so a row can be rerun from its config snapshot.

    Accuracies are fractions in [0, 1]. ``bd_acc_*`` is measured on the poisoned
    copies of the target data (or on the clean target data when no backdoor is
    implanted).
    """

    arm: str
    seed: int = attr.field(converter=int)
    class_id: int = attr.field(converter=int)
    trial: int = attr.field(default=0, converter=int, validator=attr.validators.ge(0))
    bd_acc_before: float = attr.field(converter=float, validator=_check_fraction)
    bd_acc_after: float = attr.field(converter=float, validator=_check_fraction)
    test_acc_before: float = attr.field(converter=float, validator=_check_fraction)
    test_acc_after: float = attr.field(converter=float, validator=_check_fraction)
    wall_time_seconds: float = attr.field(converter=float, validator=attr.validators.ge(0))
    target_acc_after: float = attr.field(converter=float, validator=_check_fraction)
    non_target_acc_after: float = attr.field(converter=float, validator=_check_fraction)
    per_class_acc: tuple[float, ...] = attr.field(factory=tuple, converter=_fraction_tuple)
    param: str | None = None
    value: float | None = None
    config: dict[str, Any] = attr.field(factory=dict, eq=False, repr=False)

    @per_class_acc.validator
    def _per_class_vld(self, attribute, value):
        if any(not 0.0 <= v <= 1.0 for v in value):
            raise ValueError("per-class accuracies must be in [0, 1]")

    @property
    def bd_acc(self) -> float:
        """Backdoor accuracy after the arm ran."""
        return self.bd_acc_after

    @property
    def test_acc(self) -> float:
        """Test accuracy after the arm ran."""
        return self.test_acc_after

    def to_row(self) -> dict[str, Any]:
        """The CSV row, keyed by :data:`METRICS_COLUMNS`."""
        row = attr.asdict(self, filter=lambda a, v: a.name not in ("per_class_acc", "config"))
        row["wall_time_s"] = row.pop("wall_time_seconds")
        row["param"] = "" if self.param is None else self.param
        row["value"] = "" if self.value is None else self.value
        return {k: row[k] for k in METRICS_COLUMNS}

    def to_dict(self) -> dict[str, Any]:
        """Everything except the config snapshot."""
        out = self.to_row()
        out["per_class_acc"] = list(self.per_class_acc)
        return out


def write_metrics_csv(records: Sequence[MetricsRecord], fname) -> Path:
    """Write records as CSV rows in :data:`METRICS_COLUMNS` order."""
    fname = Path(fname)
    fname.parent.mkdir(parents=True, exist_ok=True)
    with open(fname, "w", newline="") as fl:
        writer = csv.DictWriter(fl, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())
    return fname


def write_metrics_json(records: Sequence[MetricsRecord], fname, config: dict | None = None) -> Path:
    """Write records and the resolved config snapshot as JSON."""
    fname = Path(fname)
    fname.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": __version__,
        "config": config if config is not None else (records[0].config if records else {}),
        "records": [r.to_dict() for r in records],
    }
    with open(fname, "w") as fl:
        json.dump(payload, fl, indent=2, allow_nan=True)
        fl.write("\n")
    return fname


def _number(value: str):
    if value == "":
        return None
    try:
        out = float(value)
    except ValueError:
        return value
    return int(out) if out.is_integer() and "." not in value and "e" not in value else out


def read_csv_rows(fname) -> list[dict[str, Any]]:
    """Read a results CSV, converting numeric cells."""
    with open(fname, newline="") as fl:
        return [{k: _number(v) for k, v in row.items()} for row in csv.DictReader(fl)]


def write_rows_csv(rows: Iterable[dict[str, Any]], columns: Sequence[str], fname) -> Path:
    """Write arbitrary rows with a fixed column order."""
    fname = Path(fname)
    fname.parent.mkdir(parents=True, exist_ok=True)
    with open(fname, "w", newline="") as fl:
        writer = csv.DictWriter(fl, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})
    return fname


def write_round_metrics_csv(metrics: Sequence[RoundMetrics], fname) -> Path:
    """Write per-round client metrics as ``round, client, loss, acc`` rows."""
    return write_rows_csv(
        (attr.asdict(m) for m in metrics), ("round", "client", "loss", "acc"), fname
    )


def collect_csv_paths(paths: Iterable[str | os.PathLike]) -> list[Path]:
    """Expand directories into the CSV files they contain."""
    out = []
    for pth in map(Path, paths):
        if pth.is_dir():
            out.extend(sorted(pth.glob("*.csv")))
        else:
            out.append(pth)
    return out
