"""
Input parameter classes for federated training and unlearning experiments.

There are five sections of an experiment config, each an :mod:`attrs` class with
validated fields and documented defaults:

* :class:`DataConfig` chooses MNIST or synthetic blobs.
* :class:`FederationConfig` holds the FedAvg settings (clients, epochs, rounds).
* :class:`BackdoorConfig` controls the completeness-auditing trigger.
* :class:`UnlearnRequest` names what to forget.
* :class:`EwcConfig` holds the unlearning hyper-parameters.

They are gathered into an :class:`ExperimentConfig`, which is normally read from a
YAML file with :func:`parse_config`. Parsing is strict: any unknown key, at any
depth, is an error naming its dotted path.
"""

from __future__ import annotations

import attr
import enum
import logging
from bidict import bidict
from pathlib import Path
from typing import Any

from . import yaml
from ._cfg import ConfigurationError
from ._utils import ParameterError, Stream, derive_seed
from .nn import ModelSpec

logger = logging.getLogger(__name__)

MNIST_DIM = 784
MNIST_CLASSES = 10

_ge = attr.validators.ge
_gt = attr.validators.gt
_le = attr.validators.le


def _opt_path(value):
    return None if value is None else Path(value).expanduser()


class FakeLabelKind(enum.Enum):
    """The four ways of generating fake labels for the data to be forgotten."""

    UNIFORM = enum.auto()
    RANDOM = enum.auto()
    TEACHER = enum.auto()
    DEBIAS_TEACHER = enum.auto()

    @classmethod
    def from_name(cls, name: str | FakeLabelKind) -> FakeLabelKind:
        """Look up a kind by its config/CLI name."""
        if isinstance(name, cls):
            return name
        try:
            return LABEL_KIND_NAMES.inverse[str(name).lower()]
        except KeyError:
            raise ParameterError(
                f"Unknown label kind '{name}'. Choose from {list(LABEL_KIND_NAMES.values())}."
            )

    @property
    def cli_name(self) -> str:
        """The name used in config files and on the command line."""
        return LABEL_KIND_NAMES[self]

    @property
    def needs_teachers(self) -> bool:
        """Whether this kind needs a teacher ensemble."""
        return self in (FakeLabelKind.TEACHER, FakeLabelKind.DEBIAS_TEACHER)


LABEL_KIND_NAMES = bidict(
    {
        FakeLabelKind.UNIFORM: "uniform",
        FakeLabelKind.RANDOM: "random",
        FakeLabelKind.TEACHER: "teacher",
        FakeLabelKind.DEBIAS_TEACHER: "debias",
    }
)

ARMS = ("fedaf", "fedaf-c", "retrain")


@attr.define(frozen=True, kw_only=True)
class DataConfig:
    """
    Where training and test data come from.

    Parameters
    ----------
    source : str
        Either ``"mnist"`` (IDX files in ``mnist_dir``) or ``"blobs"``.
    mnist_dir : path, optional
        Directory holding the four MNIST IDX files (optionally gzipped).
    train_limit, test_limit : int, optional
        Keep only the first N samples of each MNIST split.
    classes, per_class, test_per_class, dim, spread :
        Blob generation settings.
    """

    source: str = attr.field(default="blobs", validator=attr.validators.in_(("mnist", "blobs")))
    mnist_dir: Path | None = attr.field(default=None, converter=_opt_path)
    train_limit: int | None = attr.field(
        default=None, validator=attr.validators.optional(_ge(1))
    )
    test_limit: int | None = attr.field(
        default=None, validator=attr.validators.optional(_ge(1))
    )
    classes: int = attr.field(default=10, validator=_ge(2))
    per_class: int = attr.field(default=100, validator=_ge(1))
    test_per_class: int = attr.field(default=50, validator=_ge(1))
    dim: int = attr.field(default=64, validator=_ge(1))
    spread: float = attr.field(default=0.05, converter=float, validator=_ge(0))

    def __attrs_post_init__(self):
        if self.source == "mnist" and self.mnist_dir is None:
            raise ValueError("source 'mnist' requires 'mnist_dir'")

    @property
    def input_dim(self) -> int:
        """Feature dimension of the data."""
        return MNIST_DIM if self.source == "mnist" else self.dim

    @property
    def class_count(self) -> int:
        """Number of classes in the data."""
        return MNIST_CLASSES if self.source == "mnist" else self.classes


@attr.define(frozen=True, kw_only=True)
class FederationConfig:
    """
    FedAvg settings.

    Parameters
    ----------
    client_count : int
        Number of simulated clients, K.
    local_epochs : int
        Epochs of local SGD per round, E.
    rounds : int
        Number of federated rounds, T.
    learning_rate : float
        SGD step size.
    batch_size : int
        Mini-batch size.
    seed : int
        Seed from which every client stream is derived.
    """

    client_count: int = attr.field(default=4, validator=_ge(1))
    local_epochs: int = attr.field(default=1, validator=_ge(0))
    rounds: int = attr.field(default=5, validator=_ge(0))
    learning_rate: float = attr.field(default=0.01, converter=float, validator=_gt(0))
    batch_size: int = attr.field(default=32, validator=_ge(1))
    seed: int = attr.field(default=0, converter=int)


@attr.define(frozen=True, kw_only=True)
class BackdoorConfig:
    """Settings for the trigger implanted into the data to be forgotten."""

    enabled: bool = attr.field(default=True, converter=bool)
    poison_fraction: float = attr.field(
        default=1.0, converter=float, validator=[_gt(0), _le(1)]
    )
    trigger_size: int = attr.field(default=3, validator=_ge(1))
    trigger_value: float = attr.field(
        default=1.0, converter=float, validator=[_ge(0), _le(1)]
    )


@attr.define(frozen=True, kw_only=True)
class EwcConfig:
    """
    Hyper-parameters of the unlearning phase.

    Parameters
    ----------
    lam : float
        EWC strength (``lambda`` in config files).
    ewc_epochs : int
        Epochs of constrained training.
    learning_rate : float, optional
        Step size; when unset, the federated training rate is used.
    batch_size : int
        Mini-batch size for the memories and the Fisher pass.
    debias_mode : str
        ``"dynamic"`` computes sigma per sample, ``"fixed"`` uses ``sigma_fixed``.
    sigma_fixed : float, optional
        The fixed sigma in [0, 1].
    num_teachers : int
        Size of the teacher ensemble, Q.
    conventional_epochs : int, optional
        Epochs of plain continued training for the ``fedaf-c`` arm; defaults to
        ``ewc_epochs``.
    conventional_learning_rate : float, optional
        Step size of the ``fedaf-c`` arm; defaults to ``learning_rate``.
    """

    lam: float = attr.field(default=10.0, converter=float, validator=_ge(0))
    ewc_epochs: int = attr.field(default=1, validator=_ge(1))
    learning_rate: float | None = attr.field(
        default=None,
        converter=attr.converters.optional(float),
        validator=attr.validators.optional(_gt(0)),
    )
    batch_size: int = attr.field(default=32, validator=_ge(1))
    debias_mode: str = attr.field(
        default="dynamic", validator=attr.validators.in_(("dynamic", "fixed"))
    )
    sigma_fixed: float | None = attr.field(
        default=None,
        converter=attr.converters.optional(float),
        validator=attr.validators.optional([_ge(0), _le(1)]),
    )
    num_teachers: int = attr.field(default=10, validator=_ge(1))
    conventional_epochs: int | None = attr.field(
        default=None, validator=attr.validators.optional(_ge(1))
    )
    conventional_learning_rate: float | None = attr.field(
        default=None,
        converter=attr.converters.optional(float),
        validator=attr.validators.optional(_gt(0)),
    )

    def __attrs_post_init__(self):
        if self.debias_mode == "fixed" and self.sigma_fixed is None:
            raise ValueError("debias_mode 'fixed' requires 'sigma_fixed'")

    def resolved(self, learning_rate: float) -> EwcConfig:
        """This config with the learning rate filled in if unset."""
        if self.learning_rate is not None:
            return self
        return attr.evolve(self, learning_rate=learning_rate)

    @property
    def conventional_budget(self) -> tuple[float | None, int]:
        """Learning rate and epochs of the ``fedaf-c`` arm."""
        lr = self.conventional_learning_rate or self.learning_rate
        return lr, self.conventional_epochs or self.ewc_epochs


@attr.define(frozen=True, kw_only=True)
class UnlearnRequest:
    """
    A request to forget part of one client's data.

    Parameters
    ----------
    client_id : int
        The requesting client.
    target_class : int
        The class to forget (``scope="class"``).
    scope : str
        ``"class"``, ``"samples"`` (explicit ``sample_indices`` into the full
        training set) or ``"client"`` (everything the client holds).
    sample_indices : tuple of int, optional
        Used with ``scope="samples"``.
    target_indices : tuple of int, optional
        The derived index set R; filled by
        :func:`pyfedaf.unlearning.resolve_request`.
    """

    client_id: int = attr.field(default=0, validator=_ge(0))
    target_class: int = attr.field(default=0, validator=_ge(0))
    scope: str = attr.field(
        default="class", validator=attr.validators.in_(("class", "samples", "client"))
    )
    sample_indices: tuple[int, ...] | None = attr.field(
        default=None, converter=attr.converters.optional(lambda v: tuple(int(i) for i in v))
    )
    target_indices: tuple[int, ...] | None = attr.field(
        default=None,
        converter=attr.converters.optional(lambda v: tuple(int(i) for i in v)),
        repr=False,
    )

    def __attrs_post_init__(self):
        if self.scope == "samples" and not self.sample_indices:
            raise ValueError("scope 'samples' requires non-empty 'sample_indices'")

    @property
    def is_resolved(self) -> bool:
        """Whether the target index set has been derived."""
        return self.target_indices is not None

    def to_dict(self) -> dict[str, Any]:
        """The user-facing fields (derived indices excluded)."""
        out = {
            "client_id": self.client_id,
            "target_class": self.target_class,
            "scope": self.scope,
        }
        if self.sample_indices is not None:
            out["sample_indices"] = list(self.sample_indices)
        return out


def _hidden(value) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


@attr.define(frozen=True, kw_only=True)
class ExperimentConfig:
    """
    Everything needed to reproduce one experiment.

    Only ``data`` and ``seed`` are required; every other section has documented
    defaults (4 clients, 1 local epoch, 5 rounds, lambda 10, 1 EWC epoch, 10
    teachers, debias labels, 5 trials).
    """

    data: DataConfig = attr.field(validator=attr.validators.instance_of(DataConfig))
    seed: int = attr.field(converter=int)
    hidden: tuple[int, ...] = attr.field(default=(128,), converter=_hidden)
    federation: FederationConfig = attr.field(factory=FederationConfig)
    backdoor: BackdoorConfig = attr.field(factory=BackdoorConfig)
    request: UnlearnRequest = attr.field(factory=UnlearnRequest)
    label_kind: FakeLabelKind = attr.field(
        default=FakeLabelKind.DEBIAS_TEACHER, converter=FakeLabelKind.from_name
    )
    ewc: EwcConfig = attr.field(factory=EwcConfig)
    trials: int = attr.field(default=5, validator=_ge(1))
    overlap_epochs: int = attr.field(default=5, validator=_ge(1))
    output_dir: Path | None = attr.field(default=None, converter=_opt_path)

    @hidden.validator
    def _hidden_vld(self, attribute, value):
        if any(v < 1 for v in value):
            raise ValueError(f"hidden widths must be >= 1, got {value}")

    def __attrs_post_init__(self):
        C = self.data.class_count
        if self.request.target_class >= C:
            raise ParameterError(
                f"request.target_class={self.request.target_class} but the data has "
                f"only {C} classes."
            )
        if self.request.client_id >= self.federation.client_count:
            raise ParameterError(
                f"request.client_id={self.request.client_id} but there are only "
                f"{self.federation.client_count} clients."
            )

    @property
    def model_spec(self) -> ModelSpec:
        """The MLP architecture for this data."""
        return ModelSpec((self.data.input_dim, *self.hidden, self.data.class_count))

    @property
    def resolved_ewc(self) -> EwcConfig:
        """The unlearning config with its learning rate resolved."""
        return self.ewc.resolved(self.federation.learning_rate)

    def trial_seed(self, trial: int) -> int:
        """The root seed of a single trial."""
        return derive_seed(self.seed, Stream.TRIAL, trial)

    def federation_for_trial(self, trial: int) -> FederationConfig:
        """The federation settings seeded for one trial."""
        return attr.evolve(self.federation, seed=self.trial_seed(trial))

    def to_dict(self) -> dict[str, Any]:
        """The fully resolved config as plain YAML-able types."""
        data = attr.asdict(self.data)
        data["mnist_dir"] = None if self.data.mnist_dir is None else str(self.data.mnist_dir)
        fed = attr.asdict(self.federation)
        fed.pop("seed")
        ewc = attr.asdict(self.ewc)
        ewc["lambda"] = ewc.pop("lam")
        return {
            "seed": self.seed,
            "data": data,
            "model": {"hidden": list(self.hidden)},
            "federation": fed,
            "backdoor": attr.asdict(self.backdoor),
            "request": self.request.to_dict(),
            "label_kind": self.label_kind.cli_name,
            "ewc": ewc,
            "trials": self.trials,
            "overlap_epochs": self.overlap_epochs,
            "output_dir": None if self.output_dir is None else str(self.output_dir),
        }

    @classmethod
    def from_dict(cls, dct: dict[str, Any]) -> ExperimentConfig:
        """Build a config from nested plain types, strictly."""
        dct = _as_mapping(dct, "")
        _check_keys(dct, _TOP_KEYS, "")
        for key in ("data", "seed"):
            if key not in dct:
                raise ConfigurationError(f"Missing required key '{key}'")

        kwargs = {"seed": dct["seed"]}
        kwargs["data"] = _build(DataConfig, dct["data"], "data")
        if "model" in dct:
            model = _as_mapping(dct["model"], "model")
            _check_keys(model, {"hidden"}, "model")
            if "hidden" in model:
                kwargs["hidden"] = model["hidden"]
        if "federation" in dct:
            kwargs["federation"] = _build(
                FederationConfig, dct["federation"], "federation", exclude={"seed"}
            )
        if "backdoor" in dct:
            kwargs["backdoor"] = _build(BackdoorConfig, dct["backdoor"], "backdoor")
        if "request" in dct:
            kwargs["request"] = _build(
                UnlearnRequest, dct["request"], "request", exclude={"target_indices"}
            )
        if "ewc" in dct:
            kwargs["ewc"] = _build(EwcConfig, dct["ewc"], "ewc", renames={"lambda": "lam"})
        for key in ("label_kind", "trials", "overlap_epochs", "output_dir"):
            if key in dct:
                kwargs[key] = dct[key]

        try:
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ParameterError(f"Invalid experiment config: {e}") from e

        return attr.evolve(cfg, federation=attr.evolve(cfg.federation, seed=cfg.seed))


_TOP_KEYS = {
    "seed",
    "data",
    "model",
    "federation",
    "backdoor",
    "request",
    "label_kind",
    "ewc",
    "trials",
    "overlap_epochs",
    "output_dir",
}


def _as_mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigurationError(
            f"Expected a mapping at '{path or '<root>'}', got {type(value).__name__}"
        )
    return value


def _check_keys(dct: dict, allowed: set[str], path: str):
    for key in dct:
        if key not in allowed:
            full = f"{path}.{key}" if path else str(key)
            raise ConfigurationError(f"Unknown key '{full}' in experiment config")


def _build(cls, dct, path: str, renames: dict[str, str] | None = None, exclude=()):
    renames = renames or {}
    dct = _as_mapping(dct, path)
    inverse = {v: k for k, v in renames.items()}
    allowed = {inverse.get(f.name, f.name) for f in attr.fields(cls)} - set(exclude)
    _check_keys(dct, allowed, path)

    kwargs = {renames.get(k, k): v for k, v in dct.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ParameterError(f"Invalid value under '{path}': {e}") from e


def parse_config(path: str | Path) -> ExperimentConfig:
    """
    Read an experiment config from a YAML file.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    ConfigurationError
        If the file has unknown or missing keys (the message names the key path).
    ParameterError
        If a value violates a field invariant.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file '{path}' does not exist.")

    with open(path) as fl:
        raw = yaml.load(fl)

    cfg = ExperimentConfig.from_dict(raw)
    logger.debug(f"Parsed experiment config from {path}")
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Write the fully resolved config to a YAML file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fl:
        yaml.dump(cfg.to_dict(), fl)
    return path
