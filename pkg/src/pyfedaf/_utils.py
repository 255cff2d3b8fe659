"""Exceptions and small helpers shared across pyfedaf."""

from __future__ import annotations

import logging
import numpy as np
from enum import IntEnum

logger = logging.getLogger(__name__)


class ParameterError(RuntimeError):
    """An exception representing a bad choice of parameters."""

    default_message = "pyfedaf does not support this combination of parameters."

    def __init__(self, msg=None):
        super().__init__(msg or self.default_message)


class ShapeError(ParameterError):
    """An exception when arrays or parameter vectors have incompatible shapes."""

    default_message = "Incompatible shapes."


class WeightSumError(ParameterError):
    """An exception when aggregation weights do not form a convex combination."""

    default_message = "Aggregation weights must sum to one."


class DegenerateLabelError(ParameterError):
    """An exception when a debiased label has no probability mass left."""

    default_message = (
        "The debiased teacher label has zero L1 norm: the teacher output is the "
        "target one-hot and sigma=0 removes all of its mass."
    )


class EmptyBatchError(ParameterError):
    """An exception when an evaluation is requested on no samples."""

    default_message = "Cannot evaluate on an empty batch."


class DivergenceError(RuntimeError):
    """An exception when a loss becomes non-finite or explodes.

    Parameters
    ----------
    term : str
        The loss term that diverged, e.g. ``"L_M"``, ``"L_R"``, ``"ewc"`` or
        ``"cross_entropy"``.
    """

    default_message = (
        "Training diverged (non-finite or exploding loss). "
        "Try reducing the learning rate or increasing lambda."
    )

    def __init__(self, msg=None, term: str | None = None):
        self.term = term
        if msg is None and term is not None:
            msg = f"Loss term '{term}' diverged. {self.default_message}"
        super().__init__(msg or self.default_message)


class IDXFormatError(ValueError):
    """A malformed IDX file."""

    default_message = "The file is not a valid IDX file."

    def __init__(self, msg=None):
        super().__init__(msg or self.default_message)


class IDXMagicError(IDXFormatError):
    """The IDX magic number is not the one expected for this kind of file."""

    default_message = "Unexpected IDX magic number."


class IDXTruncatedError(IDXFormatError):
    """The IDX payload is shorter than its header claims."""

    default_message = "IDX payload is truncated."


class IDXCountMismatchError(IDXFormatError):
    """The image and label files disagree on the number of items."""

    default_message = "Image and label files hold different numbers of items."


class Stream(IntEnum):
    """Domain tags separating the random streams derived from one root seed."""

    INIT = 1
    CLIENT = 2
    TEACHER = 3
    RANDOM_LABEL = 4
    BACKDOOR = 5
    BLOBS = 6
    PARTITION = 7
    TRIAL = 8
    OVERLAP = 9
    RETRAIN = 10
    UNLEARN = 11


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """Derive an independent seed sequence from a root seed and integer keys.

    The result only depends on the values, never on call order, so parallel
    execution cannot change any random draw.
    """
    return np.random.SeedSequence([int(seed), *(int(k) for k in keys)])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """A numpy generator for the stream ``(seed, *keys)``."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: int) -> int:
    """A plain integer seed for the stream ``(seed, *keys)``."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])


def parse_csv_values(text: str) -> list[float]:
    """Parse a comma-separated list of numbers, e.g. ``"0.1,10"``."""
    try:
        return [float(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ParameterError(f"'{text}' is not a comma-separated list of numbers.")
