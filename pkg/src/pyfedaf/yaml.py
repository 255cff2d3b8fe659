"""Modified YAML that can dump the numpy and path objects found in pyfedaf configs.

The loader is PyYAML's safe loader; the dumper is the safe dumper extended with
representers for numpy scalars/arrays, tuples, :class:`pathlib.Path` and enums, so
that resolved experiment configs can be written without ``!!python`` tags and read
back by :func:`load`.
"""

import enum
import numpy as np
import yaml
from pathlib import PurePath


class _NewDumper(yaml.SafeDumper):
    pass


class _NewLoader(yaml.SafeLoader):
    pass


def _represent_numpy_scalar(dumper, data):
    return dumper.represent_data(data.item())


def _represent_ndarray(dumper, data):
    return dumper.represent_list(data.tolist())


def _represent_tuple(dumper, data):
    return dumper.represent_list(list(data))


def _represent_path(dumper, data):
    return dumper.represent_str(str(data))


def _represent_enum(dumper, data):
    return dumper.represent_data(data.value)


_NewDumper.add_multi_representer(np.generic, _represent_numpy_scalar)
_NewDumper.add_representer(np.ndarray, _represent_ndarray)
_NewDumper.add_representer(tuple, _represent_tuple)
_NewDumper.add_multi_representer(PurePath, _represent_path)
_NewDumper.add_multi_representer(enum.Enum, _represent_enum)


def load(stream):
    """Load an object from a YAML stream."""
    return yaml.load(stream, Loader=_NewLoader)


def dump(data, stream=None, **kwargs):
    """Dump an object into a YAML stream."""
    kwargs["Dumper"] = _NewDumper
    kwargs.setdefault("sort_keys", False)
    return yaml.dump(data, stream=stream, **kwargs)
