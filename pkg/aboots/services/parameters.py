"""
This module contains the named parameter collection and everything that
reads or writes it as a whole: initialization, gradient clipping, the SGD
update and the checkpoint file format.

Checkpoint format: a UTF-8 text manifest followed by the raw payload.

    aboots-parameters 1 <count>
    <name> <group> <extent>x<extent>... <byte offset>
    ...
    <payload: little-endian IEEE-754 float64 arrays, row-major, concatenated>

Offsets are relative to the first payload byte.
"""

import enum
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from aboots.services.utils import CheckpointError, InvalidHyperparameterError, ShapeError

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "aboots-parameters"
MANIFEST_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f8")


class Group(str, enum.Enum):
    """Which network's optimizer owns a parameter."""

    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class ParameterSet:
    """
    Named float64 arrays, each owned by one `Group`.

    Arrays are updated in place so that every graph binding a parameter
    sees the same storage.
    """

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._groups: Dict[str, Group] = {}

    def add(self, name: str, value: np.ndarray, group: Group) -> np.ndarray:
        """Registers a new parameter; names are unique."""
        if name in self._values:
            raise KeyError(f"Parameter '{name}' already exists")
        self._values[name] = np.ascontiguousarray(value, dtype=np.float64)
        self._groups[name] = Group(group)
        return self._values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> List[str]:
        """Parameter names in registration order."""
        return list(self._values)

    def group(self, name: str) -> Group:
        """The group that owns `name`."""
        return self._groups[name]

    def names_in(self, group: Group) -> List[str]:
        """Names owned by `group`, in registration order."""
        return [name for name in self._values if self._groups[name] == group]

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Deep copy of every value, for comparisons in tests and diagnostics."""
        return {name: value.copy() for name, value in self._values.items()}


def xavier_uniform_init(
    shape: Tuple[int, ...], rng: np.random.Generator
) -> np.ndarray:
    """
    Samples i.i.d. U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For a 2-D shape, `(fan_in, fan_out) = shape`. Higher ranks multiply both
    fans by the product of the trailing extents.

    Raises:
        ShapeError: for rank < 2 or a zero extent
    """
    if len(shape) < 2 or any(extent <= 0 for extent in shape):
        raise ShapeError(f"Xavier init needs a rank >= 2 shape, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[0] * receptive, shape[1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def global_norm(gradients: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all gradients taken together."""
    return float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in gradients.values())))


def clip_gradients(
    gradients: Mapping[str, np.ndarray], threshold: float = 5.0
) -> Dict[str, np.ndarray]:
    """
    Global-norm clipping: scales every gradient by threshold / norm when the
    joint norm exceeds the threshold, else returns them unchanged.
    """
    if threshold <= 0:
        raise InvalidHyperparameterError(f"Clip threshold must be positive, got {threshold}")
    norm = global_norm(gradients)
    if norm <= threshold:
        return dict(gradients)
    factor = threshold / norm
    return {name: grad * factor for name, grad in gradients.items()}


def sgd_step(
    parameters: ParameterSet, gradients: Mapping[str, np.ndarray], learning_rate: float
):
    """p <- p - lr * g, in place, for every name present in `gradients`."""
    if learning_rate <= 0:
        raise InvalidHyperparameterError(
            f"Learning rate must be positive, got {learning_rate}"
        )
    for name, grad in gradients.items():
        parameters[name][...] -= learning_rate * grad


def save_parameters(parameters: ParameterSet, path: Union[str, Path]):
    """Writes the manifest and payload; reloading is bit-exact."""
    lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION} {len(parameters)}"]
    payload: List[bytes] = []
    offset = 0
    for name in parameters.names():
        value = parameters[name]
        shape = "x".join(str(extent) for extent in value.shape) or "scalar"
        lines.append(f"{name} {parameters.group(name).value} {shape} {offset}")
        data = value.astype(PAYLOAD_DTYPE, copy=False).tobytes(order="C")
        payload.append(data)
        offset += len(data)

    with open(path, "wb") as handle:
        handle.write(("\n".join(lines) + "\n").encode("utf-8"))
        for data in payload:
            handle.write(data)
    logger.debug("Saved %d parameters (%d bytes) to %s", len(parameters), offset, path)


def load_parameters(path: Union[str, Path]) -> ParameterSet:
    """
    Reads a file written by `save_parameters`.

    Raises:
        CheckpointError: if the manifest is malformed or the payload is short
    """
    try:
        with open(path, "rb") as handle:
            header = handle.readline().decode("utf-8").split()
            if len(header) != 3 or header[0] != MANIFEST_MAGIC:
                raise CheckpointError(f"{path} is not a parameter checkpoint")
            if int(header[1]) != MANIFEST_VERSION:
                raise CheckpointError(f"{path} has unsupported version {header[1]}")
            entries = []
            for _ in range(int(header[2])):
                fields = handle.readline().decode("utf-8").split()
                if len(fields) != 4:
                    raise CheckpointError(f"{path} has a malformed manifest line")
                name, group, shape, offset = fields
                extents = () if shape == "scalar" else tuple(int(e) for e in shape.split("x"))
                entries.append((name, Group(group), extents, int(offset)))
            payload = handle.read()
    except (OSError, ValueError, UnicodeDecodeError) as error:
        raise CheckpointError(f"Could not read checkpoint {path}: {error}") from error

    parameters = ParameterSet()
    for name, group, extents, offset in entries:
        count = int(np.prod(extents)) if extents else 1
        end = offset + count * PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path} payload is truncated at '{name}'")
        value = np.frombuffer(payload[offset:end], dtype=PAYLOAD_DTYPE).reshape(extents)
        parameters.add(name, value.astype(np.float64), group)
    return parameters


def copy_into(target: ParameterSet, source: ParameterSet):
    """
    Overwrites `target` values in place with `source`.

    Raises:
        CheckpointError: if names, groups or shapes differ
    """
    if target.names() != source.names():
        missing = sorted(set(target.names()) ^ set(source.names()))
        raise CheckpointError(f"Checkpoint parameters do not match the model: {missing}")
    for name in target.names():
        if target.group(name) != source.group(name):
            raise CheckpointError(f"Parameter '{name}' changed group")
        if target[name].shape != source[name].shape:
            raise CheckpointError(
                f"Parameter '{name}' has shape {source[name].shape}, "
                f"model expects {target[name].shape}"
            )
        target[name][...] = source[name]
