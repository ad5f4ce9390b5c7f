"""Flat parameter vectors, parameter importance and critical-set extraction."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class LayoutError(ValueError):
    """Raised when two parameter vectors (or a vector and its layout) disagree."""


class ConfigurationError(ValueError):
    """Raised for hyperparameters that cannot produce a valid result."""


class Segment(NamedTuple):
    name: str
    offset: int
    length: int


def make_layout(shapes: Sequence[tuple[str, int]]) -> tuple[Segment, ...]:
    """Build a contiguous layout from ``(name, length)`` pairs."""
    out = []
    offset = 0
    for name, length in shapes:
        out.append(Segment(name, offset, int(length)))
        offset += int(length)
    return tuple(out)


def _check_layout(layout: tuple[Segment, ...], size: int) -> None:
    expected = 0
    for seg in layout:
        if seg.offset != expected or seg.length < 0:
            raise LayoutError(f"segment {seg.name!r} is not contiguous with its predecessor")
        expected += seg.length
    if expected != size:
        raise LayoutError(f"layout covers {expected} values but vector has {size}")


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 parameter vector plus the layer layout it was flattened from.

    Used for model weights, global models and model updates alike.
    """

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(Segment(*s) for s in self.layout))
        _check_layout(self.layout, values.size)
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains NaN or Inf")

    @classmethod
    def flat(cls, values) -> "ParamVector":
        """Wrap a bare array as a single-segment vector."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, (Segment("flat", 0, values.size),))

    def __len__(self) -> int:
        return self.values.size

    @property
    def dim(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length]
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def _check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutError("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    # serialization: b"PVEC", u32 version, u32 n_segments,
    # per segment (u32 name_len, utf-8 name, u64 offset, u64 length),
    # u64 n_values, then n_values little-endian float64
    _MAGIC = b"PVEC"
    _VERSION = 1

    def to_bytes(self) -> bytes:
        parts = [self._MAGIC, struct.pack("<II", self._VERSION, len(self.layout))]
        for seg in self.layout:
            name = seg.name.encode("utf-8")
            parts.append(struct.pack("<I", len(name)))
            parts.append(name)
            parts.append(struct.pack("<QQ", seg.offset, seg.length))
        parts.append(struct.pack("<Q", self.values.size))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        if data[:4] != cls._MAGIC:
            raise ValueError("not a serialized parameter vector (bad magic)")
        pos = 4
        version, n_seg = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != cls._VERSION:
            raise ValueError(f"unsupported parameter vector version {version}")
        layout = []
        for _ in range(n_seg):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            offset, length = struct.unpack_from("<QQ", data, pos)
            pos += 16
            layout.append(Segment(name, offset, length))
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if len(data) - pos != 8 * n:
            raise ValueError("truncated parameter vector payload")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
        return cls(values, tuple(layout))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class CriticalSets:
    top: np.ndarray
    bottom: np.ndarray
    k_count: int


def compute_importance(delta: ParamVector, theta: ParamVector) -> np.ndarray:
    """Per-coordinate importance ``|delta * theta|``."""
    if delta.layout != theta.layout:
        raise LayoutError("update and model have different layouts")
    return np.abs(delta.values * theta.values)


def critical_count(dim: int, k_ratio: float) -> int:
    if not 0.0 < k_ratio < 1.0:
        raise ConfigurationError(f"k_ratio must lie in (0, 1), got {k_ratio}")
    if dim < 2:
        raise ConfigurationError("critical sets need a dimension of at least 2")
    k = max(1, math.floor(k_ratio * dim))
    if 2 * k > dim:
        raise ConfigurationError(f"2*k_count={2 * k} exceeds dimension {dim}")
    return k


def _ascending_order(imp: np.ndarray) -> np.ndarray:
    # stable sort: equal values keep ascending index order
    return np.argsort(imp, kind="stable")


def extract_critical_sets(imp, k_ratio: float) -> CriticalSets:
    """Indices of the ``k`` least and ``k`` most important coordinates.

    The bottom set is taken first (ascending value, then ascending index);
    the top set is then the ``k`` largest of the remaining coordinates with
    ties going to the lower index, which keeps the two sets disjoint even
    when many importances are equal.
    """
    imp = np.asarray(imp, dtype=np.float64)
    k = critical_count(imp.size, k_ratio)
    bottom = _ascending_order(imp)[:k]
    remaining = np.ones(imp.size, dtype=bool)
    remaining[bottom] = False
    idx = np.flatnonzero(remaining)
    # descending value, ascending index among ties
    order = np.lexsort((idx, -imp[idx]))
    top = idx[order[:k]]
    return CriticalSets(top=np.sort(top), bottom=np.sort(bottom), k_count=k)


def rank_map(imp) -> np.ndarray:
    """Rank of every coordinate; 0 is least important, ties by ascending index."""
    imp = np.asarray(imp, dtype=np.float64)
    ranks = np.empty(imp.size, dtype=np.int64)
    ranks[_ascending_order(imp)] = np.arange(imp.size)
    return ranks
