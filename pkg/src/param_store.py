"""Named-tensor parameter container.

A ParamSet is an ordered mapping from dotted tensor names to float64 numpy
arrays. Order is construction order and defines mask indexing: mask entry
``i`` refers to the ``i``-th tensor. Binary operations check congruence
(same names, order and shapes) eagerly.

The checkpoint codec writes a flat little-endian format:

    magic "FZGD" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0=f64) | u8 rank
                | rank x u64 dims | row-major f64 payload
"""

from __future__ import annotations

import logging
import math
import struct
from collections.abc import Iterator, Mapping, Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from src.exceptions import (
    CheckpointFormatError,
    CongruenceError,
    DimensionError,
    IndexRangeError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from src.fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

Tensor = NDArray[np.float64]

CHECKPOINT_MAGIC = b"FZGD"
CHECKPOINT_VERSION = 1
DTYPE_F64 = 0

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_DTYPE_RANK = struct.Struct("<BB")
_DIM = struct.Struct("<Q")


def as_tensor(value: object) -> Tensor:
    """Convert to a contiguous float64 array (copying)."""
    return np.array(value, dtype=np.float64, order="C", copy=True)


class ParamCounts(NamedTuple):
    """Element counts per tensor (ParamSet order) and their sum."""

    names: tuple[str, ...]
    counts: tuple[int, ...]
    total: int


class ParamSet:
    """Ordered collection of named float64 tensors."""

    def __init__(self, entries: Mapping[str, object] | Sequence[tuple[str, object]] | None = None):
        """Initialize from a mapping or a sequence of ``(name, array)`` pairs.

        Arrays are copied, so the new set never aliases caller data.
        """
        self._entries: dict[str, Tensor] = {}
        items = entries.items() if isinstance(entries, Mapping) else (entries or [])
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError(f"Tensor name must be a non-empty string, got {name!r}")
            if name in self._entries:
                raise ValueError(f"Duplicate tensor name: {name}")
            self._entries[name] = as_tensor(value)

    # ------------------------------------------------------------------ access

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} tensors, {self.param_counts().total} params)"

    @property
    def names(self) -> list[str]:
        """Tensor names in order."""
        return list(self._entries)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Tensor shapes in order."""
        return [t.shape for t in self._entries.values()]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def tensor(self, i: int) -> Tensor:
        """Return tensor ``i`` (ParamSet order)."""
        if not 0 <= i < len(self):
            raise IndexRangeError(f"Tensor index {i} out of range for {len(self)} tensors")
        return self.tensors()[i]

    def name_at(self, i: int) -> str:
        if not 0 <= i < len(self):
            raise IndexRangeError(f"Tensor index {i} out of range for {len(self)} tensors")
        return self.names[i]

    def set_tensor(self, name: str, value: object) -> None:
        """Replace an existing tensor keeping its shape."""
        if name not in self._entries:
            raise KeyError(name)
        new = as_tensor(value)
        if new.shape != self._entries[name].shape:
            raise DimensionError(
                f"Tensor {name}: shape {new.shape} does not match {self._entries[name].shape}"
            )
        self._entries[name] = new

    # ----------------------------------------------------------- construction

    def copy(self) -> ParamSet:
        return type(self)(self._entries)

    def zeros_like(self) -> ParamSet:
        return type(self)((name, np.zeros_like(t)) for name, t in self.items())

    def map(self, fn) -> ParamSet:
        """Apply ``fn`` to every tensor, returning a new set of the same type."""
        return type(self)((name, fn(t)) for name, t in self.items())

    # ------------------------------------------------------------- validation

    def first_mismatch(self, other: ParamSet) -> str | None:
        """Describe the first difference in names/order/shapes, or None."""
        for i, ((name_a, a), (name_b, b)) in enumerate(zip(self.items(), other.items())):
            if name_a != name_b:
                return f"tensor {i}: name {name_a!r} vs {name_b!r}"
            if a.shape != b.shape:
                return f"tensor {name_a!r}: shape {a.shape} vs {b.shape}"
        if len(self) != len(other):
            return f"tensor count {len(self)} vs {len(other)}"
        return None

    def is_congruent(self, other: ParamSet) -> bool:
        return self.first_mismatch(other) is None

    def check_congruent(self, other: ParamSet) -> None:
        """Raise CongruenceError naming the first mismatching tensor."""
        mismatch = self.first_mismatch(other)
        if mismatch is not None:
            raise CongruenceError(f"Parameter sets are not congruent: {mismatch}")

    def all_finite(self) -> bool:
        return all(bool(np.isfinite(t).all()) for t in self._entries.values())

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other: ParamSet) -> ParamSet:
        self.check_congruent(other)
        return type(self)((n, a + b) for (n, a), b in zip(self.items(), other.tensors()))

    def __sub__(self, other: ParamSet) -> ParamSet:
        self.check_congruent(other)
        return type(self)((n, a - b) for (n, a), b in zip(self.items(), other.tensors()))

    def scale(self, coeff: float) -> ParamSet:
        return self.map(lambda t: coeff * t)

    def max_abs_diff(self, other: ParamSet) -> float:
        """Largest elementwise absolute difference over all tensors."""
        self.check_congruent(other)
        diffs = [
            float(np.max(np.abs(a - b), initial=0.0))
            for a, b in zip(self.tensors(), other.tensors())
        ]
        return max(diffs, default=0.0)

    def bit_equal(self, other: ParamSet, i: int | None = None) -> bool:
        """Byte-level equality of all tensors, or only tensor ``i``."""
        self.check_congruent(other)
        if i is not None:
            return self.tensor(i).tobytes() == other.tensor(i).tobytes()
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.tensors(), other.tensors()))

    def param_counts(self) -> ParamCounts:
        return param_counts(self)


class ParamDelta(ParamSet):
    """Difference between two congruent parameter sets."""

    @classmethod
    def between(cls, a: ParamSet, b: ParamSet) -> ParamDelta:
        """Return ``a - b`` as a ParamDelta."""
        a.check_congruent(b)
        return cls((n, x - y) for (n, x), y in zip(a.items(), b.tensors()))


# ---------------------------------------------------------------- operations


def _check_mask_length(p: ParamSet, m: Sequence[float] | NDArray) -> NDArray[np.float64]:
    mask = np.asarray(m, dtype=np.float64)
    if mask.ndim != 1 or mask.shape[0] != len(p):
        raise DimensionError(f"Mask length {mask.shape} does not match tensor count {len(p)}")
    return mask


def blend(pre: ParamSet, ft: ParamSet, m: Sequence[float] | NDArray) -> ParamSet:
    """Per-tensor blend ``m_i * pre_i + (1 - m_i) * ft_i``.

    Mask values of exactly 0 or 1 copy the source tensor bit-for-bit.
    """
    pre.check_congruent(ft)
    mask = _check_mask_length(pre, m)
    out = []
    for (name, a), b, mi in zip(pre.items(), ft.tensors(), mask):
        if mi == 1.0:
            out.append((name, a))
        elif mi == 0.0:
            out.append((name, b))
        else:
            out.append((name, mi * a + (1.0 - mi) * b))
    return ParamSet(out)


def tensor_dot(a: ParamSet, b: ParamSet, i: int) -> float:
    """Frobenius inner product of tensor ``i`` of ``a`` and ``b``."""
    a.check_congruent(b)
    return float(np.vdot(a.tensor(i), b.tensor(i)))


def axpy_tensor(target: ParamSet, i: int, coeff: float, g: object) -> ParamSet:
    """In-place ``target_i += coeff * g``; other tensors untouched.

    Returns:
        The updated target (same object)
    """
    t = target.tensor(i)
    grad = np.asarray(g, dtype=np.float64)
    if grad.shape != t.shape:
        raise DimensionError(
            f"Tensor {target.name_at(i)!r}: update shape {grad.shape} does not match {t.shape}"
        )
    if coeff != 0.0:
        t += coeff * grad
    return target


def param_counts(p: ParamSet) -> ParamCounts:
    counts = tuple(int(t.size) for t in p.tensors())
    return ParamCounts(names=tuple(p.names), counts=counts, total=sum(counts))


# ---------------------------------------------------------------- checkpoint


def encode_checkpoint(p: ParamSet) -> bytes:
    """Serialize a ParamSet to the checkpoint byte format."""
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(p))]
    for name, t in p.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise DimensionError(f"Tensor name too long: {name[:40]}...")
        if t.ndim > 0xFF:
            raise DimensionError(f"Tensor {name!r}: rank {t.ndim} exceeds 255")
        parts.append(_NAME_LEN.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_DTYPE_RANK.pack(DTYPE_F64, t.ndim))
        parts.extend(_DIM.pack(d) for d in t.shape)
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size: int, what: str) -> memoryview:
        if size < 0:
            raise CheckpointFormatError(f"Negative size {size} reading {what}")
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedCheckpointError(
                f"Checkpoint truncated reading {what} at byte {self.offset} "
                f"(need {size}, have {len(self.data) - self.offset})"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))


def decode_checkpoint(data: bytes) -> ParamSet:
    """Parse checkpoint bytes into a ParamSet."""
    reader = _Reader(data)
    if len(data) >= 4 and bytes(data[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {bytes(data[:4])!r}")
    magic, version, count = reader.unpack(_HEADER, "header")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"Unsupported checkpoint version {version}")

    entries: list[tuple[str, Tensor]] = []
    for index in range(count):
        (name_len,) = reader.unpack(_NAME_LEN, f"name length of tensor {index}")
        try:
            name = bytes(reader.take(name_len, f"name of tensor {index}")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"Tensor {index}: name is not valid UTF-8") from e
        dtype, rank = reader.unpack(_DTYPE_RANK, f"dtype/rank of {name!r}")
        if dtype != DTYPE_F64:
            raise CheckpointFormatError(f"Tensor {name!r}: unsupported dtype code {dtype}")
        shape = tuple(reader.unpack(_DIM, f"dims of {name!r}")[0] for _ in range(rank))
        if 0 in shape:
            raise CheckpointFormatError(f"Tensor {name!r}: zero dimension in shape {shape}")
        # python ints: a u64 product must not wrap before the bounds check
        size = math.prod(shape)
        payload = reader.take(size * 8, f"payload of {name!r}")
        tensor = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        entries.append((name, tensor))

    if reader.offset != len(data):
        raise CheckpointFormatError(
            f"Checkpoint has {len(data) - reader.offset} trailing bytes after {count} tensors"
        )
    try:
        return ParamSet(entries)
    except ValueError as e:
        raise CheckpointFormatError(str(e)) from e


def save_checkpoint(p: ParamSet, path: str | Path) -> Path:
    """Write a checkpoint atomically."""
    path = atomic_write_bytes(path, encode_checkpoint(p))
    logger.debug("Saved %d tensors to %s", len(p), path)
    return path


def load_checkpoint(path: str | Path) -> ParamSet:
    """Read a checkpoint file."""
    data = Path(path).read_bytes()
    p = decode_checkpoint(data)
    logger.debug("Loaded %d tensors from %s", len(p), path)
    return p
