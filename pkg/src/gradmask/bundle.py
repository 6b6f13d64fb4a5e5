"""Named, ordered, tagged parameter collections and their binary format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

MASKABLE = "maskable"
MASK_EXEMPT = "mask_exempt"
_TAG_CODES = {MASKABLE: 0, MASK_EXEMPT: 1}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}

MAGIC = b"GMPB"
VERSION = 1

# Entries with these suffixes are running statistics, not trained weights.
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class BundleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    name: str
    value: np.ndarray
    tag: str

    @property
    def trainable(self) -> bool:
        return not self.name.endswith(BUFFER_SUFFIXES)


class ParameterBundle:
    """Ordered ``(name, array, tag)`` entries for one model architecture.

    Bundles from the same architecture share names, shapes and order, so
    aggregation can align them by position. Values are stored as float64.
    """

    __slots__ = ("_entries", "_index")

    def __init__(self, entries):
        built = []
        for e in entries:
            if not isinstance(e, Entry):
                name, value, tag = e
                e = Entry(name, value, tag)
            if e.tag not in _TAG_CODES:
                raise ValueError(f"unknown tag {e.tag!r} for {e.name}")
            built.append(Entry(e.name, np.asarray(e.value, dtype=np.float64), e.tag))
        self._entries: tuple[Entry, ...] = tuple(built)
        self._index = {e.name: i for i, e in enumerate(self._entries)}
        if len(self._index) != len(self._entries):
            raise ValueError("duplicate parameter names in bundle")

    # -- container protocol -------------------------------------------------
    def __iter__(self) -> Iterator[Entry]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[self._index[name]].value

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __repr__(self) -> str:
        return f"ParameterBundle({len(self)} entries, {self.total_count} scalars)"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self._entries)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(e.tag for e in self._entries)

    @property
    def shapes(self) -> tuple[tuple, ...]:
        return tuple(e.value.shape for e in self._entries)

    @property
    def arrays(self) -> list[np.ndarray]:
        return [e.value for e in self._entries]

    @property
    def total_count(self) -> int:
        return int(sum(e.value.size for e in self._entries))

    def entry(self, name: str) -> Entry:
        return self._entries[self._index[name]]

    def trainable_names(self) -> list[str]:
        return [e.name for e in self._entries if e.trainable]

    # -- layout -------------------------------------------------------------
    def layout(self) -> tuple:
        return tuple((e.name, e.value.shape, e.tag) for e in self._entries)

    def is_aligned(self, other: "ParameterBundle") -> bool:
        return self.layout() == other.layout()

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([e.value.ravel() for e in self._entries])

    def unflatten(self, flat: np.ndarray) -> "ParameterBundle":
        """New bundle with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_count,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.total_count},)")
        out, pos = [], 0
        for e in self._entries:
            n = e.value.size
            out.append(Entry(e.name, flat[pos:pos + n].reshape(e.value.shape).copy(), e.tag))
            pos += n
        return ParameterBundle(out)

    def exempt_mask(self) -> np.ndarray:
        """Flat boolean vector, True where the scalar belongs to a mask-exempt entry."""
        if not self._entries:
            return np.zeros(0, dtype=bool)
        return np.concatenate([np.full(e.value.size, e.tag == MASK_EXEMPT) for e in self._entries])

    def exempt_fraction(self) -> float:
        total = self.total_count
        return float(self.exempt_mask().sum()) / total if total else 0.0

    # -- values -------------------------------------------------------------
    def copy(self) -> "ParameterBundle":
        return ParameterBundle([Entry(e.name, e.value.copy(), e.tag) for e in self._entries])

    def map(self, fn: Callable[[Entry], np.ndarray]) -> "ParameterBundle":
        return ParameterBundle([Entry(e.name, np.asarray(fn(e)), e.tag) for e in self._entries])

    def replace(self, values: dict) -> "ParameterBundle":
        """Copy with the named entries swapped for new arrays of the same shape."""
        out = []
        for e in self._entries:
            if e.name in values:
                v = np.asarray(values[e.name], dtype=np.float64)
                if v.shape != e.value.shape:
                    raise ValueError(f"{e.name}: shape {v.shape} != {e.value.shape}")
                out.append(Entry(e.name, v.copy(), e.tag))
            else:
                out.append(Entry(e.name, e.value.copy(), e.tag))
        return ParameterBundle(out)

    def nan_count(self) -> int:
        return int(sum(np.isnan(e.value).sum() for e in self._entries))

    def is_dense(self) -> bool:
        return self.nan_count() == 0

    def equals(self, other: "ParameterBundle") -> bool:
        """Bit-exact equality, NaN payloads included."""
        if not self.is_aligned(other):
            return False
        return all(
            a.value.tobytes() == b.value.tobytes() for a, b in zip(self._entries, other._entries)
        )

    # -- serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HI", VERSION, len(self._entries))]
        for e in self._entries:
            name = e.name.encode("utf-8")
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack("<BB", _TAG_CODES[e.tag], e.value.ndim))
            parts.append(struct.pack(f"<{e.value.ndim}I", *e.value.shape))
            parts.append(np.ascontiguousarray(e.value, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParameterBundle":
        view = memoryview(buf)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise BundleFormatError("truncated bundle")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise BundleFormatError("bad magic")
        version, count = struct.unpack("<HI", take(6))
        if version != VERSION:
            raise BundleFormatError(f"unsupported version {version}")
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = bytes(take(nlen)).decode("utf-8")
            code, rank = struct.unpack("<BB", take(2))
            if code not in _TAG_NAMES:
                raise BundleFormatError(f"bad tag byte {code} for {name}")
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            entries.append(Entry(name, data, _TAG_NAMES[code]))
        if pos != len(view):
            raise BundleFormatError("trailing bytes after last entry")
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterBundle":
        return cls.from_bytes(Path(path).read_bytes())


def stack_flat(bundles: list[ParameterBundle]) -> np.ndarray:
    """(n, d) matrix of flattened, positionally aligned bundles."""
    if not bundles:
        raise ValueError("no bundles to stack")
    ref = bundles[0].layout()
    for i, b in enumerate(bundles[1:], start=1):
        if b.layout() != ref:
            raise ValueError(f"bundle {i} is not aligned with bundle 0")
    return np.stack([b.flatten() for b in bundles])
