"""Sparse rank-3 tensor storage, identifier indices and evaluation splits.

Observations live in coordinate (COO) form: an ``(n, 3)`` integer array of
``(i, j, k)`` coordinates plus a value vector. Tensors are immutable after
construction; per-mode fiber indices and the lookup index are built lazily
and cached, which is safe because nothing mutates the arrays afterwards.

Layer convention used throughout the package: ``k = 0`` holds the clinical
outcome labels, ``k >= 1`` hold the evidence layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError
from .io import atomic_write, format_float

Coord = tuple[int, int, int]


class Mode(IntEnum):
    TARGET = 0
    INDICATION = 1
    LAYER = 2


@dataclass(frozen=True)
class ModeIndex:
    """Bijection between domain identifiers and contiguous mode indices."""

    mode: Mode
    forward: dict[str, int]
    reverse: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.reverse)


def build_index(identifiers: Sequence[str], mode: Mode = Mode.TARGET) -> ModeIndex:
    """Deduplicate, sort lexicographically and assign indices from 0.

    Sorting before assignment makes tensors reproducible across runs and
    machines regardless of input file ordering.
    """
    if len(identifiers) == 0:
        raise DataError(f"empty mode: no identifiers for {mode.name}")
    unique = sorted(set(identifiers))
    forward = {ident: pos for pos, ident in enumerate(unique)}
    return ModeIndex(mode=mode, forward=forward, reverse=tuple(unique))


class SparseTensor:
    """Immutable COO tensor with values in [0, 1].

    Duplicate coordinates are rejected rather than overwritten: a duplicate
    means two curation sources disagreed about one cell, and that conflict
    must be resolved upstream, not silently here.
    """

    __slots__ = ("dims", "_coords", "_values", "_cache")

    def __init__(self, dims: Sequence[int], coords: np.ndarray, values: np.ndarray):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise DataError(f"dims must be three positive integers, got {dims}")
        coords = np.array(coords, dtype=np.int64, copy=True).reshape(-1, 3)
        values = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if coords.shape[0] != values.shape[0]:
            raise DataError("coordinate and value counts differ")
        if coords.size:
            if coords.min() < 0 or (coords >= np.asarray(dims)).any():
                raise DataError("coordinate out of range for dims")
            if not np.isfinite(values).all():
                raise DataError("non-finite value in tensor")
            if values.min() < 0.0 or values.max() > 1.0:
                raise DataError("tensor values must lie in [0, 1]")
            lin = self._linearize(coords, dims)
            order = np.argsort(lin, kind="stable")
            if lin.size > 1 and (np.diff(lin[order]) == 0).any():
                dup = coords[order[np.nonzero(np.diff(lin[order]) == 0)[0][0]]]
                raise DataError(f"duplicate coordinate {tuple(int(c) for c in dup)}")
        coords.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "_coords", coords)
        object.__setattr__(self, "_values", values)
        object.__setattr__(self, "_cache", {})

    def __setattr__(self, name, value):  # immutability guard
        raise AttributeError("SparseTensor is immutable")

    @staticmethod
    def _linearize(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
        return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]

    @classmethod
    def empty(cls, dims: Sequence[int]) -> "SparseTensor":
        return cls(dims, np.empty((0, 3), dtype=np.int64), np.empty(0))

    @classmethod
    def from_entries(cls, dims: Sequence[int], entries: Iterable[Sequence[float]]) -> "SparseTensor":
        rows = list(entries)
        coords = np.array([[r[0], r[1], r[2]] for r in rows], dtype=np.int64).reshape(-1, 3)
        values = np.array([r[3] for r in rows], dtype=np.float64)
        return cls(dims, coords, values)

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def n_entries(self) -> int:
        return int(self._values.shape[0])

    @property
    def density(self) -> float:
        return self.n_entries / (self.dims[0] * self.dims[1] * self.dims[2])

    def entries(self) -> Iterator[tuple[int, int, int, float]]:
        for (i, j, k), v in zip(self._coords, self._values):
            yield int(i), int(j), int(k), float(v)

    def insert(self, i: int, j: int, k: int, value: float) -> "SparseTensor":
        """Return a new tensor with one extra cell (duplicates are an error)."""
        coords = np.vstack([self._coords, np.array([[i, j, k]], dtype=np.int64)])
        values = np.append(self._values, value)
        return SparseTensor(self.dims, coords, values)

    def _lookup_index(self) -> tuple[np.ndarray, np.ndarray]:
        if "lookup" not in self._cache:
            lin = self._linearize(self._coords, self.dims)
            order = np.argsort(lin, kind="stable")
            self._cache["lookup"] = (lin[order], order)
        return self._cache["lookup"]

    def lookup(self, i: int, j: int, k: int) -> float | None:
        """Value at (i, j, k), or None if the cell is unobserved."""
        if not (0 <= i < self.dims[0] and 0 <= j < self.dims[1] and 0 <= k < self.dims[2]):
            raise DataError(f"coordinate ({i}, {j}, {k}) out of range for dims {self.dims}")
        lin_sorted, order = self._lookup_index()
        target = (i * self.dims[1] + j) * self.dims[2] + k
        pos = np.searchsorted(lin_sorted, target)
        if pos < lin_sorted.size and lin_sorted[pos] == target:
            return float(self._values[order[pos]])
        return None

    def fiber_index(self, mode: int) -> tuple[np.ndarray, np.ndarray]:
        """Sorted auxiliary index for per-fiber iteration along ``mode``.

        Returns ``(order, offsets)``: entry rows ``order[offsets[e]:offsets[e+1]]``
        are exactly the observed cells of entity ``e`` in that mode.
        """
        key = ("fiber", int(mode))
        if key not in self._cache:
            order = np.argsort(self._coords[:, mode], kind="stable")
            counts = np.bincount(self._coords[:, mode], minlength=self.dims[mode])
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._cache[key] = (order, offsets)
        return self._cache[key]

    def layer_entries(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates and values of one frontal slice."""
        mask = self._coords[:, 2] == layer
        return self._coords[mask], self._values[mask]

    def without_cells(self, cells: Iterable[Coord]) -> "SparseTensor":
        """Copy of the tensor with the given cells removed."""
        drop = set(cells)
        keep = np.array(
            [(int(i), int(j), int(k)) not in drop for i, j, k in self._coords], dtype=bool
        )
        return SparseTensor(self.dims, self._coords[keep], self._values[keep])


def select_layers(tensor: SparseTensor, keep: Sequence[int]) -> SparseTensor:
    """Subset the layer mode, renumbering kept layers to 0..len(keep)-1."""
    keep = [int(k) for k in keep]
    if len(set(keep)) != len(keep):
        raise DataError("layer selection contains duplicates")
    for k in keep:
        if not 0 <= k < tensor.dims[2]:
            raise DataError(f"layer {k} out of range")
    lut = np.full(tensor.dims[2], -1, dtype=np.int64)
    for new, old in enumerate(keep):
        lut[old] = new
    mask = np.isin(tensor.coords[:, 2], keep)
    coords = tensor.coords[mask].copy()
    coords[:, 2] = lut[coords[:, 2]]
    return SparseTensor((tensor.dims[0], tensor.dims[1], len(keep)), coords, tensor.values[mask])


@dataclass(frozen=True)
class CellSplit:
    """Disjoint train/held-out partition of one layer's observed cells."""

    train: frozenset[Coord]
    heldout: frozenset[Coord]
    seed: int

    def __post_init__(self):
        if self.train & self.heldout:
            raise DataError("train and heldout sets overlap")


def split_cells(
    tensor: SparseTensor, layer: int, heldout_fraction: float, seed: int
) -> CellSplit:
    """Stratified, seeded split of one layer's cells into train/held-out.

    Protocol (deterministic given ``seed``): cells are classed as positive
    (value >= 0.5) or negative, each class is sorted lexicographically by
    coordinate, and ``floor(n_class * fraction + 0.5)`` cells are drawn
    per class without replacement from one ``numpy`` PCG64 generator,
    positives first.
    """
    if not 0.0 < heldout_fraction < 1.0:
        raise DataError(f"heldout_fraction must be in (0, 1), got {heldout_fraction}")
    if not 0 <= layer < tensor.dims[2]:
        raise DataError(f"layer {layer} out of range")
    coords, values = tensor.layer_entries(layer)
    pos = [tuple(int(c) for c in xyz) for xyz, v in zip(coords, values) if v >= 0.5]
    neg = [tuple(int(c) for c in xyz) for xyz, v in zip(coords, values) if v < 0.5]
    if len(pos) < 2 or len(neg) < 2:
        raise DataError(
            f"insufficient class members in layer {layer}: {len(pos)} positive, {len(neg)} negative"
        )
    rng = np.random.default_rng(seed)
    heldout: set[Coord] = set()
    for cells in (sorted(pos), sorted(neg)):
        n_held = int(np.floor(len(cells) * heldout_fraction + 0.5))
        chosen = rng.choice(len(cells), size=n_held, replace=False)
        heldout.update(cells[c] for c in chosen)
    train = {tuple(int(c) for c in xyz) for xyz in coords} - heldout
    return CellSplit(train=frozenset(train), heldout=frozenset(heldout), seed=seed)


# --------------------------------------------------------------------------
# Serialization: a TSV of entries plus a JSON sidecar with dims and the
# three identifier sequences.

def save_tensor(
    tensor: SparseTensor,
    modes: Sequence[ModeIndex],
    tsv_path: str | Path,
    meta_path: str | Path,
) -> None:
    if len(modes) != 3:
        raise DataError("expected one ModeIndex per tensor mode")
    for mode_index, dim in zip(modes, tensor.dims):
        if len(mode_index) != dim:
            raise DataError(
                f"{mode_index.mode.name} index size {len(mode_index)} does not match dim {dim}"
            )
    with atomic_write(tsv_path) as handle:
        handle.write("i\tj\tk\tvalue\n")
        for i, j, k, v in tensor.entries():
            handle.write(f"{i}\t{j}\t{k}\t{format_float(v)}\n")
    meta = {
        "dims": list(tensor.dims),
        "modes": {
            "targets": list(modes[0].reverse),
            "indications": list(modes[1].reverse),
            "layers": list(modes[2].reverse),
        },
    }
    with atomic_write(meta_path) as handle:
        json.dump(meta, handle, indent=2)
        handle.write("\n")


def load_tensor(
    tsv_path: str | Path, meta_path: str | Path
) -> tuple[SparseTensor, tuple[ModeIndex, ModeIndex, ModeIndex]]:
    try:
        with open(meta_path, encoding="utf-8") as handle:
            meta = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read tensor metadata {meta_path}: {exc}") from exc
    dims = tuple(meta["dims"])
    modes = tuple(
        ModeIndex(
            mode=Mode(m),
            forward={ident: pos for pos, ident in enumerate(idents)},
            reverse=tuple(idents),
        )
        for m, idents in enumerate(
            (meta["modes"]["targets"], meta["modes"]["indications"], meta["modes"]["layers"])
        )
    )
    entries = []
    with open(tsv_path, encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n")
        if header.split("\t") != ["i", "j", "k", "value"]:
            raise DataError(f"unexpected tensor header in {tsv_path}: {header!r}")
        for lineno, line in enumerate(handle, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise DataError(f"{tsv_path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                entries.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise DataError(f"{tsv_path}:{lineno}: {exc}") from exc
    return SparseTensor.from_entries(dims, entries), modes
