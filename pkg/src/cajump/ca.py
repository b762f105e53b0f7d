"""Two-phase cellular automaton on a periodic square lattice.

Cells are void (0) or solid (1). Face-connected groups of solid cells
(agglomerates) move rigidly each step to the reachable placement with the most
solid contacts; the reach of a group shrinks with its size::

    range(cell) = max(1, floor(sigma))
    range(ag)   = max(1, floor(sigma / mu ** (1 / d)))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cajump import _kernels
from cajump.rng import make_rng

Coord = tuple[int, int]


class InvalidCandidateError(ValueError):
    """A candidate placement overlaps solid cells it does not own."""


@dataclass(frozen=True)
class SimConfig:
    n: int
    porosity: float
    sigma: float
    iterations: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.porosity <= 1.0:
            raise ValueError(f"porosity must lie in [0, 1], got {self.porosity}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def solid_count(self) -> int:
        return round((1.0 - self.porosity) * self.n * self.n)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Immutable square grid of phases, stored row-major as uint8."""

    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.cells, dtype=np.uint8, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise ValueError(f"lattice must be a non-empty square grid, got shape {arr.shape}")
        if arr.size and arr.max() > 1:
            raise ValueError("lattice cells must be 0 or 1")
        arr.setflags(write=False)
        object.__setattr__(self, "cells", arr)

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    width = height = n

    @property
    def solid_count(self) -> int:
        return int(self.cells.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, Lattice):
            return NotImplemented
        return np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash(self.cells.tobytes())

    def __repr__(self):
        return f"Lattice(n={self.n}, solids={self.solid_count})"

    def to_text(self) -> str:
        rows = ["".join("1" if v else "0" for v in row) for row in self.cells]
        return "\n".join([str(self.n), *rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Lattice":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        n = int(lines[0])
        rows = lines[1 : n + 1]
        if len(rows) != n or any(len(r) != n or set(r) - {"0", "1"} for r in rows):
            raise ValueError(f"malformed lattice dump: expected {n} rows of {n} '0'/'1' characters")
        return cls(np.array([[int(ch) for ch in r] for r in rows], dtype=np.uint8))


@dataclass(frozen=True)
class Agglomerate:
    cells: frozenset

    @property
    def size(self) -> int:
        return len(self.cells)


def init_lattice(config: SimConfig, rng: np.random.Generator) -> Lattice:
    """Place ``round((1 - porosity) * n**2)`` solids uniformly without replacement."""
    total = config.n * config.n
    flat = np.zeros(total, dtype=np.uint8)
    flat[rng.permutation(total)[: config.solid_count]] = 1
    return Lattice(flat.reshape(config.n, config.n))


def vnn_offsets(r: int) -> list[Coord]:
    """All displacements with ``|dx| + |dy| <= r``, origin included."""
    if r < 0:
        raise ValueError(f"range must be >= 0, got {r}")
    return [(dx, dy) for dx in range(-r, r + 1) for dy in range(-(r - abs(dx)), r - abs(dx) + 1)]


def cell_range(sigma: float) -> int:
    return max(1, math.floor(sigma))


def agg_range(sigma: float, mu: int, d: int = 2) -> int:
    if mu < 1 or d < 1 or sigma < 0:
        raise ValueError(f"need sigma >= 0, mu >= 1, d >= 1; got {sigma}, {mu}, {d}")
    r = math.floor(sigma / mu ** (1.0 / d))
    # exact correction: r is the largest integer with r**d * mu <= sigma**d
    while (r + 1) ** d * mu <= sigma**d:
        r += 1
    while r > 0 and r**d * mu > sigma**d:
        r -= 1
    return max(1, r)


def find_agglomerates(lattice: Lattice) -> list[Agglomerate]:
    """Face-connected solid components under periodic wrap, in raster order."""
    _, starts, cells = _kernels.label_components(lattice.cells)
    n = lattice.n
    return [
        Agglomerate(frozenset((int(c) // n, int(c) % n) for c in cells[a:b]))
        for a, b in zip(starts[:-1], starts[1:])
    ]


def attractivity(lattice: Lattice, cells: Iterable[Coord], own: Iterable[Coord] = ()) -> int:
    """Number of solid cells face-adjacent to ``cells``.

    ``own`` lists the moving agglomerate's current cells; they are treated as
    lifted, so they neither block the placement nor count as neighbours.
    """
    n = lattice.n
    grid = lattice.cells
    placed = {(r % n, c % n) for r, c in cells}
    lifted = {(r % n, c % n) for r, c in own}
    for r, c in placed:
        if grid[r, c] and (r, c) not in lifted:
            raise InvalidCandidateError(f"candidate cell {(r, c)} overlaps a foreign solid")
    contacts = set()
    for r, c in placed:
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nb = ((r + dr) % n, (c + dc) % n)
            if nb not in placed and nb not in lifted and grid[nb]:
                contacts.add(nb)
    return len(contacts)


def step(lattice: Lattice, sigma: float, rng: np.random.Generator) -> Lattice:
    """One sweep: every agglomerate present at the start moves at most once.

    Agglomerates are visited in a random order. Each picks uniformly among the
    legal rigid displacements (targets void or its own cells) that maximise
    :func:`attractivity`; staying put is always a candidate.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    grid = np.array(lattice.cells, dtype=np.uint8, copy=True)
    _, starts, cells = _kernels.label_components(grid)
    count = starts.shape[0] - 1
    order = rng.permutation(count).astype(np.int64)
    draws = rng.random(count)
    _kernels.sweep(grid, starts, cells, order, draws, float(sigma))
    return Lattice(grid)


def simulate(config: SimConfig, *, trajectory: bool = False):
    """Initialise and run ``config.iterations`` steps from one seeded stream.

    With ``trajectory=True`` returns the list of lattices at t = 0..T.
    """
    rng = make_rng(config.seed)
    lat = init_lattice(config, rng)
    states = [lat]
    for _ in range(config.iterations):
        lat = step(lat, config.sigma, rng)
        if trajectory:
            states.append(lat)
    return states if trajectory else lat


def mean_contacts(lattice: Lattice) -> float:
    """Mean number of solid face-neighbours per solid cell."""
    return float(_kernels.solid_neighbour_mean(lattice.cells))


def write_text(lattice: Lattice, path) -> None:
    Path(path).write_text(lattice.to_text())


def read_text(path) -> Lattice:
    return Lattice.from_text(Path(path).read_text())


def lattice_from_cells(n: int, solids: Sequence[Coord]) -> Lattice:
    grid = np.zeros((n, n), dtype=np.uint8)
    for r, c in solids:
        grid[r % n, c % n] = 1
    return Lattice(grid)
