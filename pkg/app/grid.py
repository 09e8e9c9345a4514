"""Uniform staggered Lagrangian mesh on the unit sphere radius."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridMismatchError


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class Grid:
    """Cells of width ``dR``; ``r`` lives on edges, fields on midpoints."""

    M: int
    dR: float = field(init=False)
    edges: np.ndarray = field(init=False, repr=False)
    midpoints: np.ndarray = field(init=False, repr=False)
    volumes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        edges = np.arange(self.M + 1, dtype=float) / self.M
        midpoints = (edges[:-1] + edges[1:]) / 2.0
        # cell volume over 4*pi
        volumes = (edges[1:] ** 3 - edges[:-1] ** 3) / 3.0
        object.__setattr__(self, "dR", 1.0 / self.M)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "midpoints", _frozen(midpoints))
        object.__setattr__(self, "volumes", _frozen(volumes))

    @property
    def packet_heights(self) -> np.ndarray:
        """Concentration of a unit-mass packet spread over each cell."""
        return 1.0 / (4.0 * np.pi * self.volumes)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Return ``4*pi*sum(V_i * values_i)`` along the first axis."""
        return 4.0 * np.pi * np.tensordot(self.volumes, values, axes=(0, 0))

    def require_same(self, other: "Grid") -> None:
        if other.M != self.M:
            raise GridMismatchError(f"grid has M={other.M}, expected M={self.M}")


def build_grid(M: int) -> Grid:
    if isinstance(M, bool) or int(M) != M:
        raise ConfigError(f"M: expected an integer cell count, got {M!r}", key="M")
    if M < 3:
        raise ConfigError(f"M: need at least 3 cells, got {M}", key="M")
    return Grid(int(M))
