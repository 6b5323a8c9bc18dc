"""Structured quadrilateral meshes on axis-aligned rectangles.

Nodes are numbered with the x index running fastest, elements counterclockwise
starting from the lower-left corner, so element (i, j) touches nodes
``n, n+1, n+1+(nx+1), n+(nx+1)`` with ``n = j*(nx+1) + i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh construction arguments."""


class StructuredMesh:
    """Uniform mesh of ``nx * ny`` bilinear quadrilaterals.

    Parameters
    ----------
    nx, ny : int
        Number of elements along each axis (at least 1).
    origin : pair of float
        Coordinates of the lower-left corner.
    extent : pair of float
        Positive side lengths of the rectangle.
    """

    def __init__(self, nx, ny, origin=(0.0, 0.0), extent=(1.0, 1.0)):
        nx, ny = int(nx), int(ny)
        if nx < 1 or ny < 1:
            raise MeshError(f"element counts must be positive, got nx={nx}, ny={ny}")
        origin = np.asarray(origin, dtype=float)
        extent = np.asarray(extent, dtype=float)
        if origin.shape != (2,) or extent.shape != (2,):
            raise MeshError("origin and extent must be length-2 sequences")
        if not np.all(extent > 0.0):
            raise MeshError(f"extent must be positive, got {extent}")

        self.nx = nx
        self.ny = ny
        self.origin = origin
        self.extent = extent
        self.hx = extent[0] / nx
        self.hy = extent[1] / ny

        xs = origin[0] + self.hx * np.arange(nx + 1)
        ys = origin[1] + self.hy * np.arange(ny + 1)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        self.node_coords = np.column_stack([X.ravel(), Y.ravel()])

        # Counterclockwise connectivity, lower-left node first.
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
        n0 = (j * (nx + 1) + i).ravel()
        self.conn = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])

        ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
        self.boundary_mask = (
            (ii == 0) | (ii == nx) | (jj == 0) | (jj == ny)
        ).ravel()

        self._caches = {}

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self):
        return self.nx * self.ny

    @property
    def area(self):
        return float(self.extent[0] * self.extent[1])

    def node_index(self, i, j):
        """Global index of grid node (i, j)."""
        return j * (self.nx + 1) + i

    def cache(self, key, builder):
        """Memoize mesh-derived data (quadrature tables, scatter patterns)."""
        if key not in self._caches:
            self._caches[key] = builder()
        return self._caches[key]

    def __repr__(self):
        return (
            f"StructuredMesh(nx={self.nx}, ny={self.ny}, "
            f"origin={tuple(self.origin)}, extent={tuple(self.extent)})"
        )


def build_mesh(nx, ny, origin=(0.0, 0.0), extent=(1.0, 1.0)):
    """Construct a :class:`StructuredMesh`; see the class for conventions."""
    return StructuredMesh(nx, ny, origin=origin, extent=extent)


@dataclass
class Field:
    """Nodal scalar field on a structured mesh."""

    mesh: StructuredMesh
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.mesh.n_nodes)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise MeshError(
                f"field has {self.values.shape} values for {self.mesh.n_nodes} nodes"
            )

    def copy(self):
        return Field(self.mesh, self.values.copy())

    def __add__(self, other):
        return Field(self.mesh, self.values + np.asarray(getattr(other, "values", other)))

    def __sub__(self, other):
        return Field(self.mesh, self.values - np.asarray(getattr(other, "values", other)))

    def __mul__(self, scalar):
        return Field(self.mesh, self.values * float(scalar))

    __rmul__ = __mul__


def field_to_csv(field, path):
    """Write a nodal field as ``node_index,x,y,value`` rows.

    Values carry 17 significant digits so a round trip reproduces the
    float64 bit pattern. Newlines are LF regardless of platform.
    """
    mesh = field.mesh
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("node_index,x,y,value\n")
        for k in range(mesh.n_nodes):
            x, y = mesh.node_coords[k]
            fh.write(f"{k},{x:.17g},{y:.17g},{field.values[k]:.17g}\n")


def field_from_csv(mesh, path):
    """Read a field written by :func:`field_to_csv` back onto ``mesh``."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "node_index,x,y,value":
            raise MeshError(f"unexpected field CSV header: {header!r}")
        raw = np.loadtxt(fh, delimiter=",", ndmin=2)
    if raw.shape[0] != mesh.n_nodes or raw.shape[1] != 4:
        raise MeshError(
            f"field CSV has shape {raw.shape}, expected ({mesh.n_nodes}, 4)"
        )
    order = raw[:, 0].astype(int)
    if not np.array_equal(np.sort(order), np.arange(mesh.n_nodes)):
        raise MeshError("field CSV node indices are not a permutation of the mesh nodes")
    values = np.empty(mesh.n_nodes)
    values[order] = raw[:, 3]
    return Field(mesh, values)
