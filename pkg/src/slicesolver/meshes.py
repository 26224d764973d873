"""Synthetic surface meshes, manufactured fields, and mesh file I/O.

The mesh file format is a plain CSV with a header naming the columns:
``x,y,z[,nx,ny,nz][,area][,t1..tk]``. Reals are serialized with 17
significant digits so a float64 round-trips bit-exactly, and the reader can
stream the file in index-ordered chunks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .errors import MeshFormatError, ShapeError

Bounds = tuple[np.ndarray, np.ndarray]


@dataclass
class MeshBatch:
    """A sampled geometry: coordinates plus optional per-point attributes.

    `bounds` carries the coordinate min/max used for normalization so that
    subsets and inference queries normalize exactly like their source mesh.
    `indices` holds original point ids after subsetting.
    """

    coords: np.ndarray
    features: np.ndarray | None = None
    normals: np.ndarray | None = None
    areas: np.ndarray | None = None
    targets: np.ndarray | None = None
    indices: np.ndarray | None = None
    bounds: Bounds | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise ShapeError(f"coords must be 2-D, got {self.coords.shape}")
        if self.features is None:
            self.features = np.zeros((self.coords.shape[0], 0), dtype=np.float64)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def in_width(self) -> int:
        return self.coords.shape[1] + self.features.shape[1]

    def validate(self) -> None:
        n = self.n
        for name in ("features", "normals", "areas", "targets", "indices"):
            a = getattr(self, name)
            if a is not None and a.shape[0] != n:
                raise ShapeError(f"{name} has {a.shape[0]} rows, expected {n}")
        if self.normals is not None:
            norms = np.linalg.norm(self.normals, axis=1)
            err = float(np.abs(norms - 1.0).max())
            if err > 1e-9:
                raise ValueError(f"normals must be unit vectors (max deviation {err:.3e})")
        if self.areas is not None and (self.areas <= 0).any():
            raise ValueError("areas must be positive")

    def resolve_bounds(self) -> Bounds:
        if self.bounds is not None:
            return self.bounds
        return self.coords.min(axis=0), self.coords.max(axis=0)

    def take(self, idx: np.ndarray) -> "MeshBatch":
        """Row subset carrying all attributes, original ids, and bounds."""
        parent_ids = self.indices if self.indices is not None else np.arange(self.n)
        return MeshBatch(
            coords=self.coords[idx],
            features=self.features[idx],
            normals=None if self.normals is None else self.normals[idx],
            areas=None if self.areas is None else self.areas[idx],
            targets=None if self.targets is None else self.targets[idx],
            indices=np.asarray(parent_ids)[idx],
            bounds=self.resolve_bounds(),
        )

    def slice_rows(self, lo: int, hi: int) -> "MeshBatch":
        return self.take(np.arange(lo, hi))

    def with_bounds(self, bounds: Bounds) -> "MeshBatch":
        return replace(self, bounds=bounds)


def concat_meshes(parts: list[MeshBatch]) -> MeshBatch:
    if not parts:
        raise ValueError("no mesh chunks to concatenate")
    def cat(name):
        arrs = [getattr(p, name) for p in parts]
        if any(a is None for a in arrs):
            return None
        return np.concatenate(arrs, axis=0)
    return MeshBatch(coords=cat("coords"), features=cat("features"), normals=cat("normals"),
                     areas=cat("areas"), targets=cat("targets"), indices=cat("indices"),
                     bounds=parts[0].bounds)


# ---------------------------------------------------------------------------
# synthetic geometry


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gen_sphere_mesh(n_points: int, rng: np.random.Generator | None = None) -> MeshBatch:
    """Quasi-uniform unit-sphere mesh (Fibonacci lattice).

    Normals are exact (the points themselves); every quadrature weight is
    4*pi/n. Passing an rng applies a random rigid rotation to the lattice.
    """
    if n_points < 4:
        raise ValueError(f"need at least 4 points, got {n_points}")
    i = np.arange(n_points, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n_points
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    coords = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rng is not None:
        coords = coords @ _random_rotation(rng).T
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    areas = np.full(n_points, 4.0 * np.pi / n_points)
    return MeshBatch(coords=coords, normals=coords.copy(), areas=areas)


def gen_random_sphere_mesh(n_points: int, rng: np.random.Generator) -> MeshBatch:
    """Area-uniform random sample of the unit sphere (equal weights 4*pi/n)."""
    if n_points < 4:
        raise ValueError(f"need at least 4 points, got {n_points}")
    v = rng.standard_normal((n_points, 3))
    coords = v / np.linalg.norm(v, axis=1, keepdims=True)
    areas = np.full(n_points, 4.0 * np.pi / n_points)
    return MeshBatch(coords=coords, normals=coords.copy(), areas=areas)


def manufactured_field(coords: np.ndarray) -> np.ndarray:
    """Smooth scalar ground truth p(x, y, z) = sin(3x) cos(2y) + z^2, as (N, 1)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"manufactured_field expects (N, 3) coordinates, got {coords.shape}")
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    return (np.sin(3.0 * x) * np.cos(2.0 * y) + z ** 2)[:, None]


def manufactured_shear(coords: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Smooth tangential 3-vector field: a fixed vector field projected onto
    the local tangent plane."""
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    v = np.stack([np.sin(2.0 * y) + 0.5 * np.cos(z),
                  np.cos(x) - 0.3 * z,
                  np.sin(x + y)], axis=1)
    return v - (v * normals).sum(axis=1, keepdims=True) * normals


# ---------------------------------------------------------------------------
# file format


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _header_and_rows(mesh: MeshBatch) -> tuple[list[str], np.ndarray]:
    if mesh.coords.shape[1] != 3:
        raise ShapeError(f"mesh files store 3-D coordinates, got {mesh.coords.shape[1]} columns")
    cols = ["x", "y", "z"]
    blocks = [mesh.coords]
    if mesh.normals is not None:
        cols += ["nx", "ny", "nz"]
        blocks.append(mesh.normals)
    if mesh.areas is not None:
        cols += ["area"]
        blocks.append(mesh.areas[:, None])
    if mesh.targets is not None:
        cols += [f"t{i + 1}" for i in range(mesh.targets.shape[1])]
        blocks.append(mesh.targets)
    return cols, np.concatenate(blocks, axis=1)


def write_mesh(path, mesh: MeshBatch) -> None:
    cols, table = _header_and_rows(mesh)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in table:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _parse_header(line: str) -> tuple[bool, bool, int]:
    names = [c.strip() for c in line.strip().split(",")]
    if names[:3] != ["x", "y", "z"]:
        raise MeshFormatError(f"header must start with x,y,z, got {names[:3]}", line=1)
    rest = names[3:]
    has_normals = rest[:3] == ["nx", "ny", "nz"]
    if has_normals:
        rest = rest[3:]
    has_area = bool(rest) and rest[0] == "area"
    if has_area:
        rest = rest[1:]
    for k, name in enumerate(rest):
        if name != f"t{k + 1}":
            raise MeshFormatError(f"unexpected column {name!r} in header", line=1)
    return has_normals, has_area, len(rest)


def _rows_to_mesh(rows: np.ndarray, has_normals: bool, has_area: bool, n_targets: int) -> MeshBatch:
    c = 3
    coords = rows[:, :c]
    normals = None
    areas = None
    targets = None
    if has_normals:
        normals = rows[:, c:c + 3]
        c += 3
    if has_area:
        areas = rows[:, c]
        c += 1
    if n_targets:
        targets = rows[:, c:c + n_targets]
    return MeshBatch(coords=coords, normals=normals, areas=areas, targets=targets)


def _iter_rows(f: io.TextIOBase, n_cols: int) -> Iterator[np.ndarray]:
    for line_no, line in enumerate(f, start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise MeshFormatError(
                f"expected {n_cols} fields, got {len(parts)}", line=line_no)
        try:
            yield np.array([float(p) for p in parts], dtype=np.float64)
        except ValueError as e:
            raise MeshFormatError(f"unparseable value ({e})", line=line_no) from None


def read_mesh(path) -> MeshBatch:
    return concat_meshes(list(read_mesh_chunks(path, chunk_size=1 << 20)))


def read_mesh_chunks(path, chunk_size: int) -> Iterator[MeshBatch]:
    """Stream index-ordered chunks whose concatenation equals the whole file."""
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.strip():
            raise MeshFormatError("empty file (missing header)", line=1)
        has_normals, has_area, n_targets = _parse_header(header)
        n_cols = 3 + (3 if has_normals else 0) + (1 if has_area else 0) + n_targets
        buf: list[np.ndarray] = []
        any_rows = False
        for row in _iter_rows(f, n_cols):
            buf.append(row)
            any_rows = True
            if len(buf) == chunk_size:
                yield _rows_to_mesh(np.stack(buf), has_normals, has_area, n_targets)
                buf = []
        if buf:
            yield _rows_to_mesh(np.stack(buf), has_normals, has_area, n_targets)
        if not any_rows:
            # A header-only file is a legal empty mesh (e.g. an empty query set).
            yield _rows_to_mesh(np.zeros((0, n_cols)), has_normals, has_area, n_targets)
