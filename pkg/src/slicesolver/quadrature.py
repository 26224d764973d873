"""Surface quadrature of integrated aerodynamic quantities.

The continuous force integral over a closed surface,
F = sum over the surface of [-(p - p_inf) n + tau] dS, is approximated by the
point sum F = sum_i [-(p_i - p_inf) n_i + tau_i] dS_i with per-point cell
areas as quadrature weights. Drag and lift coefficients are the normalized
projections F.d / (rho v^2 A / 2). Discretization error falls with the number
of sampled points; the convergence helper fits the log-log rate against a
high-resolution reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .meshes import MeshBatch, gen_random_sphere_mesh, gen_sphere_mesh, manufactured_field


@dataclass
class FlowConstants:
    """Freestream reference values and force directions."""

    p_inf: float = 0.0
    rho_inf: float = 1.0
    v_inf: float = 1.0
    a_ref: float = float(np.pi)
    drag_dir: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    lift_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.drag_dir = np.asarray(self.drag_dir, dtype=np.float64)
        self.lift_dir = np.asarray(self.lift_dir, dtype=np.float64)
        for name in ("rho_inf", "v_inf", "a_ref"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("drag_dir", "lift_dir"):
            v = getattr(self, name)
            if v.shape != (3,) or abs(float(np.linalg.norm(v)) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit 3-vector")

    @property
    def dynamic_pressure_area(self) -> float:
        return 0.5 * self.rho_inf * self.v_inf ** 2 * self.a_ref


@dataclass
class ForceResult:
    force: np.ndarray
    cd: float
    cl: float


def integrate_force(mesh: MeshBatch, fc: FlowConstants,
                    pressure: np.ndarray | None = None,
                    shear: np.ndarray | None = None) -> ForceResult:
    """Quadrature of the surface force and its drag/lift coefficients.

    Pressure defaults to the first target column; shear to target columns
    2..4 when present, else zero.
    """
    if mesh.normals is None or mesh.areas is None:
        raise ValueError("integrate_force needs normals and areas on the mesh")
    if pressure is None:
        if mesh.targets is None or mesh.targets.shape[1] < 1:
            raise ValueError("no pressure field: pass pressure= or put it in targets column 1")
        pressure = mesh.targets[:, 0]
    pressure = np.asarray(pressure, dtype=np.float64).reshape(-1)
    if pressure.shape[0] != mesh.n:
        raise ShapeError(f"pressure has {pressure.shape[0]} values for {mesh.n} points")
    if shear is None:
        if mesh.targets is not None and mesh.targets.shape[1] >= 4:
            shear = mesh.targets[:, 1:4]
        else:
            shear = np.zeros((mesh.n, 3))
    shear = np.asarray(shear, dtype=np.float64)
    if shear.shape != (mesh.n, 3):
        raise ShapeError(f"shear must be ({mesh.n}, 3), got {shear.shape}")

    w = mesh.areas[:, None]
    force = ((-(pressure - fc.p_inf)[:, None]) * mesh.normals * w + shear * w).sum(axis=0)
    q = fc.dynamic_pressure_area
    return ForceResult(force=force,
                       cd=float(force @ fc.drag_dir) / q,
                       cl=float(force @ fc.lift_dir) / q)


def reference_force(fc: FlowConstants,
                    field_fn: Callable[[np.ndarray], np.ndarray] = manufactured_field,
                    shear_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                    n: int = 1_000_000) -> ForceResult:
    """High-resolution quasi-uniform quadrature used as the convergence oracle."""
    mesh = gen_sphere_mesh(n)
    pressure = np.asarray(field_fn(mesh.coords)).reshape(-1)
    shear = None if shear_fn is None else shear_fn(mesh.coords, mesh.normals)
    return integrate_force(mesh, fc, pressure=pressure, shear=shear)


@dataclass
class ConvergenceResult:
    sizes: list[int]
    errors: list[float]   # RMS absolute error over repeats, per size
    slope: float          # least-squares slope in log10-log10 space
    reference: float


def quadrature_convergence(sizes: Sequence[int], fc: FlowConstants,
                           field_fn: Callable[[np.ndarray], np.ndarray] = manufactured_field,
                           quantity: str = "cd",
                           repeats: int = 16, seed: int = 0,
                           reference_n: int = 1_000_000) -> ConvergenceResult:
    """Error of the sampled estimate vs the reference, with a fitted rate.

    Sampling is area-uniform random on the sphere; errors are RMS over
    `repeats` independent draws so the fitted slope reflects the expected
    Monte-Carlo rate (about -1/2 on a 2-manifold). Exactly-zero errors are
    excluded from the fit.
    """
    sizes = sorted(int(s) for s in sizes)
    if len(sizes) < 3 or sizes[-1] < 10 * sizes[0]:
        raise ValueError("need at least 3 sizes spanning at least one decade")

    def estimate(mesh: MeshBatch) -> float:
        pressure = np.asarray(field_fn(mesh.coords)).reshape(-1)
        if quantity == "cd":
            return integrate_force(mesh, fc, pressure=pressure).cd
        if quantity == "integral":
            return float((pressure * mesh.areas).sum())
        raise ValueError(f"unknown quantity {quantity!r}")

    if quantity == "cd":
        ref = reference_force(fc, field_fn, n=reference_n).cd
    else:
        ref = estimate(gen_sphere_mesh(reference_n))

    rng = np.random.Generator(np.random.PCG64(seed))
    errors = []
    for size in sizes:
        errs = [estimate(gen_random_sphere_mesh(size, rng)) - ref for _ in range(repeats)]
        errors.append(float(np.sqrt(np.mean(np.square(errs)))))

    pts = [(s, e) for s, e in zip(sizes, errors) if e > 0.0]
    if len(pts) >= 2:
        xs = np.log10([p[0] for p in pts])
        ys = np.log10([p[1] for p in pts])
        slope = float(np.polyfit(xs, ys, 1)[0])
    else:
        slope = float("nan")
    return ConvergenceResult(sizes=list(sizes), errors=errors, slope=slope, reference=ref)
