"""Benchmark geometries, boundary conditions and material presets.

Units are N, mm and MPa throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .material import MaterialParams, SmallStrainElastic, VonMisesLogStrain
from .mesh import Mesh, build_structured_mesh, merge_cells, mesh_from_elements
from .solver import DirichletBC, Discretization, LoadProgram, NeumannBC, PressureBC, Solution

STRAIN_HARDENING = MaterialParams(E=206.9e3, nu=0.29, H=129.2, sigma_y0=450.0, sigma_yinf=715.0, delta=16.93)
PERFECT_SPHERE = MaterialParams(E=28.85, nu=0.499, H=0.0, sigma_y0=6.0, sigma_yinf=6.0, delta=0.0)


@dataclass
class Benchmark:
    name: str
    mesh: Mesh
    params: MaterialParams
    program: LoadProgram
    reaction_tags: tuple[str, ...] = ()
    control: dict = field(default_factory=dict)
    small_strain: bool = False

    def model(self):
        return SmallStrainElastic(self.params) if self.small_strain else VonMisesLogStrain(self.params)


# ---------------------------------------------------------------------------
# Cook's membrane

COOK_LOAD = 5000.0          # total vertical force on the right edge (unit thickness)
COOK_POINT_A = (48.0, 60.0)


def cook_mesh(n: int, merge_fraction: float = 0.0, seed: int = 0) -> Mesh:
    """Tapered panel (0,0), (48,44), (48,60), (0,44) meshed with n x n quads."""
    def to_panel(x):
        xi, eta = x[:, 0], x[:, 1]
        bottom, top = 44.0 * xi, 44.0 + 16.0 * xi
        return np.column_stack([48.0 * xi, bottom + eta * (top - bottom)])

    mesh = build_structured_mesh("quad", (n, n), [[0.0, 0.0], [1.0, 1.0]]).transformed(to_panel)
    if merge_fraction > 0:
        mesh = merge_cells(mesh, merge_fraction, seed)
    return mesh


def cook(n: int, n_steps: int = 15, load: float = COOK_LOAD, merge_fraction: float = 0.0,
         seed: int = 0, params: MaterialParams = STRAIN_HARDENING) -> Benchmark:
    mesh = cook_mesh(n, merge_fraction, seed)
    traction = load / 16.0
    program = LoadProgram.uniform(
        n_steps,
        dirichlet=[DirichletBC("xmin", (0, 1))],
        neumann=[NeumannBC("xmax", lambda x, t: np.column_stack([np.zeros(len(x)), np.full(len(x), traction * t)]))],
    )
    return Benchmark("cook", mesh, params, program, ("xmin",),
                     {"point": COOK_POINT_A, "point_tag": "xmax", "load": load, "control": "load"})


# ---------------------------------------------------------------------------
# necking of a bar (quarter model)

NECKING_LENGTH = 53.334
NECKING_RADIUS = 6.413
NECKING_CENTER_RADIUS = 0.982 * 6.413


def necking_mesh(nx: int = 20, ny: int = 20) -> Mesh:
    """Quarter of the bar: x in [0, r(y)], y in [0, L/2], radius reduced linearly toward y=0."""
    half = NECKING_LENGTH / 2.0

    def shape(x):
        xi, eta = x[:, 0], x[:, 1]
        r = NECKING_CENTER_RADIUS + (NECKING_RADIUS - NECKING_CENTER_RADIUS) * eta
        return np.column_stack([xi * r, eta * half])

    return build_structured_mesh("quad", (nx, ny), [[0.0, 0.0], [1.0, 1.0]]).transformed(shape)


def necking(nx: int = 20, ny: int = 20, n_steps: int = 100, displacement: float = 5.0,
            params: MaterialParams = STRAIN_HARDENING) -> Benchmark:
    mesh = necking_mesh(nx, ny)
    program = LoadProgram.uniform(
        n_steps,
        dirichlet=[
            DirichletBC("xmin", (0,)),
            DirichletBC("ymin", (1,)),
            DirichletBC("ymax", (1,), lambda x, t: np.column_stack([np.zeros(len(x)), np.full(len(x), displacement * t)])),
        ],
    )
    return Benchmark("necking", mesh, params, program, ("ymax",),
                     {"displacement": displacement, "control": "displacement"})


# ---------------------------------------------------------------------------
# sphere under internal pressure (octant)

SPHERE_R_IN, SPHERE_R_OUT = 0.8, 1.0


def sphere_mesh(n: int = 13, layers: int = 3, r_in: float = SPHERE_R_IN, r_out: float = SPHERE_R_OUT) -> Mesh:
    """Octant of a thick spherical shell meshed with tetrahedra.

    The octant surface is a barycentric grid of the triangle (1,0,0), (0,1,0),
    (0,0,1) projected onto the sphere; it is extruded radially into ``layers``
    prism layers, each prism split into three tetrahedra.  Quad-face
    diagonals always join the lower-index surface vertex on the inner layer
    to the higher-index one on the outer layer, which keeps the split
    conforming.  Gives 3 n^2 layers tetrahedra (1521 for the defaults, with
    cells of comparable radial and tangential size).
    """
    index = {}
    surf = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            index[(i, j)] = len(surf)
            k = n - i - j
            p = np.array([i, j, k], float)
            surf.append(p / np.linalg.norm(p))
    surf = np.array(surf)
    tris = []
    for i in range(n):
        for j in range(n - i):
            a, b, c = index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]
            tris.append((a, b, c))
            if i + j < n - 1:
                tris.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    ns = len(surf)
    radii = np.linspace(r_in, r_out, layers + 1)
    vertices = np.vstack([r * surf for r in radii])
    elements = []
    for s in range(layers):
        for tri in tris:
            a, b, c = sorted(tri)
            a0, b0, c0 = (s * ns + v for v in (a, b, c))
            a1, b1, c1 = ((s + 1) * ns + v for v in (a, b, c))
            elements += [(a0, b0, c0, c1), (a0, b0, b1, c1), (a0, a1, b1, c1)]
    mesh = mesh_from_elements(vertices, elements, "tet")
    tol = 1e-10

    def tagger(face):
        p = face.points
        for axis, name in enumerate(("xsym", "ysym", "zsym")):
            if np.all(np.abs(p[:, axis]) < tol):
                return name
        r = np.linalg.norm(p, axis=1)
        if np.all(np.abs(r - r_in) < tol):
            return "inner"
        if np.all(np.abs(r - r_out) < tol):
            return "outer"
        return None

    return mesh.retag(tagger)


def sphere(n: int = 13, layers: int = 3, n_steps: int = 15, pressure: float = 2.678,
           follower: bool = False, params: MaterialParams = PERFECT_SPHERE) -> Benchmark:
    mesh = sphere_mesh(n, layers)
    program = LoadProgram.uniform(
        n_steps,
        dirichlet=[DirichletBC("xsym", (0,)), DirichletBC("ysym", (1,)), DirichletBC("zsym", (2,))],
        pressure=[PressureBC("inner", lambda t: pressure * t, follower)],
    )
    return Benchmark("sphere", mesh, params, program, ("xsym",),
                     {"pressure": pressure, "control": "pressure", "follower": follower})


def limit_pressure_small_strain(params: MaterialParams = PERFECT_SPHERE,
                                r_in: float = SPHERE_R_IN, r_out: float = SPHERE_R_OUT) -> float:
    """Thick-sphere limit pressure 2 sigma_y ln(r_out / r_in) for perfect plasticity."""
    return 2.0 * params.sigma_y0 * np.log(r_out / r_in)


# ---------------------------------------------------------------------------
# plane-strain linear elasticity with a manufactured solution

def manufactured_fields(params: MaterialParams):
    lam, mu = params.lam, params.mu
    pi = np.pi

    def exact(x):
        sx, sy = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        cx, cy = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        return np.column_stack([sx * sy + x[:, 0] / (2 * lam), cx * cy + x[:, 1] / (2 * lam)])

    def force(x, t):
        sx, sy = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        cx, cy = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        return t * 2 * mu * pi ** 2 * np.column_stack([sx * sy, cx * cy])

    return exact, force


def manufactured(n: int, nu: float = 0.3, kind: str = "quad", E: float = 1.0) -> Benchmark:
    """Unit square, full Dirichlet boundary, body force balancing the exact field."""
    params = MaterialParams(E=E, nu=nu, H=0.0, sigma_y0=1e30, sigma_yinf=1e30, delta=0.0)
    exact, force = manufactured_fields(params)
    mesh = build_structured_mesh(kind, (n, n), [[0.0, 0.0], [1.0, 1.0]])
    program = LoadProgram(
        [0.0, 1.0],
        dirichlet=[DirichletBC(tag, (0, 1), lambda x, t: t * exact(x)) for tag in ("xmin", "xmax", "ymin", "ymax")],
        body_force=force,
    )
    return Benchmark("manufactured", mesh, params, program, control={"exact": exact}, small_strain=True)


# ---------------------------------------------------------------------------
# point evaluation

def face_displacement_at(disc: Discretization, u: Solution, point, tag: str | None = None) -> np.ndarray:
    """Displacement at a boundary point from the unknowns of the boundary face containing it."""
    point = np.asarray(point, float)
    best, best_dist = None, np.inf
    candidates = disc.mesh.boundary_faces() if tag is None else disc.mesh.faces_with_tag(tag)
    for f in candidates:
        face = disc.mesh.faces[f]
        dist = np.min(np.linalg.norm(face.points - point, axis=1))
        if dist < best_dist:
            best, best_dist = f, dist
    psi = disc.face_bases[best].eval(point[None])[0]
    coef = u.face[disc.face_dof_slice(best)].reshape(disc.d, disc.nbf)
    return coef @ psi
