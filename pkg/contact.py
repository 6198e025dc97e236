"""Frictionless penalty contact between the membrane and a rigid sphere."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import sparse

from errors import ConfigurationError, ProjectionError
from membrane_fem import ElementData, MembraneModel, SimState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RigidSphere:
    center: Tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError(f"sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def moved_to(self, center: Sequence[float]) -> "RigidSphere":
        return RigidSphere(tuple(center), self.radius)


@dataclass(frozen=True)
class ContactParams:
    """
    Penalty settings.

    Args:
        penalty: Base penalty eps_n0 (stress per length)
        degree: Spline degree p used in the element-size scaling
        base_lengths: Parametric element lengths (l0x, l0y) of the initial mesh
    """

    penalty: float
    degree: int
    base_lengths: Tuple[float, float]

    def __post_init__(self):
        if not self.penalty > 0:
            raise ConfigurationError(f"penalty must be positive, got {self.penalty}")
        if min(self.base_lengths) <= 0:
            raise ConfigurationError(f"base element lengths must be positive, got {self.base_lengths}")


def sphere_gap(x: Sequence[float], sphere: RigidSphere) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Signed normal gap of a point to the sphere surface.

    Returns:
        (g_n, n_p, x_p); g_n < 0 means the point penetrates the sphere
    """
    x = np.asarray(x, dtype=float)
    c = np.asarray(sphere.center)
    d = np.linalg.norm(x - c)
    if d <= 1e-14 * max(1.0, sphere.radius):
        raise ProjectionError(f"point {x} coincides with the sphere center")
    n = (x - c) / d
    return float(d - sphere.radius), n, c + sphere.radius * n


def _gaps(xq: np.ndarray, sphere: RigidSphere):
    c = np.asarray(sphere.center)
    r = xq - c
    d = np.linalg.norm(r, axis=1)
    if np.any(d <= 1e-14 * max(1.0, sphere.radius)):
        raise ProjectionError("quadrature point coincides with the sphere center")
    return d - sphere.radius, r / d[:, None], d


def element_penalty(params: ContactParams, lengths: Tuple[float, float]) -> float:
    """
    eps_el = eps0 * (l0x l0y / (lx ly))**(p - 1).

    Lengths are parametric element sizes, as are the base lengths. On the
    affine flat sheets of the contact runs this ratio equals the ratio of
    physical element sizes; on curved patches it is the parametric one.
    """
    lx, ly = lengths
    l0x, l0y = params.base_lengths
    return params.penalty * (l0x * l0y / (lx * ly)) ** (params.degree - 1)


@dataclass
class ElementContact:
    element_id: int
    dofs: np.ndarray
    force: np.ndarray
    active: np.ndarray
    tangent: Optional[np.ndarray]


def contact_force(
    ed: ElementData, x_e: np.ndarray, sphere: RigidSphere, params: ContactParams, with_tangent: bool = True
) -> ElementContact:
    """
    Penalty contact force of one element, integrated with the current area element.

    Returns:
        ElementContact with the force on the membrane dofs, the active flag per
        quadrature point and d f / d x (None when nothing is active)
    """
    ne = x_e.shape[0]
    xq = ed.N @ x_e
    g, n, d = _gaps(xq, sphere)
    active = g < 0.0
    if not np.any(active):
        return ElementContact(ed.element_id, ed.dofs, np.zeros(3 * ne), active, None)

    u0, u1, v0, v1 = ed.bounds
    eps = element_penalty(params, (u1 - u0, v1 - v0))
    a = np.einsum("qia,ic->qac", ed.dN, x_e)
    c = np.cross(a[:, 0], a[:, 1])
    jac = np.linalg.norm(c, axis=1)
    w = np.where(active, ed.wq, 0.0)
    traction = -eps * g[:, None] * n
    force = np.einsum("q,qi,qc->ic", w * jac, ed.N, traction)

    tangent = None
    if with_tangent:
        nn = np.einsum("qc,qd->qcd", n, n)
        proj = np.eye(3)[None] - nn
        dt_dx = -eps * (nn + (g / d)[:, None, None] * proj)
        c_hat = c / jac[:, None]
        dj1 = np.cross(a[:, 1], c_hat)
        dj2 = np.cross(c_hat, a[:, 0])
        k_traction = np.einsum("q,qi,qk,qcd->ickd", w * jac, ed.N, ed.N, dt_dx)
        k_area = np.einsum("q,qi,qc,qk,qd->ickd", w, ed.N, traction, ed.dN[:, :, 0], dj1) + np.einsum(
            "q,qi,qc,qk,qd->ickd", w, ed.N, traction, ed.dN[:, :, 1], dj2
        )
        tangent = (k_traction + k_area).reshape(3 * ne, 3 * ne)
    return ElementContact(ed.element_id, ed.dofs, force.ravel(), active, tangent)


class SphereContact:
    """Contact term for the Newton assembly; the sphere center is read from the state."""

    def __init__(self, radius: float, params: ContactParams):
        self.radius = float(radius)
        self.params = params

    def sphere(self, state: SimState) -> RigidSphere:
        if state.sphere_center is None:
            raise ConfigurationError("state carries no sphere center")
        return RigidSphere(tuple(state.sphere_center), self.radius)

    def element_contacts(self, model: MembraneModel, state: SimState, with_tangent: bool = True) -> List[ElementContact]:
        sphere = self.sphere(state)
        points = state.points
        return [contact_force(ed, points[ed.index], sphere, self.params, with_tangent) for ed in model.element_data()]

    def assemble(self, model: MembraneModel, state: SimState) -> Tuple[np.ndarray, sparse.csr_matrix]:
        n = state.points.size
        force = np.zeros(n)
        rows, cols, vals = [], [], []
        for ec in self.element_contacts(model, state):
            if ec.tangent is None:
                continue
            np.add.at(force, ec.dofs, ec.force)
            rows.append(np.repeat(ec.dofs, ec.dofs.size))
            cols.append(np.tile(ec.dofs, ec.dofs.size))
            vals.append(ec.tangent.ravel())
        if not vals:
            return force, sparse.csr_matrix((n, n))
        tangent = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        return force, tangent


def net_contact_force(
    model: MembraneModel, state: SimState, sphere: RigidSphere, params: ContactParams
) -> Tuple[np.ndarray, int]:
    """(sum of contact forces on the membrane, number of elements with contact)."""
    total = np.zeros(3)
    count = 0
    points = state.points
    for ed in model.element_data():
        ec = contact_force(ed, points[ed.index], sphere, params, with_tangent=False)
        if np.any(ec.active):
            count += 1
            total += ec.force.reshape(-1, 3).sum(axis=0)
    return total, count


def active_elements(model: MembraneModel, state: SimState, sphere: RigidSphere) -> Set[int]:
    """Elements with at least one penetrating quadrature point."""
    points = state.points
    out = set()
    for ed in model.element_data():
        g, _, _ = _gaps(ed.N @ points[ed.index], sphere)
        if np.any(g < 0.0):
            out.add(ed.element_id)
    return out


def max_penetration(model: MembraneModel, state: SimState, sphere: RigidSphere) -> float:
    deepest = 0.0
    points = state.points
    for ed in model.element_data():
        g, _, _ = _gaps(ed.N @ points[ed.index], sphere)
        deepest = max(deepest, float(-g.min()))
    return deepest


class SpherePath:
    """Piecewise-linear sphere center path with a number of load steps per leg."""

    def __init__(self, waypoints: Sequence[Sequence[float]], steps: Sequence[int]):
        self.waypoints = [np.asarray(w, dtype=float) for w in waypoints]
        self.steps = [int(s) for s in steps]
        if len(self.waypoints) < 2:
            raise ConfigurationError("a sphere path needs at least two waypoints")
        if len(self.steps) != len(self.waypoints) - 1 or min(self.steps) < 1:
            raise ConfigurationError(f"need one positive step count per leg, got {self.steps}")

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0].copy()

    def centers(self) -> List[np.ndarray]:
        """Sphere centers after each load step."""
        out = []
        for a, b, n in zip(self.waypoints, self.waypoints[1:], self.steps):
            for k in range(1, n + 1):
                out.append(a + (b - a) * k / n)
        return out

    def leg_of_step(self, step: int) -> int:
        """Leg index (0-based) of load step ``step`` (1-based)."""
        total = 0
        for leg, n in enumerate(self.steps):
            total += n
            if step <= total:
                return leg
        return len(self.steps) - 1

    def __len__(self):
        return sum(self.steps)
