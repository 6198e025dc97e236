"""Incompressible Neo-Hookean membrane elements over LR NURBS surfaces.

Unknowns are the Cartesian control points of the current configuration,
ordered like ``mesh.function_ids()``; weights stay those of the reference
mesh. An optional enclosed-volume constraint adds the pressure multiplier,
which acts as a follower pressure load on the surface.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from bezier_extract import operators_for
from config import config
from errors import (
    ConfigurationError,
    DegenerateElementError,
    LoadStepError,
    SingularGeometryError,
    SolverError,
)
from lr_kernel import TOL, LRFunction, LRMesh
from writers.tables import PRESSURE_HEADER, write_csv

logger = logging.getLogger(__name__)

EDGES = ("xi0", "xi1", "eta0", "eta1")
AXIS_VECTORS = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": np.array([0.0, 0.0, 1.0])}


# ----------------------------------------------------------------------
# constraint rules
# ----------------------------------------------------------------------


def on_edge(fn: LRFunction, edge: str, mesh: LRMesh) -> bool:
    """True if ``fn`` is non-zero on a parametric boundary edge (its end knots are repeated there)."""
    u0, u1, v0, v1 = mesh.domain
    p, q = mesh.degrees
    if edge == "xi0":
        return all(abs(k - u0) <= TOL for k in fn.kv_xi.knots[:p + 1])
    if edge == "xi1":
        return all(abs(k - u1) <= TOL for k in fn.kv_xi.knots[-(p + 1):])
    if edge == "eta0":
        return all(abs(k - v0) <= TOL for k in fn.kv_eta.knots[:q + 1])
    if edge == "eta1":
        return all(abs(k - v1) <= TOL for k in fn.kv_eta.knots[-(q + 1):])
    raise ConfigurationError(f"unknown edge '{edge}', expected one of {EDGES}")


@dataclass(frozen=True)
class EdgeConstraint:
    """Fix directions of every control point on an edge.

    ``"tangential"`` fixes the in-plane direction perpendicular to the
    control point's radius in the xy plane (radial motion stays free).
    """

    edge: str
    directions: Tuple[str, ...] = ("x", "y", "z")

    def vectors(self, point: np.ndarray) -> List[np.ndarray]:
        out = []
        for d in self.directions:
            if d == "tangential":
                r = np.array([point[0], point[1], 0.0])
                if np.linalg.norm(r) <= 1e-14:
                    out.extend([AXIS_VECTORS["x"], AXIS_VECTORS["y"]])
                else:
                    out.append(np.array([-r[1], r[0], 0.0]) / np.linalg.norm(r))
            elif d in AXIS_VECTORS:
                out.append(AXIS_VECTORS[d])
            else:
                raise ConfigurationError(f"unknown constraint direction '{d}'")
        return out


@dataclass(frozen=True)
class EdgeTie:
    """Tie functions on two opposite edges whose knot vectors along the edge match (periodic seam)."""

    edge_a: str
    edge_b: str


@dataclass(frozen=True)
class EdgeCollapse:
    """Tie all functions of a degenerate edge to one point (pole)."""

    edge: str


ConstraintRule = Union[EdgeConstraint, EdgeTie, EdgeCollapse]


def _along(edge: str) -> int:
    return 1 if edge.startswith("xi") else 0


def build_reduction(mesh: LRMesh, rules: Sequence[ConstraintRule]) -> sparse.csr_matrix:
    """
    Reduced-coordinate map P with dx = P du for the given constraint rules.

    Tied functions share one set of free coordinates; fixed directions are
    removed through the null space of their stacked direction vectors.

    Returns:
        P of shape (3n, m)
    """
    ids = mesh.function_ids()
    pos = {fid: k for k, fid in enumerate(ids)}
    parent = list(range(len(ids)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    fixed: Dict[int, List[np.ndarray]] = {k: [] for k in range(len(ids))}
    for rule in rules:
        if isinstance(rule, EdgeConstraint):
            for fid in ids:
                fn = mesh.functions[fid]
                if on_edge(fn, rule.edge, mesh):
                    fixed[pos[fid]].extend(rule.vectors(fn.point))
        elif isinstance(rule, EdgeTie):
            axis = _along(rule.edge_a)
            side_b = {}
            for fid in ids:
                fn = mesh.functions[fid]
                if on_edge(fn, rule.edge_b, mesh):
                    side_b[fn.knot_vector(axis).knots] = fid
            for fid in ids:
                fn = mesh.functions[fid]
                if not on_edge(fn, rule.edge_a, mesh):
                    continue
                partner = side_b.get(fn.knot_vector(axis).knots)
                if partner is None:
                    logger.error(f"No partner on {rule.edge_b} for {fn}")
                    raise ConfigurationError(f"edges {rule.edge_a}/{rule.edge_b} do not match for tying")
                union(pos[fid], pos[partner])
        elif isinstance(rule, EdgeCollapse):
            members = [pos[f] for f in ids if on_edge(mesh.functions[f], rule.edge, mesh)]
            for k in members[1:]:
                union(members[0], k)
        else:
            raise ConfigurationError(f"unsupported constraint rule {rule!r}")

    groups: Dict[int, List[int]] = {}
    for k in range(len(ids)):
        groups.setdefault(find(k), []).append(k)

    rows, cols, vals = [], [], []
    n_free = 0
    for root in sorted(groups):
        members = groups[root]
        directions = [v for k in members for v in fixed[k]]
        if directions:
            basis = linalg.null_space(np.array(directions))
            basis[np.abs(basis) < 1e-15] = 0.0
        else:
            basis = np.eye(3)
        m = basis.shape[1]
        for k in members:
            for c in range(3):
                for j in range(m):
                    if basis[c, j] != 0.0:
                        rows.append(3 * k + c)
                        cols.append(n_free + j)
                        vals.append(basis[c, j])
        n_free += m
    return sparse.csr_matrix((vals, (rows, cols)), shape=(3 * len(ids), n_free))


# ----------------------------------------------------------------------
# model and state
# ----------------------------------------------------------------------


@dataclass(eq=False)
class ElementData:
    """Reference quantities of one element at its quadrature points."""

    element_id: int
    bounds: Tuple[float, float, float, float]
    index: np.ndarray          # positions of supporting functions in the state
    N: np.ndarray              # (nq, ne) shape functions gamma*R
    dN: np.ndarray             # (nq, ne, 2) parametric derivatives
    wq: np.ndarray             # (nq,) parametric quadrature weights
    A_cov: np.ndarray          # (nq, 2, 2)
    A_con: np.ndarray
    dA: np.ndarray             # (nq,) reference area weights
    points: np.ndarray         # (nq, 2) parametric coordinates

    @property
    def dofs(self) -> np.ndarray:
        return (3 * self.index[:, None] + np.arange(3)[None, :]).ravel()


class MembraneModel:
    """
    Incompressible Neo-Hookean membrane on an LR NURBS reference mesh.

    Args:
        mu: Shear modulus (membrane stiffness, force per length)
        mesh: Reference mesh; its control points are the initial configuration
        constraints: Edge rules, re-evaluated whenever the mesh changes
        n_quad: Gauss points per direction
        prestretch: Homogeneous pre-stretch; the stress-free metric is G / prestretch**2
        closure_planes: Normals of planes through the origin that close the surface
        length_scale: L0 used to scale solver tolerances
    """

    def __init__(
        self,
        mu: float,
        mesh: LRMesh,
        constraints: Sequence[ConstraintRule] = (),
        n_quad: Tuple[int, int] = (5, 5),
        prestretch: float = 1.0,
        closure_planes: Sequence[Sequence[float]] = (),
        length_scale: float = 1.0,
    ):
        if mu <= 0:
            raise ConfigurationError(f"shear modulus must be positive, got {mu}")
        if prestretch <= 0:
            raise ConfigurationError(f"prestretch must be positive, got {prestretch}")
        self.mu = float(mu)
        self.mesh = mesh
        self.constraints = list(constraints)
        self.n_quad = tuple(n_quad)
        self.prestretch = float(prestretch)
        self.closure_planes = [np.asarray(n, dtype=float) for n in closure_planes]
        self.length_scale = float(length_scale)
        self._data: Optional[List[ElementData]] = None
        self._reduction: Optional[sparse.csr_matrix] = None
        self._revision = None

    def with_mesh(self, mesh: LRMesh) -> "MembraneModel":
        """Same material, constraints and closure on another reference mesh."""
        return MembraneModel(
            self.mu, mesh, self.constraints, self.n_quad, self.prestretch,
            self.closure_planes, self.length_scale,
        )

    def _refresh(self):
        if self._revision != self.mesh.revision or self._data is None:
            self._data = self._build_element_data()
            self._reduction = build_reduction(self.mesh, self.constraints)
            self._revision = self.mesh.revision

    def element_data(self) -> List[ElementData]:
        self._refresh()
        return self._data

    def reduction(self) -> sparse.csr_matrix:
        self._refresh()
        return self._reduction

    @property
    def n_dofs(self) -> int:
        return self.reduction().shape[1]

    def _build_element_data(self) -> List[ElementData]:
        ids = self.mesh.function_ids()
        pos = {fid: k for k, fid in enumerate(ids)}
        data = []
        for op in operators_for(self.mesh, self.n_quad):
            fns = [self.mesh.functions[f] for f in op.function_ids]
            weights = np.array([fn.weight for fn in fns])
            X = np.array([fn.point for fn in fns])
            N, dN = op.rational(weights)
            G = np.einsum("qia,ic->qac", dN, X)
            A_cov = np.einsum("qac,qbc->qab", G, G) / self.prestretch ** 2
            det_A = np.linalg.det(A_cov)
            if np.any(det_A <= 0):
                raise SingularGeometryError(f"reference metric is singular in element {op.element_id}")
            data.append(
                ElementData(
                    element_id=op.element_id,
                    bounds=op.bounds,
                    index=np.array([pos[f] for f in op.function_ids]),
                    N=N,
                    dN=dN,
                    wq=op.weights,
                    A_cov=A_cov,
                    A_con=np.linalg.inv(A_cov),
                    dA=op.weights * np.sqrt(det_A),
                    points=op.points,
                )
            )
        logger.debug(f"Element data built for {len(data)} elements ({len(ids)} functions)")
        return data


@dataclass
class SimState:
    """Converged (or trial) configuration of a load step."""

    cp_hom: np.ndarray                      # (n, 4) current homogeneous control points
    function_ids: List[int]
    pressure: float = 0.0
    step: int = 0
    volume_target: Optional[float] = None
    sphere_center: Optional[np.ndarray] = None
    iterations: int = 0
    residual_norm: float = 0.0

    @property
    def points(self) -> np.ndarray:
        return self.cp_hom[:, :3] / self.cp_hom[:, 3:4]

    @property
    def weights(self) -> np.ndarray:
        return self.cp_hom[:, 3]

    def with_points(self, points: np.ndarray, **changes) -> "SimState":
        cp = np.hstack([np.asarray(points) * self.weights[:, None], self.weights[:, None]])
        return replace(self, cp_hom=cp, **changes)

    def by_function(self) -> Dict[int, np.ndarray]:
        return {fid: self.cp_hom[k].copy() for k, fid in enumerate(self.function_ids)}


def state_from_mesh(
    model: MembraneModel,
    volume_target: Optional[float] = None,
    sphere_center: Optional[Sequence[float]] = None,
    step: int = 0,
) -> SimState:
    """Initial state: current configuration equal to the reference mesh geometry."""
    ids = model.mesh.function_ids()
    cp = np.array([model.mesh.functions[f].cp_hom for f in ids]).reshape(-1, 4)
    center = None if sphere_center is None else np.asarray(sphere_center, dtype=float)
    return SimState(cp.copy(), ids, 0.0, step, volume_target, center)


def current_surface_point(model: MembraneModel, state: SimState, xi: float, eta: float) -> np.ndarray:
    mesh = model.mesh
    pos = {fid: k for k, fid in enumerate(state.function_ids)}
    ids, values = mesh.basis(xi, eta)
    hom = values @ state.cp_hom[[pos[int(f)] for f in ids]]
    return hom[:3] / hom[3]


# ----------------------------------------------------------------------
# kinematics and constitutive law
# ----------------------------------------------------------------------


@dataclass
class MetricData:
    """Surface metrics at quadrature points."""

    a: np.ndarray        # (nq, 2, 3) covariant tangents
    a_cov: np.ndarray    # (nq, 2, 2)
    a_con: np.ndarray
    A_cov: np.ndarray
    A_con: np.ndarray
    J: np.ndarray        # (nq,)
    normal: np.ndarray   # (nq, 3) unit normals
    da: np.ndarray       # (nq,) current area weights
    dA: np.ndarray       # (nq,) reference area weights


def _metrics(ed: ElementData, x_e: np.ndarray) -> MetricData:
    a = np.einsum("qia,ic->qac", ed.dN, x_e)
    a_cov = np.einsum("qac,qbc->qab", a, a)
    det_a = np.linalg.det(a_cov)
    det_A = np.linalg.det(ed.A_cov)
    if not np.all(np.isfinite(det_a)) or np.any(det_a <= 0.0):
        logger.error(f"Degenerate current metric in element {ed.element_id}")
        raise DegenerateElementError(f"non-positive metric determinant in element {ed.element_id}")
    J = np.sqrt(det_a / det_A)
    cross = np.cross(a[:, 0], a[:, 1])
    norm = np.linalg.norm(cross, axis=1)
    return MetricData(
        a=a,
        a_cov=a_cov,
        a_con=np.linalg.inv(a_cov),
        A_cov=ed.A_cov,
        A_con=ed.A_con,
        J=J,
        normal=cross / norm[:, None],
        da=ed.wq * norm,
        dA=ed.dA,
    )


def metrics(model: MembraneModel, element_id: int, state: SimState) -> MetricData:
    """Metrics of one element of the model at all of its quadrature points."""
    ed = next(e for e in model.element_data() if e.element_id == element_id)
    return _metrics(ed, state.points[ed.index])


def kirchhoff_stress(m: MetricData, mu: float) -> np.ndarray:
    """tau^{ab} = mu (A^{ab} - a^{ab} / J^2), per reference area."""
    return mu * (m.A_con - m.a_con / (m.J ** 2)[:, None, None])


def membrane_stress(m: MetricData, mu: float) -> np.ndarray:
    """Contravariant Cauchy stress sigma^{ab} = tau^{ab} / J."""
    return kirchhoff_stress(m, mu) / m.J[:, None, None]


def _material_tensor(m: MetricData, mu: float) -> np.ndarray:
    ac = m.a_con
    C = (
        2.0 * np.einsum("qab,qgd->qabgd", ac, ac)
        + np.einsum("qag,qbd->qabgd", ac, ac)
        + np.einsum("qad,qbg->qabgd", ac, ac)
    )
    return mu * C / (m.J ** 2)[:, None, None, None, None]


def energy_density(m: MetricData, mu: float) -> np.ndarray:
    return 0.5 * mu * (np.einsum("qab,qab->q", m.A_con, m.a_cov) + m.J ** -2 - 3.0)


def _skew(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


@dataclass
class ElementTerms:
    element_id: int
    dofs: np.ndarray
    force: np.ndarray
    stiffness: np.ndarray
    energy: float
    volume: float = 0.0
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None


def element_terms(model: MembraneModel, ed: ElementData, x_e: np.ndarray, with_volume: bool) -> ElementTerms:
    """Internal force, tangent, energy and (optionally) volume terms of one element."""
    m = _metrics(ed, x_e)
    mu = model.mu
    tau = kirchhoff_stress(m, mu)
    w = m.dA
    ne = x_e.shape[0]
    force = np.einsum("q,qab,qia,qbc->ic", w, tau, ed.dN, m.a, optimize=True)
    k_geo = np.einsum("q,qab,qia,qjb->ij", w, tau, ed.dN, ed.dN, optimize=True)
    C = _material_tensor(m, mu)
    k_mat = np.einsum("q,qabgd,qia,qjg,qbc,qde->icje", w, C, ed.dN, ed.dN, m.a, m.a, optimize=True)
    stiffness = k_mat + np.einsum("ij,cd->icjd", k_geo, np.eye(3))
    terms = ElementTerms(
        element_id=ed.element_id,
        dofs=ed.dofs,
        force=force.ravel(),
        stiffness=stiffness.reshape(3 * ne, 3 * ne),
        energy=float(w @ energy_density(m, mu)),
    )
    if with_volume:
        terms.volume, terms.gradient, terms.hessian = _volume_terms(ed, x_e, m.a)
    return terms


def _volume_terms(ed: ElementData, x_e: np.ndarray, a: np.ndarray):
    wq = ed.wq
    N, N1, N2 = ed.N, ed.dN[:, :, 0], ed.dN[:, :, 1]
    a1, a2 = a[:, 0], a[:, 1]
    x = N @ x_e
    n = np.cross(a1, a2)
    volume = float(wq @ np.einsum("qc,qc->q", x, n)) / 3.0
    gradient = (
        np.einsum("q,qi,qc->ic", wq, N, n)
        + np.einsum("q,qi,qc->ic", wq, N1, np.cross(a2, x))
        + np.einsum("q,qi,qc->ic", wq, N2, np.cross(x, a1))
    ) / 3.0
    m2 = np.einsum("qj,qk->qjk", N1, N) - np.einsum("qj,qk->qjk", N, N1)
    m1 = np.einsum("qj,qk->qjk", N, N2) - np.einsum("qj,qk->qjk", N2, N)
    mx = np.einsum("qj,qk->qjk", N2, N1) - np.einsum("qj,qk->qjk", N1, N2)
    hessian = (
        np.einsum("q,qjk,qcd->jckd", wq, m2, _skew(a2))
        + np.einsum("q,qjk,qcd->jckd", wq, m1, _skew(a1))
        + np.einsum("q,qjk,qcd->jckd", wq, mx, _skew(x))
    ) / 3.0
    ne = x_e.shape[0]
    return volume, gradient.ravel(), hessian.reshape(3 * ne, 3 * ne)


def internal_force(model: MembraneModel, element_id: int, state: SimState) -> Tuple[np.ndarray, np.ndarray]:
    """(element force vector, global dof indices) of one element."""
    ed = next(e for e in model.element_data() if e.element_id == element_id)
    terms = element_terms(model, ed, state.points[ed.index], with_volume=False)
    return terms.force, terms.dofs


def _map_elements(model: MembraneModel, points: np.ndarray, with_volume: bool) -> List[ElementTerms]:
    data = model.element_data()

    def work(ed):
        return element_terms(model, ed, points[ed.index], with_volume)

    if config.assembly_workers > 1 and len(data) > 1:
        with ThreadPoolExecutor(max_workers=config.assembly_workers) as pool:
            return list(pool.map(work, data))
    return [work(ed) for ed in data]


def _check_closure(model: MembraneModel):
    if not model.closure_planes:
        logger.error("Enclosed volume requested for an open surface without closure planes")
        raise ConfigurationError("surface is open: declare closure planes through the origin")


def enclosed_volume(model: MembraneModel, state: SimState) -> Tuple[float, np.ndarray]:
    """
    Volume between the surface and its closure planes, with its gradient.

    The closure planes pass through the origin, so they add nothing to
    (1/3) * integral of x.n; only the membrane surface is integrated.
    """
    _check_closure(model)
    points = state.points
    volume = 0.0
    gradient = np.zeros(points.size)
    for ed in model.element_data():
        x_e = points[ed.index]
        a = np.einsum("qia,ic->qac", ed.dN, x_e)
        v, g, _ = _volume_terms(ed, x_e, a)
        volume += v
        np.add.at(gradient, ed.dofs, g)
    return volume, gradient


def strain_energy(model: MembraneModel, state: SimState) -> float:
    return float(sum(t.energy for t in _map_elements(model, state.points, False)))


# ----------------------------------------------------------------------
# assembly and Newton solver
# ----------------------------------------------------------------------


class ContactTerm(Protocol):
    def assemble(self, model: MembraneModel, state: SimState) -> Tuple[np.ndarray, sparse.csr_matrix]:
        """Contact force on the membrane (3n,) and its derivative d f_c / d x."""


@dataclass
class AssembledSystem:
    residual: np.ndarray
    tangent: sparse.csr_matrix
    energy: float
    volume: Optional[float] = None
    gradient: Optional[np.ndarray] = None
    contact_force: Optional[np.ndarray] = None


def assemble(model: MembraneModel, state: SimState, contact: Optional[ContactTerm] = None) -> AssembledSystem:
    """
    Residual R = f_int - p g - f_c and tangent dR/dx.

    The volume gradient g and the pressure terms are included only when the
    state carries a volume target.
    """
    points = state.points
    n = points.size
    with_volume = state.volume_target is not None
    if with_volume:
        _check_closure(model)
    results = _map_elements(model, points, with_volume)

    residual = np.zeros(n)
    gradient = np.zeros(n) if with_volume else None
    rows, cols, vals = [], [], []
    volume = 0.0
    energy = 0.0
    for t in results:
        np.add.at(residual, t.dofs, t.force)
        k = t.stiffness
        if with_volume:
            np.add.at(gradient, t.dofs, t.gradient)
            volume += t.volume
            k = k - state.pressure * t.hessian
        rows.append(np.repeat(t.dofs, t.dofs.size))
        cols.append(np.tile(t.dofs, t.dofs.size))
        vals.append(k.ravel())
        energy += t.energy
    tangent = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()

    if with_volume:
        residual -= state.pressure * gradient
    contact_force = None
    if contact is not None:
        contact_force, contact_tangent = contact.assemble(model, state)
        residual -= contact_force
        tangent = tangent - contact_tangent
    return AssembledSystem(
        residual=residual,
        tangent=tangent,
        energy=energy,
        volume=volume if with_volume else None,
        gradient=gradient,
        contact_force=contact_force,
    )


def net_force(model: MembraneModel, state: SimState) -> np.ndarray:
    """Sum of the internal nodal forces (zero for any self-equilibrated membrane state)."""
    residual = np.zeros(state.points.size)
    for t in _map_elements(model, state.points, False):
        np.add.at(residual, t.dofs, t.force)
    return residual.reshape(-1, 3).sum(axis=0)


@dataclass(frozen=True)
class StepControls:
    max_iterations: int = field(default_factory=lambda: config.newton_max_iterations)
    max_halvings: int = field(default_factory=lambda: config.newton_max_halvings)
    residual_tolerance: float = field(default_factory=lambda: config.residual_tolerance)
    volume_tolerance: float = field(default_factory=lambda: config.volume_tolerance)


def convergence_tolerances(model: MembraneModel, state: SimState, controls: StepControls) -> Tuple[float, float]:
    """
    Absolute force and volume tolerances. The volume tolerance is relative to
    the target volume, with L**3 as the floor for near-zero targets.
    """
    force_tol = controls.residual_tolerance * model.mu * model.length_scale ** 2
    scale = model.length_scale ** 3
    if state.volume_target is not None:
        scale = max(abs(state.volume_target), scale)
    return force_tol, controls.volume_tolerance * scale


def newton_solve(
    model: MembraneModel,
    state: SimState,
    controls: Optional[StepControls] = None,
    contact: Optional[ContactTerm] = None,
) -> SimState:
    """
    Solve for equilibrium at the targets stored in ``state``.

    Args:
        model: Membrane model
        state: Start configuration with volume target and sphere center
        controls: Iteration limits and tolerances
        contact: Optional contact contribution

    Returns:
        New converged state; ``state`` itself is never modified

    Raises:
        SolverError: no convergence, singular system or non-finite values
        DegenerateElementError: J <= 0 at a quadrature point
    """
    controls = controls or StepControls()
    P = model.reduction()
    m = P.shape[1]
    with_volume = state.volume_target is not None
    force_tol, volume_tol = convergence_tolerances(model, state, controls)
    points = state.points.copy()
    pressure = state.pressure

    for iteration in range(controls.max_iterations + 1):
        trial = state.with_points(points, pressure=pressure, iterations=iteration)
        system = assemble(model, trial, contact)
        reduced = P.T @ system.residual
        norm = float(np.linalg.norm(reduced))
        volume_error = abs(system.volume - state.volume_target) if with_volume else 0.0
        logger.debug(f"Newton iteration {iteration}: |R| = {norm:.3e}, |V - V_target| = {volume_error:.3e}")
        if not np.isfinite(norm) or not np.isfinite(volume_error):
            raise SolverError(f"non-finite residual at iteration {iteration}")
        if norm <= force_tol and volume_error <= volume_tol:
            return replace(trial, residual_norm=norm)
        if iteration == controls.max_iterations:
            break

        K = (P.T @ system.tangent @ P).tocsr()
        if with_volume:
            g = P.T @ system.gradient
            A = sparse.bmat([[K, sparse.csr_matrix(-g[:, None])], [sparse.csr_matrix(g[None, :]), None]])
            rhs = -np.append(reduced, system.volume - state.volume_target)
        else:
            A = K
            rhs = -reduced
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MatrixRankWarning)
            solution = np.atleast_1d(spsolve(A.tocsc(), rhs))
        if not np.all(np.isfinite(solution)):
            raise SolverError(f"singular tangent at iteration {iteration} ({m} reduced dofs)")
        points = points + (P @ solution[:m]).reshape(-1, 3)
        if with_volume:
            pressure += float(solution[m])

    raise SolverError(f"no convergence in {controls.max_iterations} iterations (|R| = {norm:.3e})")


def _blend(a, b, t):
    if a is None:
        return b
    if b is None:
        return a
    return (1.0 - t) * a + t * b


def solve_load_step(
    model: MembraneModel,
    state: SimState,
    volume_target: Optional[float] = None,
    sphere_center: Optional[Sequence[float]] = None,
    controls: Optional[StepControls] = None,
    contact: Optional[ContactTerm] = None,
) -> SimState:
    """
    Advance one load step, halving the increment on failure.

    The volume target and sphere center are interpolated between the state's
    values and the new ones. On final failure the caller's state is untouched.

    Raises:
        LoadStepError: after ``controls.max_halvings`` halvings
    """
    controls = controls or StepControls()
    v0 = state.volume_target
    v1 = volume_target if volume_target is not None else state.volume_target
    c0 = state.sphere_center
    c1 = np.asarray(sphere_center, dtype=float) if sphere_center is not None else state.sphere_center
    current = state
    done, increment, halvings = 0.0, 1.0, 0
    iterations = 0
    while done < 1.0 - 1e-14:
        t = min(1.0, done + increment)
        trial = replace(current, volume_target=_blend(v0, v1, t), sphere_center=_blend(c0, c1, t))
        try:
            current = newton_solve(model, trial, controls, contact)
            iterations += current.iterations
            done = t
        except (SolverError, DegenerateElementError, SingularGeometryError, np.linalg.LinAlgError) as exc:
            halvings += 1
            if halvings > controls.max_halvings:
                logger.error(f"Load step {state.step + 1} failed after {controls.max_halvings} halvings: {exc}")
                raise LoadStepError(f"load step {state.step + 1} failed: {exc}") from exc
            increment *= 0.5
            logger.info(f"Step {state.step + 1}: {exc}; halving increment to {increment:g}")
    return replace(current, step=state.step + 1, iterations=iterations)


def write_step_csv(path: Union[str, Path], rows: Sequence[Sequence]) -> Path:
    """Per-step pressure table: step, V/V0, p*R/mu, analytic value, residual, iterations."""
    return write_csv(path, PRESSURE_HEADER, rows)
