"""Contact-driven local refinement and coarsening of the LR mesh.

Distances are measured in the parameter domain, per direction, as multiples
of element lengths: refinement and safety bands at depth d use the element
length of depth d-1 (base length / 2**(d-1)), the coarsening band uses the
base length.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import linalg

from contact import SphereContact, active_elements, net_contact_force
from errors import ConfigurationError, InterpolationError
from lr_kernel import TOL, LRMesh, Meshline, Orientation
from membrane_fem import MembraneModel, SimState, StepControls, solve_load_step
from writers.tables import EVENTS_HEADER, write_csv

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class AdaptiveParams:
    """
    Refinement control.

    Args:
        max_depth: Maximum refinement depth D
        d_ref: Refinement band, in element lengths of the previous depth
        d_safe: Safety band, in element lengths of the previous depth
        d_crs: Coarsening distance, in base element lengths
        base_lengths: Parametric element lengths (xi, eta) of the initial mesh
    """

    max_depth: int
    base_lengths: Tuple[float, float]
    d_ref: float = 3.0
    d_safe: float = 2.0
    d_crs: float = 4.0

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigurationError(f"max depth must be non-negative, got {self.max_depth}")
        if self.d_ref < 0 or self.d_safe < 0:
            raise ConfigurationError("d_ref and d_safe must be non-negative")
        if not self.d_crs > self.d_safe:
            raise ConfigurationError(f"d_crs ({self.d_crs}) must exceed d_safe ({self.d_safe})")
        if min(self.base_lengths) <= 0:
            raise ConfigurationError(f"base element lengths must be positive, got {self.base_lengths}")
        if self.max_depth > 0 and self.d_ref + self.d_safe / 2 ** (self.max_depth - 1) > self.d_crs:
            logger.warning(
                f"Refined patches reach beyond d_crs={self.d_crs} base lengths; "
                "expect a coarsening rebuild after most refinements"
            )

    def element_length(self, depth: int) -> Tuple[float, float]:
        """Element lengths after ``depth`` halvings."""
        return self.base_lengths[0] / 2 ** depth, self.base_lengths[1] / 2 ** depth

    def refine_band(self, depth: int) -> Tuple[float, float]:
        lx, ly = self.element_length(max(depth - 1, 0))
        return self.d_ref * lx, self.d_ref * ly

    def safety_band(self, depth: int) -> Tuple[float, float]:
        lx, ly = self.element_length(max(depth - 1, 0))
        return self.d_safe * lx, self.d_safe * ly

    def coarsen_band(self) -> Tuple[float, float]:
        return self.d_crs * self.base_lengths[0], self.d_crs * self.base_lengths[1]


class DepthMap(dict):
    """Element id -> refinement depth (both directions halved that many times)."""

    @property
    def max_depth(self) -> int:
        return max(self.values(), default=0)


def _axis_depth(length: float, base: float) -> int:
    return max(0, int(round(math.log2(base / length))))


def element_axis_depths(mesh: LRMesh, params: AdaptiveParams) -> Dict[int, Tuple[int, int]]:
    out = {}
    for eid, el in mesh.elements.items():
        hx, hy = el.size
        out[eid] = (_axis_depth(hx, params.base_lengths[0]), _axis_depth(hy, params.base_lengths[1]))
    return out


def element_depths(mesh: LRMesh, params: AdaptiveParams) -> DepthMap:
    return DepthMap({eid: min(d) for eid, d in element_axis_depths(mesh, params).items()})


def _gap(a: Box, b: Box) -> Tuple[float, float]:
    gx = max(0.0, b[0] - a[1], a[0] - b[1])
    gy = max(0.0, b[2] - a[3], a[2] - b[3])
    return gx, gy


def _within(box: Box, boxes: Sequence[Box], band: Tuple[float, float]) -> bool:
    """Inclusive: a box at exactly the band distance counts as within."""
    for other in boxes:
        gx, gy = _gap(box, other)
        if gx <= band[0] + TOL and gy <= band[1] + TOL:
            return True
    return False


def _overlaps(box: Box, boxes: Sequence[Box], band: Tuple[float, float]) -> bool:
    """True if the box interior meets one of the boxes dilated by ``band``."""
    for other in boxes:
        ox = min(box[1], other[1] + band[0]) - max(box[0], other[0] - band[0])
        oy = min(box[3], other[3] + band[1]) - max(box[2], other[2] - band[1])
        if ox > TOL and oy > TOL:
            return True
    return False


def contact_boxes(mesh: LRMesh, elements: Iterable[int]) -> List[Box]:
    return [mesh.elements[e].bounds for e in sorted(elements)]


def refinement_boxes(boxes: Iterable[Box], params: AdaptiveParams) -> List[Box]:
    """Contact boxes enlarged by the safety band of the deepest level."""
    sx, sy = params.safety_band(params.max_depth)
    return [(b[0] - sx, b[1] + sx, b[2] - sy, b[3] + sy) for b in boxes]


def contact_domain(model: MembraneModel, state: SimState, sphere) -> Set[int]:
    """Elements of the model's mesh with at least one penetrating quadrature point."""
    return active_elements(model, state, sphere)


# ----------------------------------------------------------------------
# refinement planning
# ----------------------------------------------------------------------


def _stop(mesh: LRMesh, orientation: Orientation, fixed: float, pos: float, step: int) -> Optional[float]:
    """Next admissible line endpoint beyond ``pos`` (step +1 upward, -1 downward)."""
    axis = orientation.axis
    spans = []
    for el in mesh.elements.values():
        lo, hi = el.range(axis)
        if lo - TOL <= fixed <= hi + TOL:
            spans.append(el.range(1 - axis))
    cuts = sorted({c for s in spans for c in s}, reverse=step < 0)
    for c in cuts:
        if (c - pos) * step <= TOL:
            continue
        if not any(a + TOL < c < b - TOL for a, b in spans):
            return c
    return None


def _extend(mesh: LRMesh, line: Meshline) -> Meshline:
    axis = line.orientation.axis
    need = mesh.degrees[1 - axis] + 1
    start, end = line.start, line.end
    upward = True
    while mesh.segments_along(line.orientation, line.fixed, start, end) < need:
        first, second = (1, -1) if upward else (-1, 1)
        moved = False
        for step in (first, second):
            stop = _stop(mesh, line.orientation, line.fixed, end if step > 0 else start, step)
            if stop is not None:
                if step > 0:
                    end = stop
                else:
                    start = stop
                moved = True
                break
        if not moved:
            break
        upward = not upward
    return Meshline(line.orientation, line.fixed, start, end, line.multiplicity)


def _merge_intervals(intervals: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    out: List[List[float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1] + TOL:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def plan_refinement(mesh: LRMesh, boxes: Sequence[Box], params: AdaptiveParams, depth: int) -> List[Meshline]:
    """
    Meshlines bisecting every element still coarser than ``depth`` whose
    interior meets the contact boxes enlarged by the depth's refinement band.

    Collinear midlines are joined, then each line is extended along existing
    element edges until it spans at least degree+1 elements. Horizontal lines
    come first in the returned list.
    """
    if depth < 1 or depth > params.max_depth or not boxes:
        return []
    band = params.refine_band(depth)
    axis_depths = element_axis_depths(mesh, params)
    candidates: Dict[Tuple[Orientation, float], List[Tuple[float, float]]] = {}
    for eid, el in mesh.elements.items():
        if not _overlaps(el.bounds, boxes, band):
            continue
        dx, dy = axis_depths[eid]
        cu, cv = el.center
        if dy < depth:
            candidates.setdefault((Orientation.HORIZONTAL, cv), []).append((el.u0, el.u1))
        if dx < depth:
            candidates.setdefault((Orientation.VERTICAL, cu), []).append((el.v0, el.v1))

    lines = []
    for (orientation, fixed), intervals in candidates.items():
        for a, b in _merge_intervals(intervals):
            lines.append(_extend(mesh, Meshline(orientation, fixed, a, b)))
    lines.sort(key=lambda m: (m.orientation is Orientation.VERTICAL, m.fixed, m.start))
    logger.debug(f"Depth {depth} plan: {len(lines)} lines")
    return lines


def apply_plan(mesh: LRMesh, lines: Sequence[Meshline]) -> LRMesh:
    for line in lines:
        mesh.insert_meshline(line)
    return mesh


def refine_to_depth(mesh: LRMesh, boxes: Sequence[Box], params: AdaptiveParams) -> LRMesh:
    """Plan and insert lines for depths 1..D against fixed contact boxes (mutates ``mesh``)."""
    for depth in range(1, params.max_depth + 1):
        apply_plan(mesh, plan_refinement(mesh, boxes, params, depth))
    return mesh


def needs_refine(mesh: LRMesh, contact: Set[int], params: AdaptiveParams) -> bool:
    """True if contact reaches an element coarser than D or lies within the safety band of one."""
    if not contact or params.max_depth == 0:
        return False
    depths = element_depths(mesh, params)
    D = params.max_depth
    if any(depths[e] < D for e in contact):
        return True
    coarse = [mesh.elements[e].bounds for e, d in depths.items() if d < D]
    band = params.safety_band(D)
    return any(_within(mesh.elements[e].bounds, coarse, band) for e in contact)


def needs_coarsen(mesh: LRMesh, contact: Set[int], params: AdaptiveParams) -> bool:
    """True if some refined element lies strictly farther than d_crs from the contact set."""
    depths = element_depths(mesh, params)
    refined = [e for e, d in depths.items() if d > 0]
    if not refined:
        return False
    if not contact:
        return True
    boxes = contact_boxes(mesh, contact)
    band = params.coarsen_band()
    return any(not _within(mesh.elements[e].bounds, boxes, band) for e in refined)


# ----------------------------------------------------------------------
# coarsening
# ----------------------------------------------------------------------


def _fit_samples(mesh: LRMesh) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for fid in mesh.function_ids():
        gx, gy = mesh.functions[fid].greville()
        xs.append(gx)
        ys.append(gy)
    for eid in mesh.element_ids():
        cx, cy = mesh.elements[eid].center
        xs.append(cx)
        ys.append(cy)
    return np.array(xs), np.array(ys)


def sample_current_surface(model: MembraneModel, state: SimState, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Current surface points at parameter points (rows of the rational collocation matrix)."""
    matrix = model.mesh.collocation(xi, eta, rational=True)
    pos = {fid: k for k, fid in enumerate(state.function_ids)}
    order = [pos[f] for f in model.mesh.function_ids()]
    return matrix @ state.points[order]


def fit_coarse(coarse_model: MembraneModel, samples_xi, samples_eta, targets: np.ndarray) -> np.ndarray:
    """
    Least-squares control points of the coarse mesh reproducing ``targets``,
    restricted to the constraint-admissible set x = X + P u.

    Raises:
        InterpolationError: if the fit system is rank deficient
    """
    mesh = coarse_model.mesh
    ids, reference, _ = mesh.control_points()
    M = mesh.collocation(samples_xi, samples_eta, rational=True)
    P = coarse_model.reduction().toarray()
    system = np.kron(M, np.eye(3)) @ P
    rhs = (targets - M @ reference).ravel()
    u, _, rank, _ = linalg.lstsq(system, rhs)
    if rank < system.shape[1]:
        raise InterpolationError(f"coarse fit is rank deficient ({rank} < {system.shape[1]})")
    return reference + (P @ u).reshape(-1, 3)


def refine_with_state(
    model: MembraneModel, state: SimState, boxes: Sequence[Box], params: AdaptiveParams
) -> Tuple[MembraneModel, SimState]:
    """Refine a copy of the model mesh toward the boxes, transporting the current configuration."""
    mesh = model.mesh.copy()
    mesh.set_fields({fid: cp[None, :] for fid, cp in state.by_function().items()})
    refine_to_depth(mesh, boxes, params)
    new_state = _state_from_fields(mesh, state)
    return model.with_mesh(mesh), new_state


def _state_from_fields(mesh: LRMesh, like: SimState) -> SimState:
    ids = mesh.function_ids()
    cp = np.array([mesh.functions[f].fields[0] for f in ids])
    mesh.clear_fields()
    return SimState(cp, ids, like.pressure, like.step, like.volume_target, like.sphere_center)


def coarsen_rebuild(
    model: MembraneModel,
    state: SimState,
    params: AdaptiveParams,
    base_mesh: LRMesh,
    contact: Set[int],
) -> Tuple[MembraneModel, SimState]:
    """
    Replace the mesh by the base mesh re-refined around the current contact.

    Steps: keep the current configuration and contact boxes; take the base
    reference mesh; fit its control points to the deformed surface; refine it
    toward the contact boxes and their safety band; recompute contact flags (frictionless, no history);
    copy control points of functions whose knot vectors, scaling and weight are
    unchanged. On a singular fit the old model and state are returned.
    """
    boxes = refinement_boxes(contact_boxes(model.mesh, contact), params)
    coarse = base_mesh.copy()
    coarse_model = model.with_mesh(coarse)
    xi, eta = _fit_samples(coarse)
    targets = sample_current_surface(model, state, xi, eta)
    try:
        fitted = fit_coarse(coarse_model, xi, eta, targets)
    except InterpolationError as exc:
        logger.warning(f"Coarsening aborted, keeping the current mesh: {exc}")
        return model, state

    ids = coarse.function_ids()
    weights = np.array([coarse.functions[f].weight for f in ids])
    coarse.set_fields({fid: np.append(x * w, w)[None, :] for fid, x, w in zip(ids, fitted, weights)})
    refine_to_depth(coarse, boxes, params)
    new_state = _state_from_fields(coarse, state)

    old = {model.mesh.functions[f].key: k for k, f in enumerate(state.function_ids)}
    recovered = 0
    for k, fid in enumerate(new_state.function_ids):
        fn = coarse.functions[fid]
        j = old.get(fn.key)
        if j is None:
            continue
        old_fn = model.mesh.functions[state.function_ids[j]]
        if abs(old_fn.gamma - fn.gamma) <= TOL and abs(old_fn.weight - fn.weight) <= TOL:
            new_state.cp_hom[k] = state.cp_hom[j]
            recovered += 1
    logger.info(
        f"Coarsened: {len(model.mesh.elements)} -> {len(coarse.elements)} elements, "
        f"{recovered}/{coarse.n_functions} control points recovered exactly"
    )
    return model.with_mesh(coarse), new_state


# ----------------------------------------------------------------------
# control loop
# ----------------------------------------------------------------------


@dataclass
class EventRecord:
    step: int
    event: str
    elements_before: int
    elements_after: int
    dofs_before: int
    dofs_after: int
    f_n: float
    f_t: float

    def row(self) -> list:
        return [self.step, self.event, self.elements_before, self.elements_after,
                self.dofs_before, self.dofs_after, self.f_n, self.f_t]


@dataclass
class StepResult:
    model: MembraneModel
    state: SimState
    events: List[str] = field(default_factory=list)
    f_n: float = 0.0
    f_t: float = 0.0
    active: int = 0


class AdaptiveDriver:
    """
    Runs load steps with contact-driven refine/coarsen events.

    Args:
        base_mesh: Unrefined reference mesh used to rebuild on coarsening
        params: Adaptive parameters
        contact: Sphere contact term
        controls: Newton controls
        adaptive: With False, steps are solved on the given mesh only
    """

    def __init__(
        self,
        base_mesh: LRMesh,
        params: AdaptiveParams,
        contact: SphereContact,
        controls: Optional[StepControls] = None,
        adaptive: bool = True,
    ):
        self.base_mesh = base_mesh.copy()
        self.params = params
        self.contact = contact
        self.controls = controls or StepControls()
        self.adaptive = adaptive
        self.events: List[EventRecord] = []
        self.adapt_seconds = 0.0
        self._solve_seconds = 0.0

    def forces(self, model: MembraneModel, state: SimState) -> Tuple[float, float, int]:
        total, count = net_contact_force(model, state, self.contact.sphere(state), self.contact.params)
        return float(-total[2]), float(total[0]), count

    def _record(self, step, event, before: MembraneModel, after: MembraneModel, f_n, f_t):
        record = EventRecord(
            step, event, len(before.mesh.elements), len(after.mesh.elements),
            before.n_dofs, after.n_dofs, f_n, f_t,
        )
        self.events.append(record)
        logger.info(
            f"Step {step}: {event} event, elements {record.elements_before} -> {record.elements_after}, "
            f"dofs {record.dofs_before} -> {record.dofs_after}"
        )

    def _solve(self, model: MembraneModel, state: SimState, center: Sequence[float]) -> SimState:
        started = time.perf_counter()
        solved = solve_load_step(model, state, sphere_center=center, controls=self.controls, contact=self.contact)
        self._solve_seconds += time.perf_counter() - started
        return solved

    def _refine_until_settled(self, model: MembraneModel, state: SimState, active: Set[int], sphere, center):
        """
        Refine and re-solve until contact no longer asks for refinement, at most
        max_depth + 1 rounds. Returns the model, the state solved on it, and the
        first round's model and forces (None when nothing was refined).
        """
        first = None
        for _ in range(self.params.max_depth + 1):
            if not needs_refine(model.mesh, active, self.params):
                break
            boxes = refinement_boxes(contact_boxes(model.mesh, active), self.params)
            new_model, new_state = refine_with_state(model, state, boxes, self.params)
            if len(new_model.mesh.elements) == len(model.mesh.elements):
                break
            if first is None:
                first = (model, *self.forces(model, state)[:2])
            model = new_model
            state = replace(self._solve(model, new_state, center), step=state.step)
            active = contact_domain(model, state, sphere)
        return model, state, first

    def adaptive_step(self, model: MembraneModel, state: SimState, center: Sequence[float]) -> StepResult:
        """
        Move the sphere to ``center``, solve, adapt the mesh if contact asks for
        it, and re-solve on the new mesh.

        Refinement repeats on the re-solved state until the contact domain is
        covered at full depth; the step logs one refine record with the counts
        before the first and after the last round.

        Raises:
            LoadStepError: the caller's model and state remain valid
        """
        solved = solve_load_step(model, state, sphere_center=center, controls=self.controls, contact=self.contact)
        step = solved.step
        events: List[str] = []
        if self.adaptive:
            started = time.perf_counter()
            self._solve_seconds = 0.0
            sphere = self.contact.sphere(solved)
            active = contact_domain(model, solved, sphere)
            current_model, current = model, solved
            coarsened = False
            if needs_coarsen(current_model.mesh, active, self.params):
                f_n, f_t, _ = self.forces(current_model, current)
                new_model, new_state = coarsen_rebuild(current_model, current, self.params, self.base_mesh, active)
                if new_model is not current_model:
                    self._record(step, "coarsen", current_model, new_model, f_n, f_t)
                    events.append("coarsen")
                    coarsened = True
                    current_model, current = new_model, new_state
                    active = contact_domain(current_model, current, sphere)
            current_model, current, first = self._refine_until_settled(
                current_model, current, active, sphere, center
            )
            if first is not None:
                before, f_n, f_t = first
                self._record(step, "refine", before, current_model, f_n, f_t)
                events.append("refine")
            elif coarsened:
                current = replace(self._solve(current_model, current, center), step=step)
            self.adapt_seconds += time.perf_counter() - started - self._solve_seconds
            if events:
                model, solved = current_model, current
        f_n, f_t, count = self.forces(model, solved)
        return StepResult(model, solved, events, f_n, f_t, count)

    def write_events(self, path) -> None:
        write_csv(path, EVENTS_HEADER, [e.row() for e in self.events])
