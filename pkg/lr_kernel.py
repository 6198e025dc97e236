"""LR NURBS surfaces with local refinement by meshline insertion.

Control points are stored in projective (homogeneous) form at all times:
``cp_hom = [x*w, y*w, z*w, w]``. Splitting and merging operate on these
4-vectors directly, so rational geometry is preserved by refinement.
"""

import bisect
import copy
import json
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import linalg

from errors import (
    AlignmentError,
    ConfigurationError,
    KnotVectorError,
    PrimitivityError,
    ProjectiveError,
    SingularGeometryError,
    SpanError,
    SplitError,
)

logger = logging.getLogger(__name__)

# Absolute tolerance for comparing knot values and meshline coordinates.
TOL = 1e-12

MESH_FORMAT_VERSION = 1


class Orientation(str, Enum):
    """Meshline orientation in the parameter domain.

    A vertical line sits at constant xi and inserts its knot into the xi
    knot vectors; a horizontal line sits at constant eta.
    """

    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"

    @property
    def axis(self) -> int:
        """Parametric axis receiving the knot (0 = xi, 1 = eta)."""
        return 0 if self is Orientation.VERTICAL else 1


@dataclass(frozen=True)
class LocalKnotVector:
    """The p+2 knots of one univariate B-spline."""

    knots: Tuple[float, ...]
    degree: int

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        p = self.degree
        if p < 0:
            raise KnotVectorError(f"degree must be non-negative, got {p}")
        if len(knots) != p + 2:
            raise KnotVectorError(f"degree {p} needs {p + 2} knots, got {len(knots)}")
        if any(b < a for a, b in zip(knots, knots[1:])):
            raise KnotVectorError(f"knots must be non-decreasing: {knots}")
        if not knots[0] < knots[-1]:
            raise KnotVectorError(f"knot vector has empty support: {knots}")
        if max(self.multiplicity(k) for k in knots) > p + 1:
            raise KnotVectorError(f"knot multiplicity exceeds {p + 1}: {knots}")

    @property
    def start(self) -> float:
        return self.knots[0]

    @property
    def end(self) -> float:
        return self.knots[-1]

    def multiplicity(self, value: float) -> int:
        return sum(1 for k in self.knots if abs(k - value) <= TOL)

    def spans(self) -> List[Tuple[float, float]]:
        """Non-empty knot spans, left to right."""
        return [(a, b) for a, b in zip(self.knots, self.knots[1:]) if b - a > TOL]

    def span_containing(self, lo: float, hi: float) -> Tuple[float, float]:
        """The knot span that contains the interval [lo, hi]."""
        for a, b in self.spans():
            if a <= lo + TOL and hi <= b + TOL:
                return a, b
        raise SpanError(f"[{lo}, {hi}] is not inside a single span of {self.knots}")

    def greville(self) -> float:
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[0] + self.knots[1])
        return float(np.mean(self.knots[1:p + 1]))


def eval_basis_1d(
    kv: LocalKnotVector,
    xi: Union[float, np.ndarray],
    from_right: Union[bool, np.ndarray] = False,
) -> Tuple[Union[float, np.ndarray], Union[float, np.ndarray]]:
    """
    Evaluate a local B-spline and its first derivative by Cox-de Boor recursion.

    Args:
        kv: Local knot vector of the function
        xi: Parameter value(s)
        from_right: Use right-closed spans, needed at the upper domain edge

    Returns:
        (value, derivative), scalars for scalar input; 0 outside the support
    """
    x = np.asarray(xi, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    right = np.broadcast_to(np.asarray(from_right, dtype=bool), x.shape)
    t = kv.knots
    p = kv.degree

    n = np.zeros((p + 1, x.size))
    for j in range(p + 1):
        lo, hi = t[j], t[j + 1]
        inside = np.where(right, (lo < x) & (x <= hi), (lo <= x) & (x < hi))
        n[j] = inside.astype(float)

    lower = n[:2].copy()
    for k in range(1, p + 1):
        if k == p:
            lower = n[:2].copy()
        for j in range(p + 1 - k):
            d1 = t[j + k] - t[j]
            d2 = t[j + k + 1] - t[j + 1]
            left = (x - t[j]) / d1 * n[j] if d1 > 0 else 0.0
            rgt = (t[j + k + 1] - x) / d2 * n[j + 1] if d2 > 0 else 0.0
            n[j] = left + rgt

    value = n[0]
    if p == 0:
        deriv = np.zeros_like(value)
    else:
        d1 = t[p] - t[0]
        d2 = t[p + 1] - t[1]
        deriv = (p / d1 * lower[0] if d1 > 0 else 0.0) - (p / d2 * lower[1] if d2 > 0 else 0.0)
        deriv = np.asarray(deriv) * np.ones_like(value)

    if scalar:
        return float(value[0]), float(deriv[0])
    return value.reshape(np.shape(xi)), deriv.reshape(np.shape(xi))


def to_projective(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cartesian control points and weights -> homogeneous [x*w, y*w, z*w, w]."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    if np.any(weights <= 0):
        raise ProjectiveError(f"weights must be positive, min is {weights.min()}")
    return np.hstack([points * weights[:, None], weights[:, None]])


def from_projective(cp_hom: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Homogeneous control points -> (Cartesian points, weights)."""
    cp_hom = np.atleast_2d(np.asarray(cp_hom, dtype=float))
    weights = cp_hom[:, 3]
    if np.any(weights <= 0):
        raise ProjectiveError(f"weights must be positive, min is {weights.min()}")
    return cp_hom[:, :3] / weights[:, None], weights.copy()


class LRFunction:
    """A scaled bivariate B-spline with a homogeneous control point.

    ``fields`` holds extra homogeneous 4-vectors (for example the current
    configuration x*w) that refinement treats exactly like ``cp_hom``.
    """

    def __init__(
        self,
        kv_xi: LocalKnotVector,
        kv_eta: LocalKnotVector,
        cp_hom: Sequence[float],
        gamma: float = 1.0,
        fields: Optional[np.ndarray] = None,
    ):
        self.id = -1
        self.kv_xi = kv_xi
        self.kv_eta = kv_eta
        self.cp_hom = np.asarray(cp_hom, dtype=float).copy()
        self.gamma = float(gamma)
        self.fields = np.zeros((0, 4)) if fields is None else np.asarray(fields, dtype=float).copy()
        if self.cp_hom.shape != (4,):
            raise ProjectiveError(f"cp_hom must be a 4-vector, got shape {self.cp_hom.shape}")
        if self.cp_hom[3] <= 0:
            raise ProjectiveError(f"weight must be positive, got {self.cp_hom[3]}")
        if not 0.0 < self.gamma <= 1.0 + TOL:
            raise SplitError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def key(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        return self.kv_xi.knots, self.kv_eta.knots

    @property
    def weight(self) -> float:
        return float(self.cp_hom[3])

    @property
    def point(self) -> np.ndarray:
        return self.cp_hom[:3] / self.cp_hom[3]

    @property
    def support(self) -> Tuple[float, float, float, float]:
        return self.kv_xi.start, self.kv_xi.end, self.kv_eta.start, self.kv_eta.end

    def knot_vector(self, axis: int) -> LocalKnotVector:
        return self.kv_xi if axis == 0 else self.kv_eta

    def greville(self) -> Tuple[float, float]:
        return self.kv_xi.greville(), self.kv_eta.greville()

    def evaluate(self, xi, eta, right_xi=False, right_eta=False):
        """Unscaled B, dB/dxi, dB/deta at the given points."""
        nx, dnx = eval_basis_1d(self.kv_xi, xi, right_xi)
        ny, dny = eval_basis_1d(self.kv_eta, eta, right_eta)
        return nx * ny, dnx * ny, nx * dny

    def copy(self) -> "LRFunction":
        clone = LRFunction(self.kv_xi, self.kv_eta, self.cp_hom, self.gamma, self.fields)
        clone.id = self.id
        return clone

    def __repr__(self):
        return f"LRFunction(id={self.id}, xi={self.kv_xi.knots}, eta={self.kv_eta.knots}, gamma={self.gamma:.6g})"


@dataclass(frozen=True)
class Meshline:
    """An axis-parallel line segment of the LR mesh."""

    orientation: Orientation
    fixed: float
    start: float
    end: float
    multiplicity: int = 1

    def __post_init__(self):
        object.__setattr__(self, "orientation", Orientation(self.orientation))
        if not self.start < self.end:
            raise AlignmentError(f"meshline span [{self.start}, {self.end}] is empty")
        if self.multiplicity < 1:
            raise PrimitivityError(f"multiplicity must be positive, got {self.multiplicity}")

    def collinear(self, other: "Meshline") -> bool:
        return self.orientation is other.orientation and abs(self.fixed - other.fixed) <= TOL

    def traverses(self, fn: LRFunction) -> bool:
        """True if the line fully crosses the open support of ``fn`` at a
        coordinate that is not already a knot of sufficient multiplicity."""
        axis = self.orientation.axis
        across = fn.knot_vector(axis)
        along = fn.knot_vector(1 - axis)
        if not across.start + TOL < self.fixed < across.end - TOL:
            return False
        if not (self.start <= along.start + TOL and along.end <= self.end + TOL):
            return False
        return across.multiplicity(self.fixed) < self.multiplicity


@dataclass(frozen=True)
class Element:
    """Axis-aligned parametric box [u0, u1] x [v0, v1]."""

    id: int
    u0: float
    u1: float
    v0: float
    v1: float

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return self.u0, self.u1, self.v0, self.v1

    @property
    def size(self) -> Tuple[float, float]:
        return self.u1 - self.u0, self.v1 - self.v0

    @property
    def center(self) -> Tuple[float, float]:
        return 0.5 * (self.u0 + self.u1), 0.5 * (self.v0 + self.v1)

    def range(self, axis: int) -> Tuple[float, float]:
        return (self.u0, self.u1) if axis == 0 else (self.v0, self.v1)


def split_function(
    fn: LRFunction, orientation: Orientation, value: float
) -> Tuple[LRFunction, LRFunction, float, float]:
    """
    Split a function by inserting one knot into one of its knot vectors.

    Args:
        fn: Function to split
        orientation: VERTICAL inserts into the xi vector, HORIZONTAL into eta
        value: Knot to insert, strictly inside the support

    Returns:
        (child1, child2, alpha1, alpha2) with gamma_j = alpha_j * gamma
    """
    axis = Orientation(orientation).axis
    kv = fn.knot_vector(axis)
    t = kv.knots
    p = kv.degree
    if not t[0] + TOL < value < t[-1] - TOL:
        raise SplitError(f"knot {value} is outside the open support ({t[0]}, {t[-1]})")
    if kv.multiplicity(value) + 1 > p + 1:
        raise SplitError(f"inserting {value} would exceed multiplicity {p + 1} in {t}")

    enlarged = list(t)
    enlarged.insert(bisect.bisect_right(enlarged, value), value)
    left = LocalKnotVector(tuple(enlarged[:p + 2]), p)
    right = LocalKnotVector(tuple(enlarged[1:]), p)

    if value >= t[p] - TOL:
        alpha1 = 1.0
    else:
        alpha1 = (value - t[0]) / (t[p] - t[0])
    if value > t[1] + TOL:
        alpha2 = (t[p + 1] - value) / (t[p + 1] - t[1])
    else:
        alpha2 = 1.0

    if axis == 0:
        kvs = ((left, fn.kv_eta), (right, fn.kv_eta))
    else:
        kvs = ((fn.kv_xi, left), (fn.kv_xi, right))
    child1 = LRFunction(kvs[0][0], kvs[0][1], fn.cp_hom, alpha1 * fn.gamma, fn.fields)
    child2 = LRFunction(kvs[1][0], kvs[1][1], fn.cp_hom, alpha2 * fn.gamma, fn.fields)
    return child1, child2, alpha1, alpha2


class LRMesh:
    """A locally refined parameter domain with its LR NURBS basis."""

    def __init__(self, p: int, q: int, domain: Tuple[float, float, float, float]):
        self.degrees = (int(p), int(q))
        self.domain = tuple(float(d) for d in domain)
        self.functions: Dict[int, LRFunction] = {}
        self.elements: Dict[int, Element] = {}
        self.meshlines: List[Meshline] = []
        self.revision = 0
        self._keys: Dict[tuple, int] = {}
        self._next_function = 0
        self._next_element = 0
        self._values: Tuple[List[float], List[float]] = ([], [])
        self._cache: Dict[str, object] = {}

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def from_tensor(
        cls,
        knots_xi: Sequence[float],
        knots_eta: Sequence[float],
        p: int,
        q: int,
        cp_hom: np.ndarray,
    ) -> "LRMesh":
        """
        Build the LR mesh of a tensor-product NURBS patch.

        Args:
            knots_xi, knots_eta: Open global knot vectors
            p, q: Degrees
            cp_hom: Homogeneous control points, shape (n_xi, n_eta, 4)

        Returns:
            LRMesh whose function ids run eta-fastest (id = i * n_eta + j)
        """
        kx = [float(k) for k in knots_xi]
        ky = [float(k) for k in knots_eta]
        nx, ny = len(kx) - p - 1, len(ky) - q - 1
        cp_hom = np.asarray(cp_hom, dtype=float)
        if cp_hom.shape != (nx, ny, 4):
            raise ConfigurationError(f"expected control net of shape {(nx, ny, 4)}, got {cp_hom.shape}")

        mesh = cls(p, q, (kx[0], kx[-1], ky[0], ky[-1]))
        for value in kx:
            mesh._snap(0, value)
        for value in ky:
            mesh._snap(1, value)

        for i in range(nx):
            kv_xi = LocalKnotVector(tuple(kx[i:i + p + 2]), p)
            for j in range(ny):
                kv_eta = LocalKnotVector(tuple(ky[j:j + q + 2]), q)
                mesh._add_function(LRFunction(kv_xi, kv_eta, cp_hom[i, j]))

        ux = sorted(set(kx))
        uy = sorted(set(ky))
        for a, b in zip(ux, ux[1:]):
            for c, d in zip(uy, uy[1:]):
                mesh._add_element(a, b, c, d)

        for value in ux[1:-1]:
            mesh.meshlines.append(Meshline(Orientation.VERTICAL, value, ky[0], ky[-1], kx.count(value)))
        for value in uy[1:-1]:
            mesh.meshlines.append(Meshline(Orientation.HORIZONTAL, value, kx[0], kx[-1], ky.count(value)))
        return mesh

    def copy(self) -> "LRMesh":
        return copy.deepcopy(self)

    def __getstate__(self):
        state = self.__dict__.copy()
        # caches hold locks and per-revision tables; copies rebuild them
        state["_cache"] = {}
        return state

    def _snap(self, axis: int, value: float) -> float:
        values = self._values[axis]
        pos = bisect.bisect_left(values, value)
        for idx in (pos - 1, pos):
            if 0 <= idx < len(values) and abs(values[idx] - value) <= TOL:
                return values[idx]
        values.insert(pos, float(value))
        return float(value)

    def _add_function(self, fn: LRFunction) -> int:
        fn.id = self._next_function
        self._next_function += 1
        self.functions[fn.id] = fn
        self._keys[fn.key] = fn.id
        return fn.id

    def _remove_function(self, fid: int):
        fn = self.functions.pop(fid)
        del self._keys[fn.key]

    def _add_element(self, u0, u1, v0, v1) -> int:
        el = Element(self._next_element, u0, u1, v0, v1)
        self._next_element += 1
        self.elements[el.id] = el
        return el.id

    def _touch(self):
        self.revision += 1
        self._cache.clear()

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    @property
    def n_functions(self) -> int:
        return len(self.functions)

    def function_ids(self) -> List[int]:
        return sorted(self.functions)

    def element_ids(self) -> List[int]:
        return sorted(self.elements)

    def find_function(self, kv_xi: LocalKnotVector, kv_eta: LocalKnotVector) -> Optional[LRFunction]:
        fid = self._keys.get((kv_xi.knots, kv_eta.knots))
        return None if fid is None else self.functions[fid]

    def _element_table(self) -> Tuple[np.ndarray, np.ndarray]:
        table = self._cache.get("elements")
        if table is None:
            ids = np.array(self.element_ids(), dtype=int)
            bounds = np.array([self.elements[i].bounds for i in ids], dtype=float).reshape(-1, 4)
            table = (ids, bounds)
            self._cache["elements"] = table
        return table

    def _support_table(self) -> Dict[int, List[int]]:
        table = self._cache.get("support")
        if table is None:
            eids, eb = self._element_table()
            fids = np.array(self.function_ids(), dtype=int)
            fb = np.array([self.functions[i].support for i in fids], dtype=float).reshape(-1, 4)
            overlap = (
                (fb[None, :, 0] < eb[:, None, 1] - TOL)
                & (fb[None, :, 1] > eb[:, None, 0] + TOL)
                & (fb[None, :, 2] < eb[:, None, 3] - TOL)
                & (fb[None, :, 3] > eb[:, None, 2] + TOL)
            )
            table = {int(e): [int(f) for f in fids[overlap[k]]] for k, e in enumerate(eids)}
            self._cache["support"] = table
        return table

    def element_support(self, element_id: int) -> List[int]:
        """Ids of the functions that are non-zero on the element."""
        return self._support_table()[element_id]

    def locate(self, xi: float, eta: float) -> int:
        """Id of the element containing (xi, eta); upper domain edges belong to the last element."""
        return int(self.locate_many(np.array([xi]), np.array([eta]))[0])

    def locate_many(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        ids, b = self._element_table()
        u0, u1, v0, v1 = self.domain
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if np.any((xi < u0 - TOL) | (xi > u1 + TOL) | (eta < v0 - TOL) | (eta > v1 + TOL)):
            raise SpanError("parameter point outside the domain")
        at_u1 = xi >= u1 - TOL
        at_v1 = eta >= v1 - TOL
        in_u = np.where(at_u1[:, None], b[None, :, 1] >= u1 - TOL, (b[None, :, 0] <= xi[:, None]) & (xi[:, None] < b[None, :, 1]))
        in_v = np.where(at_v1[:, None], b[None, :, 3] >= v1 - TOL, (b[None, :, 2] <= eta[:, None]) & (eta[:, None] < b[None, :, 3]))
        hit = in_u & in_v
        found = hit.any(axis=1)
        if not np.all(found):
            raise SpanError("parameter point not covered by any element")
        return ids[hit.argmax(axis=1)]

    def _right_flags(self, xi, eta):
        return np.asarray(xi) >= self.domain[1] - TOL, np.asarray(eta) >= self.domain[3] - TOL

    def basis(self, xi: float, eta: float, derivatives: bool = False):
        """
        Scaled B-spline basis gamma*B at one parameter point.

        Returns:
            (ids, values) or (ids, values, d_xi, d_eta)
        """
        eid = self.locate(xi, eta)
        ids = self.element_support(eid)
        rx, ry = self._right_flags(xi, eta)
        values = np.zeros(len(ids))
        dxi = np.zeros(len(ids))
        deta = np.zeros(len(ids))
        for k, fid in enumerate(ids):
            fn = self.functions[fid]
            b, bx, by = fn.evaluate(xi, eta, rx, ry)
            values[k] = fn.gamma * b
            dxi[k] = fn.gamma * bx
            deta[k] = fn.gamma * by
        if derivatives:
            return np.array(ids), values, dxi, deta
        return np.array(ids), values

    def rational_basis(self, xi: float, eta: float) -> Tuple[np.ndarray, np.ndarray]:
        """Scaled rational basis gamma*R at one parameter point."""
        ids, values = self.basis(xi, eta)
        w = np.array([self.functions[i].weight for i in ids])
        total = float(values @ w)
        if abs(total) < 1e-300:
            raise SingularGeometryError(f"weight function vanishes at ({xi}, {eta})")
        return ids, values * w / total

    def collocation(self, xi: np.ndarray, eta: np.ndarray, rational: bool = False) -> np.ndarray:
        """Dense matrix of gamma*B (or gamma*R) for points x functions, columns in function_ids() order."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        column = {fid: k for k, fid in enumerate(self.function_ids())}
        matrix = np.zeros((xi.size, len(column)))
        owners = self.locate_many(xi, eta)
        rx, ry = self._right_flags(xi, eta)
        for eid in np.unique(owners):
            rows = np.nonzero(owners == eid)[0]
            for fid in self.element_support(int(eid)):
                fn = self.functions[fid]
                b, _, _ = fn.evaluate(xi[rows], eta[rows], rx[rows], ry[rows])
                matrix[rows, column[fid]] = fn.gamma * b
        if rational:
            w = np.array([self.functions[f].weight for f in self.function_ids()])
            total = matrix @ w
            if np.any(np.abs(total) < 1e-300):
                raise SingularGeometryError("weight function vanishes at a collocation point")
            matrix = matrix * w[None, :] / total[:, None]
        return matrix

    def surface_point(self, xi: float, eta: float, derivatives: bool = False, field: Optional[int] = None):
        """
        Evaluate the surface x(xi, eta).

        Args:
            xi, eta: Parameter point inside the domain
            derivatives: Also return dx/dxi and dx/deta
            field: Evaluate an attached homogeneous field instead of cp_hom

        Returns:
            point, or (point, dx_dxi, dx_deta)
        """
        ids, values, dxi, deta = self.basis(xi, eta, derivatives=True)
        if field is None:
            cps = np.array([self.functions[i].cp_hom for i in ids])
        else:
            cps = np.array([self.functions[i].fields[field] for i in ids])
        hom = values @ cps
        w = hom[3]
        if abs(w) < 1e-300:
            raise SingularGeometryError(f"weight function vanishes at ({xi}, {eta})")
        x = hom[:3] / w
        if not derivatives:
            return x
        hx = dxi @ cps
        hy = deta @ cps
        return x, (hx[:3] - x * hx[3]) / w, (hy[:3] - x * hy[3]) / w

    def control_points(self) -> Tuple[List[int], np.ndarray, np.ndarray]:
        """(function ids, Cartesian points, weights)."""
        ids = self.function_ids()
        points, weights = from_projective(np.array([self.functions[i].cp_hom for i in ids]))
        return ids, points, weights

    def set_control_points(self, ids: Sequence[int], points: np.ndarray):
        """Move Cartesian control points, keeping the weights."""
        for fid, x in zip(ids, np.asarray(points, dtype=float)):
            fn = self.functions[fid]
            fn.cp_hom = np.append(x * fn.weight, fn.weight)

    def set_fields(self, fields: Dict[int, np.ndarray]):
        for fid, value in fields.items():
            self.functions[fid].fields = np.atleast_2d(np.asarray(value, dtype=float)).copy()

    def get_fields(self) -> Dict[int, np.ndarray]:
        return {fid: fn.fields.copy() for fid, fn in self.functions.items()}

    def clear_fields(self):
        for fn in self.functions.values():
            fn.fields = np.zeros((0, 4))

    def segments_along(self, orientation: Orientation, fixed: float, start: float, end: float) -> int:
        """Number of element edges a line (orientation, fixed, [start, end]) runs along."""
        axis = Orientation(orientation).axis
        cuts = {start, end}
        for el in self.elements.values():
            lo, hi = el.range(axis)
            a, b = el.range(1 - axis)
            if lo - TOL <= fixed <= hi + TOL and a < end - TOL and b > start + TOL:
                for c in (a, b):
                    if start + TOL < c < end - TOL:
                        cuts.add(c)
        return len(self._dedupe(sorted(cuts))) - 1

    @staticmethod
    def _dedupe(values: List[float]) -> List[float]:
        out: List[float] = []
        for v in values:
            if not out or v - out[-1] > TOL:
                out.append(v)
        return out

    def breakpoints(self, axis: int) -> List[float]:
        """Sorted distinct element boundary coordinates along one axis."""
        values = []
        for el in self.elements.values():
            values.extend(el.range(axis))
        return self._dedupe(sorted(values))

    # ------------------------------------------------------------------
    # refinement
    # ------------------------------------------------------------------

    def _is_full_span(self, line: Meshline) -> bool:
        axis = line.orientation.axis
        lo, hi = (self.domain[2], self.domain[3]) if axis == 0 else (self.domain[0], self.domain[1])
        return abs(line.start - lo) <= TOL and abs(line.end - hi) <= TOL

    def _check_alignment(self, line: Meshline):
        axis = line.orientation.axis
        lo, hi = (self.domain[0], self.domain[1]) if axis == 0 else (self.domain[2], self.domain[3])
        a, b = (self.domain[2], self.domain[3]) if axis == 0 else (self.domain[0], self.domain[1])
        if not lo + TOL < line.fixed < hi - TOL:
            raise AlignmentError(f"meshline at {line.fixed} is not strictly inside the domain")
        if line.start < a - TOL or line.end > b + TOL:
            raise AlignmentError(f"meshline span [{line.start}, {line.end}] leaves the domain")
        for el in self.elements.values():
            e_lo, e_hi = el.range(axis)
            if not e_lo - TOL <= line.fixed <= e_hi + TOL:
                continue
            s0, s1 = el.range(1 - axis)
            for end in (line.start, line.end):
                if s0 + TOL < end < s1 - TOL:
                    raise AlignmentError(
                        f"meshline endpoint {end} cuts element {el.id} {el.bounds}"
                    )

    def insert_meshline(self, line: Meshline) -> "LRMesh":
        """
        Insert a primitive meshline and refine the basis to minimal support.

        Functions fully traversed by the (merged) line are split; children are
        merged into identical existing functions or added as new ones, and the
        check-and-split loop runs until no function is traversed by any line.
        Mutates and returns the mesh.
        """
        axis = Orientation(line.orientation).axis
        line = Meshline(
            line.orientation,
            self._snap(axis, line.fixed),
            self._snap(1 - axis, line.start),
            self._snap(1 - axis, line.end),
            line.multiplicity,
        )
        self._check_alignment(line)
        degree_along = self.degrees[1 - axis]
        degree_across = self.degrees[axis]
        if line.multiplicity > degree_across + 1:
            raise PrimitivityError(f"multiplicity {line.multiplicity} exceeds {degree_across + 1}")

        collinear = [m for m in self.meshlines if m.collinear(line)]
        overlapping = [m for m in collinear if m.start < line.end - TOL and line.start < m.end - TOL]
        conflicts = [m for m in overlapping if m.multiplicity != line.multiplicity]
        raising = False
        if conflicts:
            same_span = (
                len(overlapping) == 1
                and abs(overlapping[0].start - line.start) <= TOL
                and abs(overlapping[0].end - line.end) <= TOL
            )
            if not (same_span and line.multiplicity == overlapping[0].multiplicity + 1):
                raise PrimitivityError(
                    "a line may either elongate or raise the multiplicity of an existing line, not both"
                )
            raising = True

        if raising:
            self.meshlines.remove(overlapping[0])
            merged = line
        else:
            joined = [m for m in collinear if m.multiplicity == line.multiplicity
                      and m.start <= line.end + TOL and line.start <= m.end + TOL]
            for m in joined:
                if m.start <= line.start + TOL and line.end <= m.end + TOL:
                    logger.debug(f"Meshline {line} already present, nothing to insert")
                    return self
            segments = self.segments_along(line.orientation, line.fixed, line.start, line.end)
            primitive = segments >= degree_along + 1 or self._is_full_span(line)
            if not primitive and joined:
                covered = 0
                for m in joined:
                    lo, hi = max(m.start, line.start), min(m.end, line.end)
                    if hi - lo > TOL:
                        covered += self.segments_along(line.orientation, line.fixed, lo, hi)
                primitive = segments - covered == 1
            if not primitive:
                raise PrimitivityError(
                    f"meshline {line} spans {segments} elements, needs {degree_along + 1} "
                    f"or a one-element elongation"
                )
            for m in joined:
                self.meshlines.remove(m)
            merged = Meshline(
                line.orientation,
                line.fixed,
                min([line.start] + [m.start for m in joined]),
                max([line.end] + [m.end for m in joined]),
                line.multiplicity,
            )
            self._split_elements(line)
        self.meshlines.append(merged)

        pending = deque(fid for fid, fn in self.functions.items() if merged.traverses(fn))
        n_split = 0
        while pending:
            fid = pending.popleft()
            fn = self.functions.get(fid)
            if fn is None:
                continue
            splitter = next((m for m in self.meshlines if m.traverses(fn)), None)
            if splitter is None:
                continue
            child1, child2, _, _ = split_function(fn, splitter.orientation, splitter.fixed)
            self._remove_function(fid)
            n_split += 1
            for child in (child1, child2):
                pending.append(self._add_or_merge(child))

        self._touch()
        logger.debug(
            f"Inserted {merged.orientation.value} line at {merged.fixed} "
            f"[{merged.start}, {merged.end}] x{merged.multiplicity}: {n_split} splits, "
            f"{len(self.functions)} functions, {len(self.elements)} elements"
        )
        return self

    def _add_or_merge(self, child: LRFunction) -> int:
        existing = self.find_function(child.kv_xi, child.kv_eta)
        if existing is None:
            return self._add_function(child)
        total = existing.gamma + child.gamma
        existing.cp_hom = (existing.cp_hom * existing.gamma + child.cp_hom * child.gamma) / total
        if existing.fields.size or child.fields.size:
            existing.fields = (existing.fields * existing.gamma + child.fields * child.gamma) / total
        existing.gamma = total
        return existing.id

    def _split_elements(self, line: Meshline):
        axis = line.orientation.axis
        for eid in list(self.elements):
            el = self.elements[eid]
            lo, hi = el.range(axis)
            a, b = el.range(1 - axis)
            if not (lo + TOL < line.fixed < hi - TOL):
                continue
            if a < line.start - TOL or b > line.end + TOL:
                continue
            del self.elements[eid]
            if axis == 0:
                self._add_element(el.u0, line.fixed, el.v0, el.v1)
                self._add_element(line.fixed, el.u1, el.v0, el.v1)
            else:
                self._add_element(el.u0, el.u1, el.v0, line.fixed)
                self._add_element(el.u0, el.u1, line.fixed, el.v1)

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------

    def validate(self):
        """Raise if an element is crossed by a meshline, a function lacks
        minimal support, or a scaling factor leaves (0, 1]."""
        for line in self.meshlines:
            axis = line.orientation.axis
            for el in self.elements.values():
                lo, hi = el.range(axis)
                a, b = el.range(1 - axis)
                if lo + TOL < line.fixed < hi - TOL and a < line.end - TOL and b > line.start + TOL:
                    raise AlignmentError(f"element {el.id} is crossed by {line}")
        for fn in self.functions.values():
            if not has_minimal_support(fn, self):
                raise SplitError(f"{fn} does not have minimal support")
            if not 0.0 < fn.gamma <= 1.0 + TOL:
                raise SplitError(f"{fn} has gamma outside (0, 1]")


def has_minimal_support(fn: LRFunction, mesh: LRMesh) -> bool:
    """True iff no meshline fully traverses the support of ``fn`` off its knot lines."""
    return not any(line.traverses(fn) for line in mesh.meshlines)


def insert_meshline(mesh: LRMesh, line: Meshline) -> LRMesh:
    return mesh.insert_meshline(line)


def surface_point(mesh: LRMesh, xi: float, eta: float, derivatives: bool = False):
    return mesh.surface_point(xi, eta, derivatives)


def greville_points(mesh: LRMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Greville abscissae of all functions, in function_ids() order."""
    pts = np.array([mesh.functions[f].greville() for f in mesh.function_ids()])
    return pts[:, 0], pts[:, 1]


def check_linear_independence(mesh: LRMesh, tol: float = 1e-10) -> bool:
    """
    Full-column-rank test of the collocation matrix of all scaled functions.

    Samples a (p+1) x (q+1) Gauss grid in every element (unisolvent for the
    element's polynomial space) plus every function's Greville point, then
    counts pivots of a column-pivoted QR above ``tol`` times the largest.
    """
    p, q = mesh.degrees
    gx, _ = np.polynomial.legendre.leggauss(p + 1)
    gy, _ = np.polynomial.legendre.leggauss(q + 1)
    xs, ys = [], []
    for el in mesh.elements.values():
        tx = el.u0 + 0.5 * (gx + 1.0) * (el.u1 - el.u0)
        ty = el.v0 + 0.5 * (gy + 1.0) * (el.v1 - el.v0)
        X, Y = np.meshgrid(tx, ty, indexing="ij")
        xs.append(X.ravel())
        ys.append(Y.ravel())
    gxs, gys = greville_points(mesh)
    xs.append(gxs)
    ys.append(gys)
    matrix = mesh.collocation(np.concatenate(xs), np.concatenate(ys))
    _, r, _ = linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return False
    rank = int(np.sum(diag > tol * diag[0]))
    logger.debug(f"Collocation rank {rank} for {mesh.n_functions} functions")
    return rank == mesh.n_functions


def refine_uniform(mesh: LRMesh, times: int = 1, axes: Iterable[int] = (0, 1)) -> LRMesh:
    """Bisect every span of the global breakpoint grid by full-span lines, ``times`` times."""
    axes = tuple(axes)
    for _ in range(times):
        for axis in axes:
            breaks = mesh.breakpoints(axis)
            orientation = Orientation.VERTICAL if axis == 0 else Orientation.HORIZONTAL
            lo, hi = (mesh.domain[2], mesh.domain[3]) if axis == 0 else (mesh.domain[0], mesh.domain[1])
            for a, b in zip(breaks, breaks[1:]):
                mesh.insert_meshline(Meshline(orientation, 0.5 * (a + b), lo, hi))
    return mesh


def refine_to_counts(mesh: LRMesh, nx: int, ny: int) -> LRMesh:
    """Uniformly bisect each direction until it has at least nx (ny) element spans."""
    while len(mesh.breakpoints(0)) - 1 < nx:
        refine_uniform(mesh, 1, axes=(0,))
    while len(mesh.breakpoints(1)) - 1 < ny:
        refine_uniform(mesh, 1, axes=(1,))
    return mesh


# ----------------------------------------------------------------------
# JSON documents
# ----------------------------------------------------------------------


class MeshlineDocument(BaseModel):
    orientation: Orientation
    fixed: float
    start: float
    end: float
    multiplicity: int = 1


class ElementDocument(BaseModel):
    id: int
    bounds: Tuple[float, float, float, float]


class FunctionDocument(BaseModel):
    id: int
    knots_xi: List[float]
    knots_eta: List[float]
    cp_hom: Tuple[float, float, float, float]
    gamma: float
    fields: List[Tuple[float, float, float, float]] = Field(default_factory=list)


class MeshDocument(BaseModel):
    version: int = MESH_FORMAT_VERSION
    degrees: Tuple[int, int]
    domain: Tuple[float, float, float, float]
    meshlines: List[MeshlineDocument]
    elements: List[ElementDocument]
    functions: List[FunctionDocument]


def mesh_to_document(mesh: LRMesh, include_fields: bool = False) -> MeshDocument:
    return MeshDocument(
        degrees=mesh.degrees,
        domain=mesh.domain,
        meshlines=[
            MeshlineDocument(
                orientation=m.orientation, fixed=m.fixed, start=m.start, end=m.end,
                multiplicity=m.multiplicity,
            )
            for m in mesh.meshlines
        ],
        elements=[ElementDocument(id=e, bounds=mesh.elements[e].bounds) for e in mesh.element_ids()],
        functions=[
            FunctionDocument(
                id=f,
                knots_xi=list(mesh.functions[f].kv_xi.knots),
                knots_eta=list(mesh.functions[f].kv_eta.knots),
                cp_hom=tuple(mesh.functions[f].cp_hom.tolist()),
                gamma=mesh.functions[f].gamma,
                fields=[tuple(row) for row in mesh.functions[f].fields.tolist()] if include_fields else [],
            )
            for f in mesh.function_ids()
        ],
    )


def mesh_from_document(doc: MeshDocument) -> LRMesh:
    if doc.version != MESH_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported mesh format version {doc.version}")
    p, q = doc.degrees
    mesh = LRMesh(p, q, doc.domain)
    for el in doc.elements:
        mesh.elements[el.id] = Element(el.id, *el.bounds)
        for axis, (lo, hi) in enumerate((el.bounds[:2], el.bounds[2:])):
            mesh._snap(axis, lo)
            mesh._snap(axis, hi)
    mesh._next_element = max((el.id for el in doc.elements), default=-1) + 1
    for m in doc.meshlines:
        mesh.meshlines.append(Meshline(m.orientation, m.fixed, m.start, m.end, m.multiplicity))
    for f in doc.functions:
        fn = LRFunction(
            LocalKnotVector(tuple(f.knots_xi), p),
            LocalKnotVector(tuple(f.knots_eta), q),
            f.cp_hom,
            f.gamma,
            np.array(f.fields, dtype=float).reshape(-1, 4) if f.fields else None,
        )
        fn.id = f.id
        mesh.functions[f.id] = fn
        mesh._keys[fn.key] = f.id
    mesh._next_function = max((f.id for f in doc.functions), default=-1) + 1
    return mesh


def mesh_to_json(mesh: LRMesh, include_fields: bool = False) -> str:
    return mesh_to_document(mesh, include_fields).model_dump_json(indent=2)


def mesh_from_json(text: str) -> LRMesh:
    return mesh_from_document(MeshDocument.model_validate(json.loads(text)))


def save_mesh(mesh: LRMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(mesh_to_json(mesh))
    logger.info(f"Mesh snapshot written: {path} ({mesh.n_functions} functions, {len(mesh.elements)} elements)")
    return path


def load_mesh(path: Union[str, Path]) -> LRMesh:
    return mesh_from_json(Path(path).read_text())
