"""Bezier extraction for LR NURBS elements.

Every supporting function of an element is expressed in the Bernstein basis
of that element: the local knot vector is opened, decomposed into Bezier
spans, and the row of the span containing the element is remapped onto the
element's own interval when the two differ.
"""

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import comb

from errors import SingularGeometryError, SpanError
from lr_kernel import TOL, LocalKnotVector, LRMesh
from writers.tables import write_csv

logger = logging.getLogger(__name__)


def bernstein(p: int, t: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bernstein polynomials of degree p on [0, 1].

    Args:
        p: Degree
        t: Local coordinate(s) in [0, 1]

    Returns:
        (values, derivatives), shape (p+1,) for scalar t, (n, p+1) otherwise
    """
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)[:, None]
    i = np.arange(p + 1)[None, :]
    values = comb(p, i) * t ** i * (1.0 - t) ** (p - i)
    if p == 0:
        derivs = np.zeros_like(values)
    else:
        j = np.arange(p)[None, :]
        lower = comb(p - 1, j) * t ** j * (1.0 - t) ** (p - 1 - j)
        derivs = np.zeros_like(values)
        derivs[:, 1:] += p * lower
        derivs[:, :-1] -= p * lower
    if scalar:
        return values[0], derivs[0]
    return values, derivs


def gauss_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1] (weights sum to 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def open_extend(kv: LocalKnotVector) -> Tuple[Tuple[float, ...], int]:
    """
    Open a local knot vector by repeating its end knots up to multiplicity p+1.

    Returns:
        (extended knots, index of the original function in the extended vector)
    """
    p = kv.degree
    head = p + 1 - kv.multiplicity(kv.start)
    tail = p + 1 - kv.multiplicity(kv.end)
    ext = (kv.start,) * head + kv.knots + (kv.end,) * tail
    return ext, head


def bezier_decomposition(knots: Sequence[float], p: int) -> Tuple[List[Tuple[float, float, int]], np.ndarray]:
    """
    Element extraction operators of an open knot vector by knot insertion.

    Returns:
        (spans, operators): spans[e] = (a, b, k) with knots[k] = a the last
        copy of the left knot, operators[e] of shape (p+1, p+1) mapping the
        Bernstein basis of span e onto functions k-p .. k
    """
    knots = np.asarray(knots, dtype=float)
    n_knots = knots.shape[0]
    a = p
    b = a + 1
    spans = []
    operators = [np.eye(p + 1)]
    while b + 1 < n_knots or (b < n_knots and not spans):
        current = operators[-1]
        b0 = b
        while b + 1 < n_knots and knots[b] == knots[b + 1]:
            b += 1
        mult = b - b0 + 1
        spans.append((float(knots[a]), float(knots[b0]), a))
        if b + 1 < n_knots:
            following = np.eye(p + 1)
            operators.append(following)
        if mult < p and b + 1 < n_knots:
            numer = knots[b] - knots[a]
            alphas = np.zeros(p - mult)
            for j in range(p, mult, -1):
                alphas[j - mult - 1] = numer / (knots[a + j] - knots[a])
            r = p - mult
            for j in range(r):
                save = r - j - 1
                s = mult + j
                for k in range(p, s, -1):
                    alpha = alphas[k - s - 1]
                    current[:, k] = alpha * current[:, k] + (1.0 - alpha) * current[:, k - 1]
                following[save:j + save + 2, save] = current[p - j - 1:p + 1, p]
        if b + 1 >= n_knots:
            break
        a = b
        b = b + 1
    return spans, np.asarray(operators[:len(spans)])


def extraction_row(kv: LocalKnotVector, bezier_span: Tuple[float, float]) -> np.ndarray:
    """
    Bernstein coefficients of one local function on one of its knot spans.

    Raises:
        SpanError: if ``bezier_span`` is not a knot span of ``kv``
    """
    lo, hi = bezier_span
    ext, target = open_extend(kv)
    p = kv.degree
    spans, operators = bezier_decomposition(ext, p)
    for (a, b, k), op in zip(spans, operators):
        if abs(a - lo) <= TOL and abs(b - hi) <= TOL:
            return op[target - (k - p)].copy()
    raise SpanError(f"[{lo}, {hi}] is not a knot span of {kv.knots}")


def _chebyshev(c: float, d: float, n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 * (c + d) + 0.5 * (d - c) * np.cos((2 * k + 1) * np.pi / (2 * n))


def remap_row(
    coeffs: np.ndarray, bezier_span: Tuple[float, float], element_span: Tuple[float, float]
) -> np.ndarray:
    """Re-express Bernstein coefficients on [a, b] over the sub-interval [c, d]."""
    coeffs = np.asarray(coeffs, dtype=float)
    a, b = bezier_span
    c, d = element_span
    if not d - c > TOL:
        raise SpanError(f"degenerate element span [{c}, {d}]")
    if c < a - TOL or d > b + TOL:
        raise SpanError(f"[{c}, {d}] is not inside [{a}, {b}]")
    if abs(a - c) <= TOL and abs(b - d) <= TOL:
        return coeffs.copy()
    p = coeffs.size - 1
    x = _chebyshev(c, d, p + 1)
    sub, _ = bernstein(p, (x - c) / (d - c))
    full, _ = bernstein(p, (x - a) / (b - a))
    transform = linalg.solve(sub, full).T
    return coeffs @ transform


@dataclass(eq=False)
class ElementOperator:
    """Extraction rows and quadrature tables of one element."""

    element_id: int
    bounds: Tuple[float, float, float, float]
    degrees: Tuple[int, int]
    function_ids: List[int]
    rows_xi: np.ndarray
    rows_eta: np.ndarray
    gammas: np.ndarray
    n_quad: Tuple[int, int] = (3, 3)
    points: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)
    values: np.ndarray = field(default=None, repr=False)
    d_xi: np.ndarray = field(default=None, repr=False)
    d_eta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        tx, wx = gauss_rule(self.n_quad[0])
        ty, wy = gauss_rule(self.n_quad[1])
        TX, TY = np.meshgrid(tx, ty, indexing="ij")
        hx, hy = self.size
        u0, _, v0, _ = self.bounds
        self.points = np.column_stack([u0 + hx * TX.ravel(), v0 + hy * TY.ravel()])
        self.weights = np.outer(wx, wy).ravel() * hx * hy
        self.values, self.d_xi, self.d_eta = self.evaluate(TX.ravel(), TY.ravel())

    @property
    def size(self) -> Tuple[float, float]:
        u0, u1, v0, v1 = self.bounds
        return u1 - u0, v1 - v0

    @property
    def n_functions(self) -> int:
        return len(self.function_ids)

    def evaluate(self, t_xi, t_eta) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unscaled B, dB/dxi, dB/deta at local element coordinates in [0,1]^2, shape (n, n_e)."""
        bx, dbx = bernstein(self.degrees[0], np.atleast_1d(t_xi))
        by, dby = bernstein(self.degrees[1], np.atleast_1d(t_eta))
        hx, hy = self.size
        fx = bx @ self.rows_xi.T
        fy = by @ self.rows_eta.T
        dfx = dbx @ self.rows_xi.T / hx
        dfy = dby @ self.rows_eta.T / hy
        return fx * fy, dfx * fy, fx * dfy

    def rational(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Shape functions gamma*R at the quadrature points.

        Args:
            weights: Reference weights of the supporting functions

        Returns:
            (N of shape (nq, n_e), dN of shape (nq, n_e, 2))
        """
        gw = self.gammas * np.asarray(weights, dtype=float)
        num = self.values * gw
        num_x = self.d_xi * gw
        num_y = self.d_eta * gw
        W = num.sum(axis=1)
        if np.any(np.abs(W) < 1e-300):
            raise SingularGeometryError(f"weight function vanishes in element {self.element_id}")
        Wx = num_x.sum(axis=1)
        Wy = num_y.sum(axis=1)
        N = num / W[:, None]
        dN = np.stack(
            [(num_x - N * Wx[:, None]) / W[:, None], (num_y - N * Wy[:, None]) / W[:, None]],
            axis=-1,
        )
        return N, dN


def element_operator(mesh: LRMesh, element_id: int, n_quad: Tuple[int, int] = (3, 3)) -> ElementOperator:
    """Compose per-direction extraction and remap rows for every function supported on an element."""
    el = mesh.elements[element_id]
    ids = mesh.element_support(element_id)
    rows_xi, rows_eta, gammas = [], [], []
    for fid in ids:
        fn = mesh.functions[fid]
        rows = []
        for kv, (lo, hi) in ((fn.kv_xi, (el.u0, el.u1)), (fn.kv_eta, (el.v0, el.v1))):
            span = kv.span_containing(lo, hi)
            rows.append(remap_row(extraction_row(kv, span), span, (lo, hi)))
        rows_xi.append(rows[0])
        rows_eta.append(rows[1])
        gammas.append(fn.gamma)
    p, q = mesh.degrees
    return ElementOperator(
        element_id=element_id,
        bounds=el.bounds,
        degrees=(p, q),
        function_ids=list(ids),
        rows_xi=np.array(rows_xi).reshape(-1, p + 1),
        rows_eta=np.array(rows_eta).reshape(-1, q + 1),
        gammas=np.array(gammas),
        n_quad=tuple(n_quad),
    )


class OperatorCache:
    """Element operators of one mesh revision; concurrent reads, exclusive insertion."""

    def __init__(self):
        self._lock = threading.Lock()
        self._revision = None
        self._store: Dict[Tuple[int, Tuple[int, int]], ElementOperator] = {}

    def get(self, mesh: LRMesh, element_id: int, n_quad: Tuple[int, int] = (3, 3)) -> ElementOperator:
        key = (element_id, tuple(n_quad))
        if self._revision == mesh.revision:
            op = self._store.get(key)
            if op is not None:
                return op
        with self._lock:
            if self._revision != mesh.revision:
                self._store.clear()
                self._revision = mesh.revision
            op = self._store.get(key)
            if op is None:
                op = element_operator(mesh, element_id, n_quad)
                self._store[key] = op
            return op

    def __len__(self):
        return len(self._store)


def operators_for(mesh: LRMesh, n_quad: Tuple[int, int] = (3, 3)) -> List[ElementOperator]:
    """Operators of all elements in element-id order, cached on the mesh."""
    cache = mesh._cache.get("operators")
    if cache is None:
        cache = OperatorCache()
        mesh._cache["operators"] = cache
    return [cache.get(mesh, eid, n_quad) for eid in mesh.element_ids()]


def dump_operators_csv(mesh: LRMesh, path: Union[str, Path]) -> Path:
    """Write element id, function id, direction and row coefficients for every element."""
    p, q = mesh.degrees
    width = max(p, q) + 1
    header = ["element", "function", "direction"] + [f"c{k}" for k in range(width)]
    rows = []
    for op in operators_for(mesh):
        for fid, rx, ry in zip(op.function_ids, op.rows_xi, op.rows_eta):
            rows.append([op.element_id, fid, "xi"] + [f"{c:.17g}" for c in rx] + [""] * (width - rx.size))
            rows.append([op.element_id, fid, "eta"] + [f"{c:.17g}" for c in ry] + [""] * (width - ry.size))
    return write_csv(path, header, rows)
