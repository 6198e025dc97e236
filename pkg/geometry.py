"""Patch builders for the scenarios: flat sheets and rational sphere patches."""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from errors import ConfigurationError
from lr_kernel import LRMesh, to_projective

logger = logging.getLogger(__name__)

SQRT_HALF = np.sqrt(0.5)

# Quadratic rational quarter circle from (1, 0) to (0, 1).
QUARTER_ARC = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
QUARTER_WEIGHTS = np.array([1.0, SQRT_HALF, 1.0])


def open_uniform_knots(n_elements: int, degree: int, start: float = 0.0, end: float = 1.0) -> List[float]:
    """Open knot vector with ``n_elements`` equal spans on [start, end]."""
    if n_elements < 1:
        raise ConfigurationError(f"need at least one element, got {n_elements}")
    interior = np.linspace(start, end, n_elements + 1)[1:-1]
    return [start] * (degree + 1) + interior.tolist() + [end] * (degree + 1)


def circle_weights(n_quarters: int) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """
    Control polygon of a quadratic rational arc of ``n_quarters`` quarter turns.

    Returns:
        (xy points (2*n+1, 2), weights, knots) with C0 joints of multiplicity 2
    """
    if not 1 <= n_quarters <= 4:
        raise ConfigurationError(f"arc must span 1 to 4 quarter turns, got {n_quarters}")
    points = [QUARTER_ARC[0]]
    weights = [1.0]
    for k in range(n_quarters):
        c, s = np.cos(0.5 * np.pi * k), np.sin(0.5 * np.pi * k)
        rot = np.array([[c, -s], [s, c]])
        for row, w in zip(QUARTER_ARC[1:], QUARTER_WEIGHTS[1:]):
            points.append(rot @ row)
            weights.append(w)
    knots = [0.0] * 3
    for k in range(1, n_quarters):
        knots += [k / n_quarters] * 2
    knots += [1.0] * 3
    points = np.round(np.array(points), 15)
    return points, np.array(weights), knots


def _revolved_cap(radius: float, n_quarters: int) -> LRMesh:
    if radius <= 0:
        raise ConfigurationError(f"radius must be positive, got {radius}")
    circle, wc, knots_xi = circle_weights(n_quarters)
    # meridian (r, z) from the equator to the pole
    meridian = QUARTER_ARC
    wm = QUARTER_WEIGHTS
    points = np.zeros((len(circle), len(meridian), 3))
    weights = np.zeros((len(circle), len(meridian)))
    for i, (cx, cy) in enumerate(circle):
        for j, (r, z) in enumerate(meridian):
            points[i, j] = radius * np.array([cx * r, cy * r, z])
            weights[i, j] = wc[i] * wm[j]
    cp_hom = to_projective(points.reshape(-1, 3), weights.ravel()).reshape(len(circle), len(meridian), 4)
    return LRMesh.from_tensor(knots_xi, [0, 0, 0, 1, 1, 1], 2, 2, cp_hom)


def hemisphere(radius: float = 1.0) -> LRMesh:
    """Upper hemisphere as one biquadratic rational patch.

    xi runs once around the equator (seam at xi = 0 and xi = 1), eta runs from
    the equator (eta = 0) to the degenerate pole edge (eta = 1). The normal
    a_xi x a_eta points outward.
    """
    mesh = _revolved_cap(radius, 4)
    logger.debug(f"Hemisphere patch R={radius}: {mesh.n_functions} functions")
    return mesh


def sphere_octant(radius: float = 1.0) -> LRMesh:
    """First-octant sphere patch, exact on |x| = radius, pole edge at eta = 1."""
    return _revolved_cap(radius, 1)


def flat_sheet(
    width: float,
    height: float,
    nx: int,
    ny: int,
    p: int = 2,
    q: int = 2,
    origin: Sequence[float] = (0.0, 0.0),
) -> LRMesh:
    """
    Planar open-uniform patch in the z = 0 plane on the parameter domain [0,1]^2.

    Control points sit at the Greville abscissae, so the map is affine and
    a_xi x a_eta points along +z.
    """
    if width <= 0 or height <= 0:
        raise ConfigurationError(f"sheet size must be positive, got {width} x {height}")
    kx = open_uniform_knots(nx, p)
    ky = open_uniform_knots(ny, q)
    gx = np.array([np.mean(kx[i + 1:i + p + 1]) for i in range(len(kx) - p - 1)])
    gy = np.array([np.mean(ky[j + 1:j + q + 1]) for j in range(len(ky) - q - 1)])
    X, Y = np.meshgrid(origin[0] + width * gx, origin[1] + height * gy, indexing="ij")
    points = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    cp_hom = to_projective(points.reshape(-1, 3), np.ones(X.size)).reshape(X.shape + (4,))
    return LRMesh.from_tensor(kx, ky, p, q, cp_hom)
