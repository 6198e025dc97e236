"""Tests for Bernstein evaluation, 1D extraction rows and element operators."""

from math import comb

import numpy as np
import pytest

from bezier_extract import (
    OperatorCache,
    bernstein,
    bezier_decomposition,
    dump_operators_csv,
    element_operator,
    extraction_row,
    gauss_rule,
    open_extend,
    operators_for,
    remap_row,
)
from errors import SpanError
from geometry import flat_sheet, sphere_octant
from lr_kernel import LocalKnotVector, Meshline, Orientation, eval_basis_1d, refine_uniform
from writers.tables import read_csv


def bernstein_values(row, t):
    values, _ = bernstein(len(row) - 1, t)
    return values @ row


def test_bernstein_midpoint_and_endpoint():
    values, _ = bernstein(2, 0.5)
    np.testing.assert_allclose(values, [0.25, 0.5, 0.25])
    values, _ = bernstein(2, 0.0)
    np.testing.assert_allclose(values, [1.0, 0.0, 0.0])


def test_bernstein_matches_binomial_formula():
    values, derivs = bernstein(3, 0.25)
    expected = [comb(3, i) * 0.25 ** i * 0.75 ** (3 - i) for i in range(4)]
    np.testing.assert_allclose(values, expected, atol=1e-15)
    assert derivs.sum() == pytest.approx(0.0, abs=1e-14)


def test_gauss_rule_is_exact_for_degree_five():
    x, w = gauss_rule(3)
    assert w.sum() == pytest.approx(1.0)
    assert float(w @ x ** 5) == pytest.approx(1.0 / 6.0, abs=1e-15)


@pytest.mark.parametrize(
    "knots,expected,target",
    [
        ((0.0, 0.0, 0.0, 1.0), (0.0, 0.0, 0.0, 1.0, 1.0, 1.0), 0),
        ((0.0, 0.25, 0.5, 0.75), (0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 0.75, 0.75), 2),
        ((0.0, 1.0, 2.0, 3.0), (0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 3.0, 3.0), 2),
    ],
)
def test_open_extend(knots, expected, target):
    ext, index = open_extend(LocalKnotVector(knots, 2))
    assert ext == expected
    assert index == target


def test_decomposition_of_single_bezier_patch():
    spans, operators = bezier_decomposition([0, 0, 0, 1, 1, 1], 2)
    assert spans == [(0.0, 1.0, 2)]
    np.testing.assert_allclose(operators[0], np.eye(3))


def test_row_of_open_function_is_bernstein():
    row = extraction_row(LocalKnotVector((0.0, 0.0, 0.0, 1.0), 2), (0.0, 1.0))
    np.testing.assert_allclose(row, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("span", [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75)])
def test_row_reproduces_basis_on_each_span(span):
    kv = LocalKnotVector((0.0, 0.25, 0.5, 0.75), 2)
    row = extraction_row(kv, span)
    t = np.linspace(0.0, 1.0, 50)
    expected, _ = eval_basis_1d(kv, span[0] + (span[1] - span[0]) * t, from_right=True)
    np.testing.assert_allclose(bernstein_values(row, t), expected, atol=1e-13)


def test_uniform_cubic_rows():
    kv = LocalKnotVector((0.0, 1.0, 2.0, 3.0, 4.0), 3)
    np.testing.assert_allclose(extraction_row(kv, (0.0, 1.0)), [0, 0, 0, 1 / 6], atol=1e-14)
    np.testing.assert_allclose(extraction_row(kv, (1.0, 2.0)), [1 / 6, 1 / 3, 2 / 3, 2 / 3], atol=1e-14)
    np.testing.assert_allclose(extraction_row(kv, (2.0, 3.0)), [2 / 3, 2 / 3, 1 / 3, 1 / 6], atol=1e-14)
    np.testing.assert_allclose(extraction_row(kv, (3.0, 4.0)), [1 / 6, 0, 0, 0], atol=1e-14)


def test_row_for_unknown_span_rejected():
    with pytest.raises(SpanError):
        extraction_row(LocalKnotVector((0.0, 0.25, 0.5, 0.75), 2), (0.1, 0.5))


def test_remap_identity_span():
    row = np.array([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(remap_row(row, (0.0, 1.0), (0.0, 1.0)), row)


def test_remap_onto_half_span():
    kv = LocalKnotVector((0.0, 0.0, 0.2, 0.4), 2)
    span = kv.span_containing(0.0, 0.1)
    assert span == (0.0, 0.2)
    row = remap_row(extraction_row(kv, span), span, (0.0, 0.1))
    t = np.linspace(0.0, 1.0, 50)
    expected, _ = eval_basis_1d(kv, 0.1 * t)
    np.testing.assert_allclose(bernstein_values(row, t), expected, atol=1e-12)


def test_remap_preserves_constants():
    np.testing.assert_allclose(remap_row(np.ones(4), (0.0, 1.0), (0.3, 0.55)), np.ones(4), atol=1e-13)


@pytest.mark.parametrize("sub", [(0.5, 0.5), (0.8, 1.2)])
def test_remap_rejects_bad_sub_spans(sub):
    with pytest.raises(SpanError):
        remap_row(np.ones(3), (0.0, 1.0), sub)


def locally_refined_octant():
    mesh = refine_uniform(sphere_octant(1.0), 2)
    mesh.insert_meshline(Meshline(Orientation.VERTICAL, 0.375, 0.0, 0.75))
    mesh.insert_meshline(Meshline(Orientation.HORIZONTAL, 0.375, 0.25, 1.0))
    return mesh


@pytest.mark.parametrize("build", [lambda: flat_sheet(1.0, 1.0, 3, 3, 2, 3), locally_refined_octant])
def test_operators_reproduce_direct_evaluation(build):
    mesh = build()
    for op in operators_for(mesh, (4, 4)):
        for k, (xi, eta) in enumerate(op.points):
            ids, values, dxi, deta = mesh.basis(xi, eta, derivatives=True)
            position = {int(f): j for j, f in enumerate(ids)}
            order = [position[f] for f in op.function_ids]
            np.testing.assert_allclose(op.values[k] * op.gammas, values[order], atol=1e-12)
            np.testing.assert_allclose(op.d_xi[k] * op.gammas, dxi[order], atol=1e-12)
            np.testing.assert_allclose(op.d_eta[k] * op.gammas, deta[order], atol=1e-12)
        assert np.allclose((op.values * op.gammas).sum(axis=1), 1.0, atol=1e-12)


def test_every_element_spans_full_polynomial_space():
    mesh = locally_refined_octant()
    p, q = mesh.degrees
    counts = [op.n_functions for op in operators_for(mesh)]
    assert min(counts) >= (p + 1) * (q + 1)


def test_rational_shape_functions_partition_unity():
    mesh = sphere_octant(2.0)
    op = element_operator(mesh, mesh.element_ids()[0], (3, 3))
    weights = np.array([mesh.functions[f].weight for f in op.function_ids])
    N, dN = op.rational(weights)
    np.testing.assert_allclose(N.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(dN.sum(axis=1), 0.0, atol=1e-12)
    assert op.weights.sum() == pytest.approx(1.0)


def test_cache_follows_mesh_revision():
    mesh = flat_sheet(1.0, 1.0, 4, 4)
    cache = OperatorCache()
    first = cache.get(mesh, 0)
    assert cache.get(mesh, 0) is first
    mesh.insert_meshline(Meshline(Orientation.VERTICAL, 0.125, 0.0, 1.0))
    assert cache.get(mesh, mesh.element_ids()[0]) is not first
    assert len(cache) == 1


def test_operator_dump(tmp_path):
    mesh = flat_sheet(1.0, 1.0, 2, 2, 2, 3)
    path = dump_operators_csv(mesh, tmp_path / "operators.csv")
    rows = read_csv(path)
    assert len(rows) == 2 * sum(op.n_functions for op in operators_for(mesh))
    assert rows[0]["c3"] == ""
