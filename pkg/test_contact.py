"""Tests for the rigid-sphere penalty contact."""

import numpy as np
import pytest

from contact import (
    ContactParams,
    RigidSphere,
    SphereContact,
    SpherePath,
    active_elements,
    contact_force,
    element_penalty,
    max_penetration,
    net_contact_force,
    sphere_gap,
)
from errors import ConfigurationError, ProjectionError
from geometry import flat_sheet
from lr_kernel import refine_uniform
from membrane_fem import MembraneModel, assemble, state_from_mesh

PARAMS = ContactParams(penalty=100.0, degree=2, base_lengths=(1.0, 1.0))


@pytest.fixture
def single_element():
    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 1, 1), n_quad=(3, 3))
    return model, model.element_data()[0], state_from_mesh(model)


def test_gap_of_penetrating_point():
    g, n, x_p = sphere_gap((0.0, 0.0, 0.25), RigidSphere((0.0, 0.0, 1.0), 1.0))
    assert g == pytest.approx(-0.25)
    np.testing.assert_allclose(n, [0.0, 0.0, -1.0])
    np.testing.assert_allclose(x_p, [0.0, 0.0, 0.0], atol=1e-15)


def test_gap_on_and_off_the_surface():
    sphere = RigidSphere((1.0, 2.0, 3.0), 0.5)
    assert sphere_gap((1.5, 2.0, 3.0), sphere)[0] == pytest.approx(0.0, abs=1e-15)
    assert sphere_gap((1.0, 3.0, 3.0), sphere)[0] == pytest.approx(0.5)


def test_gap_at_center_rejected():
    with pytest.raises(ProjectionError):
        sphere_gap((0.0, 0.0, 1.0), RigidSphere((0.0, 0.0, 1.0), 1.0))


@pytest.mark.parametrize("degree,factor", [(1, 1.0), (2, 4.0), (3, 16.0)])
def test_penalty_scales_with_element_area(degree, factor):
    params = ContactParams(penalty=3.0, degree=degree, base_lengths=(0.25, 0.25))
    assert element_penalty(params, (0.25, 0.25)) == pytest.approx(3.0)
    assert element_penalty(params, (0.125, 0.125)) == pytest.approx(3.0 * factor)


def test_parametric_penalty_matches_physical_sizes_on_flat_sheets():
    mesh = refine_uniform(flat_sheet(2.0, 1.0, 4, 4), 1)
    parametric = ContactParams(penalty=3.0, degree=2, base_lengths=(0.25, 0.25))
    physical = ContactParams(penalty=3.0, degree=2, base_lengths=(0.5, 0.25))
    for el in mesh.elements.values():
        corner = mesh.surface_point(el.u0, el.v0)
        lx = np.linalg.norm(mesh.surface_point(el.u1, el.v0) - corner)
        ly = np.linalg.norm(mesh.surface_point(el.u0, el.v1) - corner)
        expected = element_penalty(physical, (lx, ly))
        assert element_penalty(parametric, el.size) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(12.0)


def test_contact_force_is_continuous_in_sphere_position():
    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 4, 4), n_quad=(3, 3))
    params = ContactParams(penalty=30.0, degree=2, base_lengths=(0.25, 0.25))
    state = state_from_mesh(model)
    center = np.array([0.43, 0.52, 0.27])
    total, count = net_contact_force(model, state, RigidSphere(center, 0.3), params)
    assert count > 1
    for axis in range(3):
        shifted = center.copy()
        shifted[axis] += 1e-8
        moved, _ = net_contact_force(model, state, RigidSphere(shifted, 0.3), params)
        assert np.linalg.norm(moved - total) < 1e-5 * np.linalg.norm(total)


@pytest.mark.parametrize("kwargs", [{"penalty": 0.0}, {"base_lengths": (0.0, 1.0)}])
def test_invalid_params_rejected(kwargs):
    values = {"penalty": 1.0, "degree": 2, "base_lengths": (1.0, 1.0)}
    values.update(kwargs)
    with pytest.raises(ConfigurationError):
        ContactParams(**values)


def test_invalid_sphere_rejected():
    with pytest.raises(ConfigurationError):
        RigidSphere((0.0, 0.0, 0.0), -1.0)


def test_distant_sphere_exerts_nothing(single_element):
    model, ed, state = single_element
    ec = contact_force(ed, state.points[ed.index], RigidSphere((0.5, 0.5, 3.0), 1.0), PARAMS)
    assert not ec.active.any()
    assert ec.tangent is None
    np.testing.assert_array_equal(ec.force, 0.0)


def test_uniform_penetration_force(single_element):
    model, _, state = single_element
    radius, depth = 1e5, 0.01
    sphere = RigidSphere((0.5, 0.5, -radius + depth), radius)
    total, count = net_contact_force(model, state, sphere, PARAMS)
    assert count == 1
    assert total[2] == pytest.approx(PARAMS.penalty * depth, rel=1e-3)
    np.testing.assert_allclose(total[:2], 0.0, atol=1e-9)
    assert max_penetration(model, state, sphere) == pytest.approx(depth, rel=1e-3)


def test_contact_tangent_matches_finite_differences(single_element):
    _, ed, state = single_element
    rng = np.random.default_rng(7)
    x_e = state.points[ed.index] + 0.02 * rng.standard_normal((len(ed.index), 3))
    sphere = RigidSphere((0.5, 0.5, -0.6), 1.0)
    ec = contact_force(ed, x_e, sphere, PARAMS)
    assert ec.active.all()
    h = 1e-7
    for j in range(x_e.size):
        step = np.zeros(x_e.size)
        step[j] = h
        plus = contact_force(ed, x_e + step.reshape(-1, 3), sphere, PARAMS, with_tangent=False).force
        minus = contact_force(ed, x_e - step.reshape(-1, 3), sphere, PARAMS, with_tangent=False).force
        np.testing.assert_allclose((plus - minus) / (2 * h), ec.tangent[:, j], rtol=1e-6, atol=1e-6 * PARAMS.penalty)


def test_contact_enters_residual():
    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 2, 2), n_quad=(3, 3))
    contact = SphereContact(1.0, PARAMS)
    state = state_from_mesh(model, sphere_center=(0.5, 0.5, 0.95))
    system = assemble(model, state, contact)
    assert system.contact_force is not None
    # undeformed sheet: the residual is the contact force alone, pushing down
    np.testing.assert_allclose(system.residual, -system.contact_force)
    assert system.contact_force.reshape(-1, 3)[:, 2].sum() < 0.0
    assert active_elements(model, state, contact.sphere(state)) == set(model.mesh.element_ids())


def test_contact_term_needs_sphere_center():
    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 1, 1))
    with pytest.raises(ConfigurationError):
        SphereContact(1.0, PARAMS).sphere(state_from_mesh(model))


def test_sphere_path():
    path = SpherePath([(0, 0, 2), (0, 0, 1), (4, 0, 1)], [2, 4])
    centers = path.centers()
    assert len(path) == len(centers) == 6
    np.testing.assert_allclose(centers[0], [0, 0, 1.5])
    np.testing.assert_allclose(centers[1], [0, 0, 1])
    np.testing.assert_allclose(centers[-1], [4, 0, 1])
    np.testing.assert_allclose(path.start, [0, 0, 2])
    assert [path.leg_of_step(s) for s in range(1, 7)] == [0, 0, 1, 1, 1, 1]


@pytest.mark.parametrize("waypoints,steps", [([(0, 0, 1)], []), ([(0, 0, 1), (0, 0, 0)], [0]), ([(0, 0, 1), (0, 0, 0)], [2, 2])])
def test_bad_sphere_path_rejected(waypoints, steps):
    with pytest.raises(ConfigurationError):
        SpherePath(waypoints, steps)
