"""Tests for membrane kinematics, forces, tangents, volume and the Newton solver."""

import numpy as np
import pytest

from config import config
from errors import ConfigurationError, LoadStepError
from geometry import flat_sheet, hemisphere, sphere_octant
from lr_kernel import refine_to_counts, refine_uniform
from membrane_fem import (
    EdgeCollapse,
    EdgeConstraint,
    EdgeTie,
    MembraneModel,
    StepControls,
    assemble,
    build_reduction,
    convergence_tolerances,
    enclosed_volume,
    internal_force,
    membrane_stress,
    metrics,
    net_force,
    newton_solve,
    on_edge,
    solve_load_step,
    state_from_mesh,
    strain_energy,
)

HEMISPHERE_RULES = (EdgeConstraint("eta0", ("z", "tangential")), EdgeTie("xi0", "xi1"), EdgeCollapse("eta1"))


def perturbed(state, scale, seed=0):
    rng = np.random.default_rng(seed)
    return state.with_points(state.points + scale * rng.standard_normal(state.points.shape))


def hemisphere_model(n=None, n_quad=(3, 3)):
    mesh = hemisphere(1.0)
    if n is not None:
        refine_to_counts(mesh, n, n)
    return MembraneModel(1.0, mesh, HEMISPHERE_RULES, n_quad=n_quad, closure_planes=[(0, 0, 1)])


@pytest.fixture
def sheet_model():
    return MembraneModel(1.0, flat_sheet(1.0, 1.0, 2, 2), n_quad=(3, 3))


# ----------------------------------------------------------------------
# kinematics and stress
# ----------------------------------------------------------------------


def test_identity_deformation_has_unit_stretch(sheet_model):
    state = state_from_mesh(sheet_model)
    for eid in sheet_model.mesh.element_ids():
        m = metrics(sheet_model, eid, state)
        np.testing.assert_allclose(m.a_cov, m.A_cov, atol=1e-14)
        np.testing.assert_allclose(m.J, 1.0, atol=1e-14)
        np.testing.assert_allclose(membrane_stress(m, 1.0), 0.0, atol=1e-13)


@pytest.mark.parametrize("stretch", [1.1, 1.5])
def test_equibiaxial_stretch(sheet_model, stretch):
    state = state_from_mesh(sheet_model)
    stretched = state.with_points(state.points * np.array([stretch, stretch, 1.0]))
    m = metrics(sheet_model, sheet_model.mesh.element_ids()[0], stretched)
    np.testing.assert_allclose(m.J, stretch ** 2, rtol=1e-13)
    trace = np.einsum("qab,qab->q", membrane_stress(m, 2.0), m.a_cov)
    np.testing.assert_allclose(trace, 2.0 * 2.0 * (1.0 - stretch ** -6), rtol=1e-12)


def test_prestretch_scales_reference_metric():
    model = MembraneModel(1.0, flat_sheet(1.0, 1.0, 2, 2), prestretch=1.1)
    m = metrics(model, model.mesh.element_ids()[0], state_from_mesh(model))
    np.testing.assert_allclose(m.J, 1.1 ** 2, rtol=1e-13)


def test_octant_normals_are_radial():
    model = MembraneModel(1.0, refine_uniform(sphere_octant(1.0), 1), n_quad=(4, 4))
    state = state_from_mesh(model)
    for ed in model.element_data():
        m = metrics(model, ed.element_id, state)
        x = ed.N @ state.points[ed.index]
        np.testing.assert_allclose(np.linalg.norm(m.normal, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(m.normal, x / np.linalg.norm(x, axis=1)[:, None], atol=1e-12)


# ----------------------------------------------------------------------
# forces and tangents
# ----------------------------------------------------------------------


def test_undeformed_and_rigid_motions_are_force_free(sheet_model):
    state = state_from_mesh(sheet_model)
    c, s = np.cos(0.3), np.sin(0.3)
    rotation = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    for moved in (state, state.with_points(state.points + [0.2, -0.1, 0.4]), state.with_points(state.points @ rotation.T)):
        for eid in sheet_model.mesh.element_ids():
            force, _ = internal_force(sheet_model, eid, moved)
            np.testing.assert_allclose(force, 0.0, atol=1e-12)


def test_internal_force_is_energy_gradient(sheet_model):
    state = perturbed(state_from_mesh(sheet_model), 0.05)
    force = assemble(sheet_model, state).residual
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(5):
        d = rng.standard_normal(state.points.shape)
        plus = strain_energy(sheet_model, state.with_points(state.points + h * d))
        minus = strain_energy(sheet_model, state.with_points(state.points - h * d))
        assert (plus - minus) / (2 * h) == pytest.approx(force @ d.ravel(), rel=1e-6)


def fd_tangent_check(model, state, columns=20, contact=None, seed=1):
    system = assemble(model, state, contact)
    K = system.tangent.toarray()
    rng = np.random.default_rng(seed)
    h = 1e-6
    scale = np.abs(K).max()
    for j in rng.choice(K.shape[1], size=min(columns, K.shape[1]), replace=False):
        step = np.zeros(state.points.size)
        step[j] = h
        plus = assemble(model, state.with_points(state.points + step.reshape(-1, 3)), contact).residual
        minus = assemble(model, state.with_points(state.points - step.reshape(-1, 3)), contact).residual
        np.testing.assert_allclose((plus - minus) / (2 * h), K[:, j], rtol=1e-6, atol=1e-6 * scale)


def test_tangent_matches_finite_differences(sheet_model):
    fd_tangent_check(sheet_model, perturbed(state_from_mesh(sheet_model), 0.05))


def test_pressure_tangent_matches_finite_differences():
    model = hemisphere_model()
    state = perturbed(state_from_mesh(model), 0.01, seed=2)
    v0, _ = enclosed_volume(model, state)
    loaded = state.with_points(state.points, pressure=0.7, volume_target=v0)
    fd_tangent_check(model, loaded)


def test_threaded_assembly_matches_sequential(sheet_model, mocker):
    state = perturbed(state_from_mesh(sheet_model), 0.05)
    sequential = assemble(sheet_model, state)
    mocker.patch.object(config, "assembly_workers", 3)
    threaded = assemble(sheet_model, state)
    np.testing.assert_array_equal(threaded.residual, sequential.residual)
    np.testing.assert_array_equal(threaded.tangent.toarray(), sequential.tangent.toarray())


def test_net_internal_force_vanishes(sheet_model):
    state = perturbed(state_from_mesh(sheet_model), 0.05)
    np.testing.assert_allclose(net_force(sheet_model, state), 0.0, atol=1e-12)


# ----------------------------------------------------------------------
# enclosed volume
# ----------------------------------------------------------------------


def test_hemisphere_volume():
    model = hemisphere_model(8, n_quad=(5, 5))
    volume, _ = enclosed_volume(model, state_from_mesh(model))
    assert volume == pytest.approx(2.0 * np.pi / 3.0, rel=1e-6)


def test_volume_scales_with_cube_of_size():
    model = hemisphere_model()
    state = state_from_mesh(model)
    v1, _ = enclosed_volume(model, state)
    v2, _ = enclosed_volume(model, state.with_points(2.0 * state.points))
    assert v2 == pytest.approx(8.0 * v1, rel=1e-13)


def test_flat_closed_configuration_has_no_volume():
    model = MembraneModel(1.0, flat_sheet(2.0, 1.0, 3, 2), closure_planes=[(0, 0, 1)])
    volume, _ = enclosed_volume(model, state_from_mesh(model))
    assert volume == pytest.approx(0.0, abs=1e-15)


def test_volume_gradient_matches_finite_differences():
    model = hemisphere_model()
    state = perturbed(state_from_mesh(model), 0.01)
    _, gradient = enclosed_volume(model, state)
    rng = np.random.default_rng(4)
    h = 1e-6
    d = rng.standard_normal(state.points.shape)
    plus, _ = enclosed_volume(model, state.with_points(state.points + h * d))
    minus, _ = enclosed_volume(model, state.with_points(state.points - h * d))
    assert (plus - minus) / (2 * h) == pytest.approx(gradient @ d.ravel(), rel=1e-7)


def test_volume_of_open_surface_rejected(sheet_model):
    with pytest.raises(ConfigurationError):
        enclosed_volume(sheet_model, state_from_mesh(sheet_model))


# ----------------------------------------------------------------------
# constraints
# ----------------------------------------------------------------------


def test_hemisphere_reduction():
    model = hemisphere_model()
    mesh = model.mesh
    P = model.reduction()
    ids = mesh.function_ids()
    u = P @ np.random.default_rng(5).standard_normal(P.shape[1])
    dx = u.reshape(-1, 3)
    pole = [k for k, f in enumerate(ids) if on_edge(mesh.functions[f], "eta1", mesh)]
    equator = [k for k, f in enumerate(ids) if on_edge(mesh.functions[f], "eta0", mesh)]
    seam_a = [k for k, f in enumerate(ids) if on_edge(mesh.functions[f], "xi0", mesh)]
    seam_b = [k for k, f in enumerate(ids) if on_edge(mesh.functions[f], "xi1", mesh)]
    np.testing.assert_allclose(dx[pole], np.tile(dx[pole[0]], (len(pole), 1)), atol=1e-14)
    np.testing.assert_allclose(dx[equator, 2], 0.0, atol=1e-14)
    np.testing.assert_allclose(dx[seam_a], dx[seam_b], atol=1e-14)
    for k in equator:
        x = mesh.functions[ids[k]].point
        tangent = np.array([-x[1], x[0], 0.0])
        assert abs(dx[k] @ tangent) < 1e-12


def test_clamped_sheet_has_no_boundary_dofs():
    mesh = flat_sheet(1.0, 1.0, 3, 3)
    P = build_reduction(mesh, [EdgeConstraint(e) for e in ("xi0", "xi1", "eta0", "eta1")])
    # 5x5 functions, only the 3x3 interior ones move
    assert P.shape == (75, 27)


def test_unknown_edge_rejected():
    mesh = flat_sheet(1.0, 1.0, 2, 2)
    with pytest.raises(ConfigurationError):
        build_reduction(mesh, [EdgeConstraint("north")])


# ----------------------------------------------------------------------
# solver
# ----------------------------------------------------------------------


def test_unloaded_state_is_in_equilibrium():
    model = hemisphere_model()
    state = state_from_mesh(model)
    v0, _ = enclosed_volume(model, state)
    state = state.with_points(state.points, volume_target=v0)
    assert np.linalg.norm(assemble(model, state).residual) < 1e-12
    solved = newton_solve(model, state)
    assert solved.iterations == 0
    assert solved.pressure == 0.0


def test_doubling_the_volume_matches_analytic_pressure():
    model = hemisphere_model(8)
    state = state_from_mesh(model)
    v0, _ = enclosed_volume(model, state)
    state = state.with_points(state.points, volume_target=v0)
    solved = solve_load_step(model, state, volume_target=2.0 * v0)
    volume, _ = enclosed_volume(model, solved)
    assert volume == pytest.approx(2.0 * v0, rel=1e-8)
    expected = 2.0 * (2.0 ** (-1.0 / 3.0) - 2.0 ** (-7.0 / 3.0))
    assert solved.pressure == pytest.approx(expected, rel=5e-2)
    assert solved.step == 1


def test_impossible_volume_fails_cleanly():
    model = hemisphere_model()
    state = state_from_mesh(model)
    v0, _ = enclosed_volume(model, state)
    state = state.with_points(state.points, volume_target=v0)
    before = state.cp_hom.copy()
    with pytest.raises(LoadStepError):
        solve_load_step(model, state, volume_target=0.0, controls=StepControls(3, 0, 1e-9, 1e-10))
    np.testing.assert_array_equal(state.cp_hom, before)
    assert state.step == 0


def test_volume_tolerance_follows_the_target():
    model = hemisphere_model()
    state = state_from_mesh(model)
    controls = StepControls(10, 0, 1e-9, 1e-10)
    force_tol, free_tol = convergence_tolerances(model, state, controls)
    assert force_tol == pytest.approx(1e-9)
    assert free_tol == pytest.approx(1e-10)
    big = state.with_points(state.points, volume_target=50.0)
    assert convergence_tolerances(model, big, controls)[1] == pytest.approx(5e-9)
    flat = state.with_points(state.points, volume_target=0.0)
    assert convergence_tolerances(model, flat, controls)[1] == pytest.approx(1e-10)


def inflated_pressure(model):
    state = state_from_mesh(model)
    v0, _ = enclosed_volume(model, state)
    state = state.with_points(state.points, volume_target=v0)
    return solve_load_step(model, state, volume_target=2.0 * v0).pressure


def test_pressure_is_stable_under_quadrature_order():
    coarse = inflated_pressure(hemisphere_model(8, n_quad=(3, 3)))
    fine = inflated_pressure(hemisphere_model(8, n_quad=(5, 5)))
    assert coarse == pytest.approx(fine, rel=1e-6)


def test_pressure_error_decreases_under_uniform_refinement():
    expected = 2.0 * (2.0 ** (-1.0 / 3.0) - 2.0 ** (-7.0 / 3.0))
    errors = []
    for nx, ny in ((4, 2), (8, 4), (16, 8)):
        mesh = refine_to_counts(hemisphere(1.0), nx, ny)
        model = MembraneModel(1.0, mesh, HEMISPHERE_RULES, n_quad=(3, 3), closure_planes=[(0, 0, 1)])
        errors.append(abs(inflated_pressure(model) - expected) / expected)
    assert errors[0] > errors[1] > errors[2]
